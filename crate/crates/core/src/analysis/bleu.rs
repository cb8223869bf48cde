use std::collections::HashMap;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Clipped n-gram matches and candidate n-gram count of one pair.
fn ngram_stats(hyp: &[usize], reference: &[usize], n: usize) -> (usize, usize) {
    if hyp.len() < n {
        return (0, 0);
    }
    let mut ref_counts: HashMap<&[usize], usize> = HashMap::new();
    if reference.len() >= n {
        for g in reference.windows(n) {
            *ref_counts.entry(g).or_default() += 1;
        }
    }
    let mut hyp_counts: HashMap<&[usize], usize> = HashMap::new();
    for g in hyp.windows(n) {
        *hyp_counts.entry(g).or_default() += 1;
    }
    let matches = hyp_counts
        .iter()
        .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, hyp.len() + 1 - n)
}

/// Corpus BLEU on a 0–100 scale: uniform weights over 1- to 4-grams,
/// brevity penalty, and add-one smoothing on the 2- to 4-gram precisions.
pub fn corpus_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::contract("BLEU needs a nonempty corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let (m, t) = ngram_stats(h, r, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..MAX_ORDER {
        log_p += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if hyp_len > ref_len {
        0.0
    } else {
        1.0 - ref_len as f64 / hyp_len as f64
    };
    Ok(100.0 * (bp + log_p / MAX_ORDER as f64).exp())
}
