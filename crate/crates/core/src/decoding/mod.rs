//! Greedy and beam decoding over the cached decoder path, CTC greedy collapse
//! of intermediate-layer labels, and JSON-lines decode dumps.

mod dump;

pub use dump::{read_records, write_records, DecodeRecord};

use std::cmp::Ordering;

use crate::analysis::entropy;
use crate::data::{collapse_units, Sample, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{DecoderState, EncodedMemory, S2utModel, StepOutput};
use crate::tokens::{text, unit};

/// Anything that scores the next unit for a set of hypotheses.
pub trait StepScorer {
    type State: Clone;
    fn initial(&self) -> Self::State;
    fn step(&self, states: &mut [Self::State], tokens: &[usize]) -> Result<StepOutput>;
}

/// The model's cached decoder over one encoded source.
pub struct ModelScorer<'a> {
    pub model: &'a S2utModel,
    pub memory: EncodedMemory,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a S2utModel, sample: &Sample) -> Result<Self> {
        Ok(Self {
            model,
            memory: model.encode_memory(&sample.feats_tensor()?)?,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = DecoderState;

    fn initial(&self) -> DecoderState {
        self.model.new_decoder_state()
    }

    fn step(&self, states: &mut [DecoderState], tokens: &[usize]) -> Result<StepOutput> {
        self.model.step(&self.memory, states, tokens)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated units, ending with eos when finished.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub finished: bool,
    /// CTC argmax on `H_dec^m` at every consumed position.
    pub frame_labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedTrace {
    pub hypothesis: Hypothesis,
    /// Next-unit distribution at every step.
    pub distributions: Vec<Vec<f64>>,
    /// Generation stopped at `max_len` without eos.
    pub truncated: bool,
}

fn selectable(token: usize) -> bool {
    token != unit::PAD && token != unit::BOS
}

/// Highest-scoring emittable unit; the lowest id wins ties.
fn best_unit(logp: &[f64]) -> usize {
    let mut best = None;
    for (i, &x) in logp.iter().enumerate() {
        if selectable(i) && best.is_none_or(|b: usize| x > logp[b]) {
            best = Some(i);
        }
    }
    best.expect("vocabulary has emittable units")
}

pub fn greedy_decode<S: StepScorer>(scorer: &S, max_len: usize) -> Result<DecodedTrace> {
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let mut states = vec![scorer.initial()];
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
        frame_labels: Vec::new(),
    };
    let mut distributions = Vec::new();
    let mut input = unit::BOS;
    while hyp.tokens.len() < max_len {
        let out = scorer.step(&mut states, &[input])?;
        let logp = &out.log_probs[0];
        let tok = best_unit(logp);
        distributions.push(logp.iter().map(|x| x.exp()).collect());
        hyp.frame_labels.push(out.ctc_labels[0]);
        hyp.logprob += logp[tok];
        hyp.tokens.push(tok);
        if tok == unit::EOS {
            hyp.finished = true;
            break;
        }
        input = tok;
    }
    Ok(DecodedTrace {
        truncated: !hyp.finished,
        hypothesis: hyp,
        distributions,
    })
}

struct Active<T> {
    hyp: Hypothesis,
    state: T,
}

fn score(h: &Hypothesis, length_norm: bool) -> f64 {
    if length_norm {
        h.logprob / h.tokens.len().max(1) as f64
    } else {
        h.logprob
    }
}

/// Beam search keeping `beam` unfinished hypotheses per step.
///
/// Without length normalization the search stops once the best finished
/// hypothesis scores at least as high as every active one, since extending a
/// hypothesis never raises its log-probability. With normalization it runs
/// until `beam` hypotheses have finished or `max_len` is reached.
pub fn beam_search<S: StepScorer>(scorer: &S, beam: usize, max_len: usize, length_norm: bool) -> Result<Hypothesis> {
    if beam == 0 || max_len == 0 {
        return Err(Error::contract("beam and max_len must be at least 1"));
    }
    let mut active = vec![Active {
        hyp: Hypothesis {
            tokens: Vec::new(),
            logprob: 0.0,
            finished: false,
            frame_labels: Vec::new(),
        },
        state: scorer.initial(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let inputs: Vec<usize> = active
            .iter()
            .map(|a| a.hyp.tokens.last().copied().unwrap_or(unit::BOS))
            .collect();
        let mut states: Vec<S::State> = active.iter().map(|a| a.state.clone()).collect();
        let out = scorer.step(&mut states, &inputs)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (i, logp) in out.log_probs.iter().enumerate() {
            for (tok, &lp) in logp.iter().enumerate() {
                if selectable(tok) {
                    cands.push((active[i].hyp.logprob + lp, i, tok));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then((a.1, a.2).cmp(&(b.1, b.2)))
        });
        let mut next = Vec::with_capacity(beam);
        for &(lp, i, tok) in &cands {
            if next.len() >= beam {
                break;
            }
            let mut hyp = active[i].hyp.clone();
            hyp.tokens.push(tok);
            hyp.logprob = lp;
            hyp.frame_labels.push(out.ctc_labels[i]);
            if tok == unit::EOS {
                hyp.finished = true;
                finished.push(hyp);
                if length_norm && finished.len() >= beam {
                    break;
                }
            } else {
                next.push(Active {
                    hyp,
                    state: states[i].clone(),
                });
            }
        }
        active = next;
        let best_finished = finished.iter().map(|h| h.logprob).fold(f64::NEG_INFINITY, f64::max);
        let best_active = active.iter().map(|a| a.hyp.logprob).fold(f64::NEG_INFINITY, f64::max);
        let done = if length_norm {
            finished.len() >= beam
        } else {
            best_finished >= best_active
        };
        if active.is_empty() || done {
            break;
        }
    }
    let pool: Vec<Hypothesis> = if finished.is_empty() {
        active.into_iter().map(|a| a.hyp).collect()
    } else {
        finished
    };
    // first-best wins ties, matching the candidate order
    let mut best = &pool[0];
    for h in &pool[1..] {
        if score(h, length_norm) > score(best, length_norm) {
            best = h;
        }
    }
    Ok(best.clone())
}

/// Merge adjacent repeats, then drop blanks.
pub fn ctc_greedy_collapse(frame_labels: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in frame_labels {
        if Some(l) != prev && l != blank {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

/// Collapsed CTC output mapped back to semantic ids; reserved text ids are dropped.
pub fn ctc_semantic(frame_labels: &[usize]) -> Vec<usize> {
    ctc_greedy_collapse(frame_labels, text::BLANK)
        .into_iter()
        .filter(|&t| t >= text::FIRST)
        .map(|t| t - text::FIRST)
        .collect()
}

/// Ordered greedy first, then beams by width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

impl DecodeMode {
    /// The regimes reported in comparison tables.
    pub const STANDARD: [DecodeMode; 3] = [DecodeMode::Greedy, DecodeMode::Beam(5), DecodeMode::Beam(10)];

    pub fn name(self) -> String {
        match self {
            DecodeMode::Greedy => "greedy".into(),
            DecodeMode::Beam(b) => format!("beam{b}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "greedy" {
            return Ok(DecodeMode::Greedy);
        }
        s.strip_prefix("beam")
            .and_then(|b| b.parse().ok())
            .filter(|&b| b > 0)
            .map(DecodeMode::Beam)
            .ok_or_else(|| Error::config(format!("unknown decode mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecodeOptions {
    pub max_len: usize,
    pub length_norm: bool,
    /// Keep full next-unit distributions of greedy decodes in the records.
    pub keep_distributions: bool,
}

/// Decodes every sample and collapses hypotheses to semantic ids.
pub fn decode_samples(
    model: &S2utModel,
    samples: &[Sample],
    spec: &TaskSpec,
    mode: DecodeMode,
    opts: &DecodeOptions,
) -> Result<Vec<DecodeRecord>> {
    samples
        .iter()
        .map(|s| {
            let scorer = ModelScorer::new(model, s)?;
            let (hyp, dists) = match mode {
                DecodeMode::Greedy => {
                    let t = greedy_decode(&scorer, opts.max_len)?;
                    (t.hypothesis, Some(t.distributions))
                }
                DecodeMode::Beam(b) => (beam_search(&scorer, b, opts.max_len, opts.length_norm)?, None),
            };
            let entropies = match &dists {
                Some(d) => d.iter().map(|p| entropy(p)).collect::<Result<Vec<_>>>()?,
                None => Vec::new(),
            };
            Ok(DecodeRecord {
                id: s.id,
                mode: mode.name(),
                hypothesis: collapse_units(&hyp.tokens, spec)?,
                reference: s.y_text.clone(),
                tokens: hyp.tokens,
                logprob: hyp.logprob,
                finished: hyp.finished,
                frame_labels: hyp.frame_labels,
                entropies,
                distributions: if opts.keep_distributions { dists } else { None },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
