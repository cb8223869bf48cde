use crate::error::{Error, Result};

pub const ENTROPY_BINS: usize = 50;

/// `-Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(dist: &[f64]) -> Result<f64> {
    if dist.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::contract("distribution has negative or non-finite entries"));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!("distribution sums to {total}, not 1")));
    }
    Ok(-dist.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
}

/// Normalized histogram of entropies over 50 uniform bins on `[0, max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub frequencies: Vec<f64>,
    pub n_tokens: u64,
}

impl EntropyHistogram {
    /// `max` is normally `ln |unit vocab|`; values above it land in the last bin.
    pub fn new(entropies: &[f64], max: f64) -> Result<Self> {
        if entropies.is_empty() {
            return Err(Error::contract("entropy histogram needs at least one value"));
        }
        if !(max > 0.0) {
            return Err(Error::contract("histogram range must be positive"));
        }
        let bin_edges = (0..=ENTROPY_BINS)
            .map(|i| max * i as f64 / ENTROPY_BINS as f64)
            .collect();
        let mut counts = vec![0u64; ENTROPY_BINS];
        for &e in entropies {
            let b = ((e / max) * ENTROPY_BINS as f64).floor().max(0.0) as usize;
            counts[b.min(ENTROPY_BINS - 1)] += 1;
        }
        let n = entropies.len() as u64;
        let frequencies = counts.iter().map(|&c| c as f64 / n as f64).collect();
        Ok(Self {
            bin_edges,
            counts,
            frequencies,
            n_tokens: n,
        })
    }

    /// Index of the bin where the cumulative frequency first reaches one half.
    pub fn median_bin(&self) -> usize {
        let mut acc = 0.0;
        for (i, f) in self.frequencies.iter().enumerate() {
            acc += f;
            if acc >= 0.5 {
                return i;
            }
        }
        ENTROPY_BINS - 1
    }
}

/// Variant frequencies minus baseline frequencies per bin.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyDelta {
    pub variant: EntropyHistogram,
    pub baseline: EntropyHistogram,
    pub delta: Vec<f64>,
}

impl EntropyDelta {
    /// Summed delta over bins lying entirely below `median`, and over the rest.
    pub fn mass_split(&self, median: f64) -> (f64, f64) {
        let mut below = 0.0;
        let mut above = 0.0;
        for (i, d) in self.delta.iter().enumerate() {
            if self.baseline.bin_edges[i + 1] <= median {
                below += d;
            } else {
                above += d;
            }
        }
        (below, above)
    }
}

pub fn entropy_delta_from_values(variant: &[f64], baseline: &[f64], max: f64) -> Result<EntropyDelta> {
    let variant = EntropyHistogram::new(variant, max)?;
    let baseline = EntropyHistogram::new(baseline, max)?;
    let delta = variant
        .frequencies
        .iter()
        .zip(&baseline.frequencies)
        .map(|(v, b)| v - b)
        .collect();
    Ok(EntropyDelta {
        variant,
        baseline,
        delta,
    })
}

/// Bins the entropies of both sets of predicted distributions over
/// `[0, ln V]` and subtracts the baseline frequencies.
pub fn entropy_delta_histogram(variant_dists: &[Vec<f64>], baseline_dists: &[Vec<f64>]) -> Result<EntropyDelta> {
    let vocab = variant_dists.first().or(baseline_dists.first()).map_or(0, Vec::len);
    if vocab < 2 {
        return Err(Error::contract("need distributions over at least two outcomes"));
    }
    let ent = |d: &[Vec<f64>]| d.iter().map(|p| entropy(p)).collect::<Result<Vec<_>>>();
    entropy_delta_from_values(&ent(variant_dists)?, &ent(baseline_dists)?, (vocab as f64).ln())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}
