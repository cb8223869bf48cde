use crate::error::{Error, Result};

/// Relative first-occurrence positions of one label sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FirstOccurrence {
    /// `(token, first 1-based frame / frame count)` in order of appearance.
    pub positions: Vec<(usize, f64)>,
    /// Raw frame count used as the denominator.
    pub frames: usize,
}

impl FirstOccurrence {
    pub fn mean(&self) -> f64 {
        self.positions.iter().map(|p| p.1).sum::<f64>() / self.positions.len() as f64
    }
}

/// First occurrence of every distinct non-blank label, relative to the
/// sequence length. `None` when every label is blank.
pub fn first_occurrence_stat(frame_labels: &[usize], blank: usize) -> Option<FirstOccurrence> {
    let frames = frame_labels.len();
    let mut positions: Vec<(usize, f64)> = Vec::new();
    for (i, &l) in frame_labels.iter().enumerate() {
        if l != blank && !positions.iter().any(|p| p.0 == l) {
            positions.push((l, (i + 1) as f64 / frames as f64));
        }
    }
    (!positions.is_empty()).then_some(FirstOccurrence { positions, frames })
}

/// Corpus forward-shift statistic.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftReport {
    /// Mean relative position per non-skipped sample.
    pub per_sample: Vec<f64>,
    /// Mean of `per_sample`.
    pub corpus_mean: f64,
    /// Mean over every first occurrence in the corpus.
    pub pooled_mean: f64,
    pub token_count: usize,
    /// All-blank samples left out.
    pub skipped: usize,
}

impl ShiftReport {
    pub fn new<'a>(label_seqs: impl IntoIterator<Item = &'a [usize]>, blank: usize) -> Result<Self> {
        let mut per_sample = Vec::new();
        let mut pooled = 0.0;
        let mut token_count = 0;
        let mut skipped = 0;
        for labels in label_seqs {
            match first_occurrence_stat(labels, blank) {
                Some(fo) => {
                    per_sample.push(fo.mean());
                    pooled += fo.positions.iter().map(|p| p.1).sum::<f64>();
                    token_count += fo.positions.len();
                }
                None => skipped += 1,
            }
        }
        if per_sample.is_empty() {
            return Err(Error::contract("no sample has a non-blank label"));
        }
        Ok(Self {
            corpus_mean: per_sample.iter().sum::<f64>() / per_sample.len() as f64,
            pooled_mean: pooled / token_count as f64,
            per_sample,
            token_count,
            skipped,
        })
    }

    /// Per-sample-then-corpus mean, or the pooled mean.
    pub fn statistic(&self, pooled: bool) -> f64 {
        if pooled {
            self.pooled_mean
        } else {
            self.corpus_mean
        }
    }
}
