use crate::autodiff::{Segment, Tensor};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::right_shift;

/// Samples packed back to back along the row axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub src_feats: Tensor,
    pub src_segs: Vec<Segment>,
    /// Target units `U` (eos-terminated, optionally pad-suffixed) per sample, concatenated.
    pub units: Vec<usize>,
    pub tgt_segs: Vec<Segment>,
    pub x_text: Vec<Vec<usize>>,
    pub y_text: Vec<Vec<usize>>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("batch needs at least one sample"));
        }
        let feat_dim = samples[0].src_feats.first().map_or(0, Vec::len);
        let mut feats = Vec::new();
        let mut units = Vec::new();
        let mut src_lens = Vec::with_capacity(samples.len());
        let mut tgt_lens = Vec::with_capacity(samples.len());
        for s in samples {
            for row in &s.src_feats {
                if row.len() != feat_dim {
                    return Err(Error::Data(format!("sample {} has ragged features", s.id)));
                }
                feats.extend_from_slice(row);
            }
            src_lens.push(s.src_feats.len());
            units.extend_from_slice(&s.units);
            tgt_lens.push(s.units.len());
        }
        let rows = feats.len() / feat_dim.max(1);
        Ok(Self {
            src_feats: Tensor::new(vec![rows, feat_dim], feats)?,
            src_segs: Segment::pack(&src_lens),
            units,
            tgt_segs: Segment::pack(&tgt_lens),
            x_text: samples.iter().map(|s| s.x_text.clone()).collect(),
            y_text: samples.iter().map(|s| s.y_text.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.tgt_segs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tgt_segs.is_empty()
    }

    /// `U^{+1}` for every sample.
    pub fn decoder_inputs(&self) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.units.len());
        for s in &self.tgt_segs {
            out.extend(right_shift(&self.units[s.offset..s.end()])?);
        }
        Ok(out)
    }

    pub fn target(&self, i: usize) -> &[usize] {
        let s = self.tgt_segs[i];
        &self.units[s.offset..s.end()]
    }
}
