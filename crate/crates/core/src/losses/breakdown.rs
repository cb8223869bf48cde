use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MtpVariant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_ntp: f64,
    pub w_ctc: f64,
    pub w_mtp: f64,
    pub w_aux_src: f64,
    pub w_aux_tgt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_ntp: 1.0,
            w_ctc: 1.6,
            w_mtp: 1.0,
            w_aux_src: 8.0,
            w_aux_tgt: 8.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("w_ntp", self.w_ntp),
            ("w_ctc", self.w_ctc),
            ("w_mtp", self.w_mtp),
            ("w_aux_src", self.w_aux_src),
            ("w_aux_tgt", self.w_aux_tgt),
        ];
        for (name, w) in all {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be a finite non-negative number, got {w}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("weights always serialize")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let w: Self = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        w.validate()?;
        Ok(w)
    }
}

/// Scalar values of every objective at one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Final-layer NTP; for variants whose MTP loss replaces NTP this is the
    /// `k = 0` term.
    pub ntp: f64,
    pub mtp_terms: Vec<f64>,
    pub ctc: f64,
    pub aux_src: f64,
    pub aux_tgt: f64,
    pub total: f64,
    /// Samples whose CTC alignment was infeasible and skipped.
    pub ctc_skipped: usize,
}

impl LossBreakdown {
    /// Weighted sum of the components, in the same order the graph adds them.
    pub fn weighted_total(&self, w: &LossWeights, variant: MtpVariant) -> f64 {
        let mtp_sum = self.mtp_terms.iter().copied().reduce(|a, b| a + b).unwrap_or(0.0);
        let mut parts = Vec::new();
        if variant.replaces_ntp() {
            parts.push(w.w_mtp * mtp_sum);
        } else {
            if w.w_ntp > 0.0 {
                parts.push(w.w_ntp * self.ntp);
            }
            if variant != MtpVariant::None && w.w_mtp > 0.0 {
                parts.push(w.w_mtp * mtp_sum);
            }
        }
        for (weight, v) in [
            (w.w_ctc, self.ctc),
            (w.w_aux_src, self.aux_src),
            (w.w_aux_tgt, self.aux_tgt),
        ] {
            if weight > 0.0 {
                parts.push(weight * v);
            }
        }
        parts.into_iter().reduce(|a, b| a + b).unwrap_or(0.0)
    }

    pub fn csv_header(n_terms: usize) -> Vec<String> {
        let mut h = vec!["step".to_string(), "ntp".to_string()];
        h.extend((0..n_terms).map(|k| format!("mtp_k{k}")));
        h.extend(["ctc", "aux_src", "aux_tgt", "total"].map(String::from));
        h
    }

    pub fn csv_record(&self, step: usize) -> Vec<String> {
        let mut r = vec![step.to_string(), fmt(self.ntp)];
        r.extend(self.mtp_terms.iter().map(|&v| fmt(v)));
        r.extend([self.ctc, self.aux_src, self.aux_tgt, self.total].map(fmt));
        r
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.9}")
}

/// Streams loss rows as CSV.
pub struct LossLog<W: Write> {
    writer: csv::Writer<W>,
    n_terms: usize,
}

impl<W: Write> LossLog<W> {
    pub fn new(inner: W, n_terms: usize) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(inner);
        writer.write_record(LossBreakdown::csv_header(n_terms))?;
        Ok(Self { writer, n_terms })
    }

    /// Continues a log whose header is already written.
    pub fn without_header(inner: W, n_terms: usize) -> Self {
        Self {
            writer: csv::Writer::from_writer(inner),
            n_terms,
        }
    }

    pub fn append(&mut self, step: usize, b: &LossBreakdown) -> Result<()> {
        if b.mtp_terms.len() != self.n_terms {
            return Err(Error::contract(
                "loss row has a different number of mtp terms than the header",
            ));
        }
        self.writer.write_record(b.csv_record(step))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}
