use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens;

/// Which multi-token prediction objective is attached to the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum MtpVariant {
    /// Plain next-token prediction.
    None,
    /// `N` independent output projections on the last decoder layer.
    ParallelLinear,
    /// Chained head decoders fed with teacher-forced token embeddings.
    DeepseekV3,
    /// Chained head decoders without token inputs.
    Vocalnet,
    /// Parallel head decoders reading the CTC layer `H_dec^m`.
    S2ut,
}

impl MtpVariant {
    pub const ALL: [MtpVariant; 5] = [
        MtpVariant::None,
        MtpVariant::ParallelLinear,
        MtpVariant::DeepseekV3,
        MtpVariant::Vocalnet,
        MtpVariant::S2ut,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MtpVariant::None => "none",
            MtpVariant::ParallelLinear => "parallel_linear",
            MtpVariant::DeepseekV3 => "deepseek_v3",
            MtpVariant::Vocalnet => "vocalnet",
            MtpVariant::S2ut => "s2ut",
        }
    }

    /// Variants whose MTP loss replaces the final-layer NTP loss.
    pub fn replaces_ntp(self) -> bool {
        matches!(
            self,
            MtpVariant::ParallelLinear | MtpVariant::DeepseekV3 | MtpVariant::Vocalnet
        )
    }
}

impl fmt::Display for MtpVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MtpVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MtpVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown mtp variant {s:?}")))
    }
}

/// Architecture and objective hyperparameters.
///
/// Layer indices (`ctc_layer`, `aux_enc_taps`) are 1-based: layer `i` is the
/// output of the `i`-th block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub enc_layers: usize,
    pub enc_dim: usize,
    pub dec_layers: usize,
    pub dec_dim: usize,
    pub heads: usize,
    /// Feed-forward inner width as a multiple of the model width.
    pub ff_mult: usize,
    pub unit_vocab: usize,
    pub text_vocab: usize,
    pub mtp_variant: MtpVariant,
    /// Number of future tokens predicted per position (`N`).
    pub mtp_n: usize,
    /// Decoder layer feeding the CTC head and the MTP-S2UT heads (`m`).
    pub ctc_layer: usize,
    pub mtp_head_layers: usize,
    pub aux_enc_taps: Vec<usize>,
    pub aux_dec_layers: usize,
    pub use_conv_block: bool,
    pub positional_encoding: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 16,
            enc_layers: 4,
            enc_dim: 64,
            dec_layers: 4,
            dec_dim: 64,
            heads: 4,
            ff_mult: 2,
            unit_vocab: 40 * 8 + tokens::unit::RESERVED,
            text_vocab: 40 + tokens::text::RESERVED,
            mtp_variant: MtpVariant::None,
            mtp_n: 4,
            ctc_layer: 2,
            mtp_head_layers: 1,
            aux_enc_taps: vec![2, 3],
            aux_dec_layers: 2,
            use_conv_block: true,
            positional_encoding: true,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// The configuration reported for the full-scale system.
    pub fn full_scale() -> Self {
        Self {
            feat_dim: 80,
            enc_layers: 12,
            enc_dim: 256,
            dec_layers: 6,
            dec_dim: 512,
            heads: 4,
            ff_mult: 4,
            mtp_n: 7,
            ctc_layer: 3,
            mtp_head_layers: 3,
            aux_enc_taps: vec![6, 8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return fail("encoder and decoder need at least one layer".into());
        }
        if self.ctc_layer < 1 || self.ctc_layer > self.dec_layers {
            return fail(format!(
                "ctc_layer must satisfy 1 <= m <= L (m={}, L={})",
                self.ctc_layer, self.dec_layers
            ));
        }
        if self.mtp_n == 0 {
            return fail("mtp_n must be at least 1".into());
        }
        if self.heads == 0 || !self.enc_dim.is_multiple_of(self.heads) || !self.dec_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "model widths ({}, {}) must be divisible by heads ({})",
                self.enc_dim, self.dec_dim, self.heads
            ));
        }
        if self.enc_dim < 2 || self.dec_dim < 2 {
            return fail("layer norm needs widths of at least 2".into());
        }
        if self.mtp_head_layers == 0 || self.aux_dec_layers == 0 || self.ff_mult == 0 {
            return fail("head depths and ff_mult must be positive".into());
        }
        if self.unit_vocab <= tokens::unit::RESERVED || self.text_vocab <= tokens::text::RESERVED {
            return fail("vocabularies must extend past the reserved ids".into());
        }
        if self.feat_dim == 0 {
            return fail("feat_dim must be positive".into());
        }
        for &t in &self.aux_enc_taps {
            if t < 1 || t > self.enc_layers {
                return fail(format!("aux tap {t} outside encoder layers 1..={}", self.enc_layers));
            }
        }
        if !(self.ln_eps > 0.0) {
            return fail("ln_eps must be positive".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config always serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn attachment_layer_bounds() {
        let mut c = ModelConfig {
            ctc_layer: 0,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        c.ctc_layer = c.dec_layers + 1;
        assert!(c.validate().is_err());
        c.ctc_layer = c.dec_layers;
        c.validate().unwrap();
    }

    #[test]
    fn heads_must_divide_widths() {
        let c = ModelConfig {
            heads: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip() {
        let c = ModelConfig {
            mtp_variant: MtpVariant::DeepseekV3,
            ..ModelConfig::default()
        };
        assert_eq!(ModelConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(ModelConfig::from_toml("nonsense_key = 3").is_err());
    }
}
