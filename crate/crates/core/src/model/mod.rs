//! Encoder–decoder unit translation model with exposed intermediate decoder
//! states, a CTC head on decoder layer `m`, auxiliary text decoders on
//! encoder taps, and optional multi-token prediction heads.

mod batch;
pub mod checkpoint;
mod config;
pub(crate) mod incremental;
pub(crate) mod layers;
pub(crate) mod params;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use batch::Batch;
pub use config::{ModelConfig, MtpVariant};
pub use incremental::{DecoderState, EncodedMemory, StepOutput};

use self::layers::Memory;
use self::params::ModelParams;
use crate::autodiff::{Graph, ParamStore, Segment, Var};
use crate::error::{Error, Result};
use crate::tokens;

/// Encoder states for a batch: the final output `H_enc` plus the residual
/// stream after every tapped layer.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub h_enc: Var,
    pub taps: BTreeMap<usize, Var>,
    pub segs: Vec<Segment>,
}

impl EncoderOutput {
    pub(crate) fn memory(&self) -> Memory<'_> {
        Memory {
            states: self.h_enc,
            segs: &self.segs,
        }
    }
}

/// Decoder states `H_dec^0 … H_dec^L`.
#[derive(Clone, Debug)]
pub struct DecoderTrace {
    pub states: Vec<Var>,
    pub segs: Vec<Segment>,
}

impl DecoderTrace {
    pub fn last(&self) -> Var {
        *self.states.last().expect("trace always holds the embedding state")
    }

    /// `H_dec^i`; index 0 is the embedding layer.
    pub fn layer(&self, i: usize) -> Var {
        self.states[i]
    }
}

#[derive(Clone, Debug)]
pub struct S2utModel {
    cfg: ModelConfig,
    store: ParamStore,
    pub(crate) p: ModelParams,
}

impl S2utModel {
    /// Freshly initialized model; shared parameters are drawn in the same
    /// order for every variant, so equal seeds give equal baseline weights.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ModelParams::build(&cfg, &mut store, &mut rng)?;
        Ok(Self { cfg, store, p })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_params(cfg: ModelConfig, store: ParamStore) -> Result<Self> {
        let template = Self::new(cfg, 0)?;
        if template.store.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                template.store.len(),
                store.len()
            )));
        }
        for id in template.store.ids() {
            let name = template.store.name(id);
            let other = store
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if other != id || store.tensor(other).shape() != template.store.tensor(id).shape() {
                return Err(Error::Checkpoint(format!("parameter {name} has unexpected layout")));
            }
        }
        Ok(Self {
            cfg: template.cfg,
            store,
            p: template.p,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Parameter names used by decoding; MTP parameters are never among them.
    pub fn is_inference_param(name: &str) -> bool {
        !name.starts_with("mtp.") && !name.starts_with("aux")
    }

    /// Runs the encoder over featurized source frames (`Σ len × feat_dim`).
    pub fn encode(&self, g: &mut Graph<'_>, feats: Var, segs: &[Segment]) -> Result<EncoderOutput> {
        let rows: usize = segs.iter().map(|s| s.len).sum();
        if segs.iter().any(|s| s.len == 0) {
            return Err(Error::contract("source sequences must be non-empty"));
        }
        if g.value(feats).rows() != rows {
            return Err(Error::Dimension {
                op: "encode",
                lhs: g.shape(feats).to_vec(),
                rhs: vec![rows, self.cfg.feat_dim],
            });
        }
        let eps = self.cfg.ln_eps;
        let mut x = layers::linear(g, &self.p.in_proj, feats)?;
        if self.cfg.positional_encoding {
            let pe = g.constant(layers::positional_table(segs, self.cfg.enc_dim));
            x = g.add(x, pe)?;
        }
        let mut taps = BTreeMap::new();
        for (i, layer) in self.p.enc_layers.iter().enumerate() {
            x = layers::encoder_layer(g, layer, x, segs, self.cfg.heads, eps)?;
            if self.cfg.aux_enc_taps.contains(&(i + 1)) {
                taps.insert(i + 1, x);
            }
        }
        let h_enc = layers::layer_norm(g, &self.p.enc_final_ln, x, eps)?;
        Ok(EncoderOutput {
            h_enc,
            taps,
            segs: segs.to_vec(),
        })
    }

    /// `H_dec^0 = Emb(U^{+1})` (plus positions) followed by every decoder layer.
    pub fn decode_trace(
        &self,
        g: &mut Graph<'_>,
        enc: &EncoderOutput,
        shifted_units: &[usize],
        segs: &[Segment],
    ) -> Result<DecoderTrace> {
        if segs.len() != enc.segs.len() {
            return Err(Error::contract("decoder and encoder batch sizes differ"));
        }
        for s in segs {
            if s.len == 0 {
                return Err(Error::contract("decoder input must be non-empty"));
            }
            if shifted_units.get(s.offset) != Some(&tokens::unit::BOS) {
                return Err(Error::contract("decoder input must begin with bos"));
            }
        }
        let eps = self.cfg.ln_eps;
        let table = g.param(self.p.unit_embedding);
        let mut x = g.embedding(table, shifted_units)?;
        if self.cfg.positional_encoding {
            let pe = g.constant(layers::positional_table(segs, self.cfg.dec_dim));
            x = g.add(x, pe)?;
        }
        let mut states = vec![x];
        for layer in &self.p.dec_layers {
            x = layers::decoder_layer(g, layer, x, segs, enc.memory(), self.cfg.heads, eps)?;
            states.push(x);
        }
        Ok(DecoderTrace {
            states,
            segs: segs.to_vec(),
        })
    }

    /// Shared output projection `W_out` (with its normalization), as logits.
    pub fn output_logits(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        layers::output_logits(g, &self.p.out, h, self.cfg.ln_eps)
    }

    pub fn unit_log_probs(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        layers::output_log_probs(g, &self.p.out, h, self.cfg.ln_eps)
    }

    /// Frame log-probabilities of the CTC head over the text vocabulary.
    pub fn ctc_log_probs(&self, g: &mut Graph<'_>, h_mid: Var) -> Result<Var> {
        let logits = layers::linear(g, &self.p.ctc_head, h_mid)?;
        Ok(g.log_softmax_rows(logits))
    }

    /// Log-probabilities from sibling head `k` alone, for the variants whose
    /// heads do not chain (parallel-linear and S2UT).
    pub fn sibling_head_log_probs(
        &self,
        g: &mut Graph<'_>,
        enc: &EncoderOutput,
        trace: &DecoderTrace,
        k: usize,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let mtp = self
            .p
            .mtp
            .as_ref()
            .filter(|_| k < cfg.mtp_n)
            .ok_or_else(|| Error::config(format!("model has no head {k}")))?;
        match cfg.mtp_variant {
            MtpVariant::ParallelLinear => {
                let head = if k == 0 { &self.p.out } else { &mtp.linear_heads[k - 1] };
                layers::output_log_probs(g, head, trace.last(), cfg.ln_eps)
            }
            MtpVariant::S2ut => {
                let h = layers::decoder_stack(
                    g,
                    &mtp.decoders[k],
                    trace.layer(cfg.ctc_layer),
                    &trace.segs,
                    enc.memory(),
                    cfg.heads,
                    cfg.ln_eps,
                )?;
                self.unit_log_probs(g, h)
            }
            v => Err(Error::config(format!("{v} heads are chained"))),
        }
    }
}
