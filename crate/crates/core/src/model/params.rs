//! Parameter layout of the model. Every weight is registered by name in a
//! [`ParamStore`]; the structs here only hold ids.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, MtpVariant};
use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::error::Result;

#[derive(Clone, Debug)]
pub(crate) struct LinearP {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNormP {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct AttentionP {
    pub q: LinearP,
    pub k: LinearP,
    pub v: LinearP,
    pub o: LinearP,
}

#[derive(Clone, Debug)]
pub(crate) struct FeedForwardP {
    pub up: LinearP,
    pub down: LinearP,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvBlockP {
    pub ln: LayerNormP,
    pub depthwise_w: ParamId,
    pub depthwise_b: ParamId,
    pub pointwise: LinearP,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderLayerP {
    pub ln_attn: LayerNormP,
    pub attn: AttentionP,
    pub conv: Option<ConvBlockP>,
    pub ln_ff: LayerNormP,
    pub ff: FeedForwardP,
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderLayerP {
    pub ln_self: LayerNormP,
    pub self_attn: AttentionP,
    pub ln_cross: LayerNormP,
    pub cross_attn: AttentionP,
    pub ln_ff: LayerNormP,
    pub ff: FeedForwardP,
}

/// Final normalization plus vocabulary projection.
#[derive(Clone, Debug)]
pub(crate) struct OutputHeadP {
    pub ln: LayerNormP,
    pub proj: LinearP,
}

#[derive(Clone, Debug)]
pub(crate) struct AuxDecoderP {
    pub tap: usize,
    pub embedding: ParamId,
    pub memory_ln: LayerNormP,
    pub layers: Vec<DecoderLayerP>,
    pub out: OutputHeadP,
}

#[derive(Clone, Debug)]
pub(crate) struct FusionP {
    pub ln_state: LayerNormP,
    pub ln_embed: LayerNormP,
    pub proj: LinearP,
}

#[derive(Clone, Debug)]
pub(crate) struct MtpP {
    /// Head decoder stacks. For the chained variants index `k - 1` produces
    /// `H_out^k`; for `s2ut` index `k` produces `H_out^k`.
    pub decoders: Vec<Vec<DecoderLayerP>>,
    /// Extra output heads `W^1 … W^{N-1}` of the parallel-linear variant.
    pub linear_heads: Vec<OutputHeadP>,
    /// Fusion projections `W_in^k` of the DeepSeek-V3 variant.
    pub fusions: Vec<FusionP>,
}

#[derive(Clone, Debug)]
pub(crate) struct ModelParams {
    pub in_proj: LinearP,
    pub enc_layers: Vec<EncoderLayerP>,
    pub enc_final_ln: LayerNormP,
    pub unit_embedding: ParamId,
    pub dec_layers: Vec<DecoderLayerP>,
    pub out: OutputHeadP,
    pub ctc_head: LinearP,
    pub aux: Vec<AuxDecoderP>,
    pub mtp: Option<MtpP>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, value))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<LinearP> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(format!("{name}.w"), &[fan_in, fan_out], bound)?;
        let b = if bias {
            Some(self.constant(format!("{name}.b"), &[fan_out], 0.0)?)
        } else {
            None
        };
        Ok(LinearP { w, b })
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> Result<LayerNormP> {
        Ok(LayerNormP {
            gain: self.constant(format!("{name}.gain"), &[d], 1.0)?,
            bias: self.constant(format!("{name}.bias"), &[d], 0.0)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize, kv_dim: usize) -> Result<AttentionP> {
        Ok(AttentionP {
            q: self.linear(&format!("{name}.q"), d, d, true)?,
            k: self.linear(&format!("{name}.k"), kv_dim, d, true)?,
            v: self.linear(&format!("{name}.v"), kv_dim, d, true)?,
            o: self.linear(&format!("{name}.o"), d, d, true)?,
        })
    }

    fn feed_forward(&mut self, name: &str, d: usize, mult: usize) -> Result<FeedForwardP> {
        Ok(FeedForwardP {
            up: self.linear(&format!("{name}.up"), d, d * mult, true)?,
            down: self.linear(&format!("{name}.down"), d * mult, d, true)?,
        })
    }

    fn decoder_layer(&mut self, name: &str, d: usize, mem_dim: usize, mult: usize) -> Result<DecoderLayerP> {
        Ok(DecoderLayerP {
            ln_self: self.layer_norm(&format!("{name}.ln_self"), d)?,
            self_attn: self.attention(&format!("{name}.self_attn"), d, d)?,
            ln_cross: self.layer_norm(&format!("{name}.ln_cross"), d)?,
            cross_attn: self.attention(&format!("{name}.cross_attn"), d, mem_dim)?,
            ln_ff: self.layer_norm(&format!("{name}.ln_ff"), d)?,
            ff: self.feed_forward(&format!("{name}.ff"), d, mult)?,
        })
    }

    fn output_head(&mut self, name: &str, d: usize, vocab: usize) -> Result<OutputHeadP> {
        Ok(OutputHeadP {
            ln: self.layer_norm(&format!("{name}.ln"), d)?,
            proj: self.linear(&format!("{name}.proj"), d, vocab, true)?,
        })
    }
}

impl ModelParams {
    /// Registers every parameter for `cfg` in a fixed order.
    pub fn build(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut b = Builder { store, rng };
        let (ed, dd, mult) = (cfg.enc_dim, cfg.dec_dim, cfg.ff_mult);

        let in_proj = b.linear("enc.in_proj", cfg.feat_dim, ed, true)?;
        let mut enc_layers = Vec::with_capacity(cfg.enc_layers);
        for i in 0..cfg.enc_layers {
            let n = format!("enc.layer{i}");
            let conv = if cfg.use_conv_block {
                Some(ConvBlockP {
                    ln: b.layer_norm(&format!("{n}.conv.ln"), ed)?,
                    depthwise_w: b.uniform(format!("{n}.conv.depthwise_w"), &[3, ed], 1.0 / 3f64.sqrt())?,
                    depthwise_b: b.constant(format!("{n}.conv.depthwise_b"), &[ed], 0.0)?,
                    pointwise: b.linear(&format!("{n}.conv.pointwise"), ed, ed, true)?,
                })
            } else {
                None
            };
            enc_layers.push(EncoderLayerP {
                ln_attn: b.layer_norm(&format!("{n}.ln_attn"), ed)?,
                attn: b.attention(&format!("{n}.attn"), ed, ed)?,
                conv,
                ln_ff: b.layer_norm(&format!("{n}.ln_ff"), ed)?,
                ff: b.feed_forward(&format!("{n}.ff"), ed, mult)?,
            });
        }
        let enc_final_ln = b.layer_norm("enc.final_ln", ed)?;

        let unit_embedding = b.uniform("dec.unit_embedding".into(), &[cfg.unit_vocab, dd], 1.0)?;
        let mut dec_layers = Vec::with_capacity(cfg.dec_layers);
        for i in 0..cfg.dec_layers {
            dec_layers.push(b.decoder_layer(&format!("dec.layer{i}"), dd, ed, mult)?);
        }
        let out = b.output_head("dec.out", dd, cfg.unit_vocab)?;
        let ctc_head = b.linear("ctc.proj", dd, cfg.text_vocab, true)?;

        let mut aux = Vec::with_capacity(cfg.aux_enc_taps.len());
        for (j, &tap) in cfg.aux_enc_taps.iter().enumerate() {
            let n = format!("aux{j}");
            let embedding = b.uniform(format!("{n}.embedding"), &[cfg.text_vocab, ed], 1.0)?;
            let memory_ln = b.layer_norm(&format!("{n}.memory_ln"), ed)?;
            let layers = (0..cfg.aux_dec_layers)
                .map(|i| b.decoder_layer(&format!("{n}.layer{i}"), ed, ed, mult))
                .collect::<Result<Vec<_>>>()?;
            let out = b.output_head(&format!("{n}.out"), ed, cfg.text_vocab)?;
            aux.push(AuxDecoderP {
                tap,
                embedding,
                memory_ln,
                layers,
                out,
            });
        }

        let n = cfg.mtp_n;
        let head_stack = |b: &mut Builder<'_>, k: usize| -> Result<Vec<DecoderLayerP>> {
            (0..cfg.mtp_head_layers)
                .map(|i| b.decoder_layer(&format!("mtp.head{k}.layer{i}"), dd, ed, mult))
                .collect()
        };
        let mtp = match cfg.mtp_variant {
            MtpVariant::None => None,
            MtpVariant::ParallelLinear => Some(MtpP {
                decoders: Vec::new(),
                linear_heads: (1..n)
                    .map(|k| b.output_head(&format!("mtp.head{k}.out"), dd, cfg.unit_vocab))
                    .collect::<Result<_>>()?,
                fusions: Vec::new(),
            }),
            MtpVariant::DeepseekV3 => {
                let mut decoders = Vec::new();
                let mut fusions = Vec::new();
                for k in 1..n {
                    fusions.push(FusionP {
                        ln_state: b.layer_norm(&format!("mtp.head{k}.fuse.ln_state"), dd)?,
                        ln_embed: b.layer_norm(&format!("mtp.head{k}.fuse.ln_embed"), dd)?,
                        proj: b.linear(&format!("mtp.head{k}.fuse.proj"), 2 * dd, dd, false)?,
                    });
                    decoders.push(head_stack(&mut b, k)?);
                }
                Some(MtpP {
                    decoders,
                    linear_heads: Vec::new(),
                    fusions,
                })
            }
            MtpVariant::Vocalnet => Some(MtpP {
                decoders: (1..n).map(|k| head_stack(&mut b, k)).collect::<Result<_>>()?,
                linear_heads: Vec::new(),
                fusions: Vec::new(),
            }),
            MtpVariant::S2ut => Some(MtpP {
                decoders: (0..n).map(|k| head_stack(&mut b, k)).collect::<Result<_>>()?,
                linear_heads: Vec::new(),
                fusions: Vec::new(),
            }),
        };

        Ok(Self {
            in_proj,
            enc_layers,
            enc_final_ln,
            unit_embedding,
            dec_layers,
            out,
            ctc_head,
            aux,
            mtp,
        })
    }
}
