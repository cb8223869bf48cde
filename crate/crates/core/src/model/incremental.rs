//! Cached one-token-at-a-time decoding over the inference path
//! (embedding, decoder layers, output head, CTC head).

use super::layers::{self, KeyValues};
use super::S2utModel;
use crate::autodiff::{Graph, Segment, Tensor};
use crate::error::{Error, Result};

/// Cross-attention keys and values for one encoded source, per decoder layer.
#[derive(Clone, Debug)]
pub struct EncodedMemory {
    cross_k: Vec<Tensor>,
    cross_v: Vec<Tensor>,
    src_len: usize,
}

/// Self-attention cache of one hypothesis.
#[derive(Clone, Debug, Default)]
pub struct DecoderState {
    len: usize,
    self_k: Vec<Vec<f64>>,
    self_v: Vec<Vec<f64>>,
}

impl DecoderState {
    /// Number of decoder inputs consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Per-hypothesis results of one decoding step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Log-probabilities over the unit vocabulary.
    pub log_probs: Vec<Vec<f64>>,
    /// Argmax of the CTC head on `H_dec^m` at the new position.
    pub ctc_labels: Vec<usize>,
}

impl S2utModel {
    pub fn encode_memory(&self, feats: &Tensor) -> Result<EncodedMemory> {
        let mut g = Graph::inference(self.params());
        let src_len = feats.rows();
        let segs = [Segment::new(0, src_len)];
        let x = g.constant(feats.clone());
        let enc = self.encode(&mut g, x, &segs)?;
        let mut cross_k = Vec::with_capacity(self.p.dec_layers.len());
        let mut cross_v = Vec::with_capacity(self.p.dec_layers.len());
        for layer in &self.p.dec_layers {
            let kv = layers::project_kv(&mut g, &layer.cross_attn, enc.h_enc)?;
            cross_k.push(g.value(kv.k).clone());
            cross_v.push(g.value(kv.v).clone());
        }
        Ok(EncodedMemory {
            cross_k,
            cross_v,
            src_len,
        })
    }

    pub fn new_decoder_state(&self) -> DecoderState {
        let l = self.p.dec_layers.len();
        DecoderState {
            len: 0,
            self_k: vec![Vec::new(); l],
            self_v: vec![Vec::new(); l],
        }
    }

    /// Feeds `tokens[i]` to hypothesis `states[i]` and returns the next-token
    /// distributions. All hypotheses share `memory`.
    pub fn step(&self, memory: &EncodedMemory, states: &mut [DecoderState], tokens: &[usize]) -> Result<StepOutput> {
        if states.len() != tokens.len() || states.is_empty() {
            return Err(Error::contract("step needs one token per hypothesis"));
        }
        let cfg = self.config();
        let (d, eps, heads) = (cfg.dec_dim, cfg.ln_eps, cfg.heads);
        let n = states.len();
        let mut g = Graph::inference(self.params());
        let table = g.param(self.p.unit_embedding);
        let mut x = g.embedding(table, tokens)?;
        if cfg.positional_encoding {
            let mut pe = Tensor::zeros(&[n, d]);
            for (i, st) in states.iter().enumerate() {
                layers::write_position(&mut pe.data_mut()[i * d..(i + 1) * d], st.len);
            }
            let pe = g.constant(pe);
            x = g.add(x, pe)?;
        }
        let q_segs: Vec<Segment> = (0..n).map(|i| Segment::new(i, 1)).collect();
        let mem_segs = vec![Segment::new(0, memory.src_len); n];
        let mut ctc_labels = Vec::new();
        for (l, layer) in self.p.dec_layers.iter().enumerate() {
            let h = layers::layer_norm(&mut g, &layer.ln_self, x, eps)?;
            let kv = layers::project_kv(&mut g, &layer.self_attn, h)?;
            let mut k_all = Vec::new();
            let mut v_all = Vec::new();
            let mut k_segs = Vec::with_capacity(n);
            for (i, st) in states.iter_mut().enumerate() {
                st.self_k[l].extend_from_slice(g.value(kv.k).row(i));
                st.self_v[l].extend_from_slice(g.value(kv.v).row(i));
                k_segs.push(Segment::new(k_all.len() / d, st.len + 1));
                k_all.extend_from_slice(&st.self_k[l]);
                v_all.extend_from_slice(&st.self_v[l]);
            }
            let rows = k_all.len() / d;
            let cached = KeyValues {
                k: g.constant(Tensor::from_parts(vec![rows, d], k_all)),
                v: g.constant(Tensor::from_parts(vec![rows, d], v_all)),
            };
            let a = layers::attend(&mut g, &layer.self_attn, h, cached, &q_segs, &k_segs, heads, false)?;
            x = g.add(x, a)?;
            let h = layers::layer_norm(&mut g, &layer.ln_cross, x, eps)?;
            let cross = KeyValues {
                k: g.constant(memory.cross_k[l].clone()),
                v: g.constant(memory.cross_v[l].clone()),
            };
            let c = layers::attend(&mut g, &layer.cross_attn, h, cross, &q_segs, &mem_segs, heads, false)?;
            x = g.add(x, c)?;
            let h = layers::layer_norm(&mut g, &layer.ln_ff, x, eps)?;
            let f = layers::feed_forward(&mut g, &layer.ff, h)?;
            x = g.add(x, f)?;
            if l + 1 == cfg.ctc_layer {
                let lp = self.ctc_log_probs(&mut g, x)?;
                let t = g.value(lp);
                ctc_labels = (0..n).map(|i| argmax(t.row(i))).collect();
            }
        }
        for st in states.iter_mut() {
            st.len += 1;
        }
        let lp = self.unit_log_probs(&mut g, x)?;
        let t = g.value(lp);
        Ok(StepOutput {
            log_probs: (0..n).map(|i| t.row(i).to_vec()).collect(),
            ctc_labels,
        })
    }
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
