//! Training objectives: NTP, the multi-token prediction variants, CTC on the
//! intermediate decoder layer, auxiliary text decoders, and their weighted sum.

mod breakdown;
mod mtp;
mod shift;

pub use breakdown::{LossBreakdown, LossLog, LossWeights};
pub use mtp::{
    mtp_deepseek_v3_loss, mtp_loss, mtp_parallel_linear_loss, mtp_s2ut_loss, mtp_vocalnet_loss, shifted_nll, MtpOutput,
    MtpProbe,
};
pub use shift::{left_shift, left_shift_packed, right_shift};

use crate::autodiff::{CtcStats, CtcTarget, Graph, Segment, Var};
use crate::error::{Error, Result};
use crate::model::{layers, Batch, DecoderTrace, EncoderOutput, MtpVariant, S2utModel};
use crate::tokens::{text, unit};

/// `-log P(U | H_dec^L)` through the shared output head, averaged over
/// unmasked positions of the batch.
pub fn ntp_loss(g: &mut Graph<'_>, model: &S2utModel, trace: &DecoderTrace, units: &[usize]) -> Result<Var> {
    let rows = g.value(trace.last()).rows();
    if rows != units.len() {
        return Err(Error::contract(format!(
            "decoder produced {rows} positions for {} targets",
            units.len()
        )));
    }
    let logp = model.unit_log_probs(g, trace.last())?;
    shifted_nll(g, logp, units, &trace.segs, 0)
}

/// CTC of the target text against the head on `H_dec^m`. Frames are the
/// non-pad target positions of each sample.
pub fn ctc_loss(
    g: &mut Graph<'_>,
    model: &S2utModel,
    trace: &DecoderTrace,
    units: &[usize],
    y_text: &[Vec<usize>],
) -> Result<(Var, CtcStats)> {
    let m = model.config().ctc_layer;
    let h_mid = *trace
        .states
        .get(m)
        .ok_or_else(|| Error::config(format!("ctc layer {m} outside decoder trace")))?;
    if y_text.len() != trace.segs.len() {
        return Err(Error::contract("one target text per sample required"));
    }
    let logp = model.ctc_log_probs(g, h_mid)?;
    let targets = trace
        .segs
        .iter()
        .zip(y_text)
        .map(|(s, y)| {
            let frames = units[s.offset..s.end()].iter().filter(|&&u| u != unit::PAD).count();
            CtcTarget {
                frames: Segment::new(s.offset, frames),
                labels: y.iter().map(|&t| text::from_semantic(t)).collect(),
            }
        })
        .collect::<Vec<_>>();
    g.ctc(logp, &targets, text::BLANK)
}

/// NTP loss of the auxiliary text decoder attached to encoder layer `tap`.
/// Inputs are `(bos, t…)`, targets `(t…, eos)`, over semantic ids `texts`.
pub fn aux_text_loss(
    g: &mut Graph<'_>,
    model: &S2utModel,
    enc: &EncoderOutput,
    tap: usize,
    texts: &[Vec<usize>],
) -> Result<Var> {
    let p = model
        .p
        .aux
        .iter()
        .find(|a| a.tap == tap)
        .ok_or_else(|| Error::config(format!("no auxiliary decoder on encoder layer {tap}")))?;
    let state = *enc
        .taps
        .get(&tap)
        .ok_or_else(|| Error::config(format!("encoder tap {tap} was not recorded")))?;
    if texts.len() != enc.segs.len() {
        return Err(Error::contract("one text per sample required"));
    }
    let cfg = model.config();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut lens = Vec::with_capacity(texts.len());
    for t in texts {
        inputs.push(text::BOS);
        for &s in t {
            inputs.push(text::from_semantic(s));
            targets.push(text::from_semantic(s));
        }
        targets.push(text::EOS);
        lens.push(t.len() + 1);
    }
    let segs = Segment::pack(&lens);
    let mask: Vec<bool> = targets.iter().map(|&t| t != text::PAD).collect();
    let memory_states = layers::layer_norm(g, &p.memory_ln, state, cfg.ln_eps)?;
    let memory = layers::Memory {
        states: memory_states,
        segs: &enc.segs,
    };
    let table = g.param(p.embedding);
    let mut x = g.embedding(table, &inputs)?;
    if cfg.positional_encoding {
        let pe = g.constant(layers::positional_table(&segs, cfg.enc_dim));
        x = g.add(x, pe)?;
    }
    let h = layers::decoder_stack(g, &p.layers, x, &segs, memory, cfg.heads, cfg.ln_eps)?;
    let logp = layers::output_log_probs(g, &p.out, h, cfg.ln_eps)?;
    g.nll(logp, &targets, &mask)
}

/// Graph handles of every computed objective.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ntp: Option<Var>,
    pub mtp: Option<MtpOutput>,
    pub ctc: Option<Var>,
    pub aux_src: Option<Var>,
    pub aux_tgt: Option<Var>,
    pub enc: EncoderOutput,
    pub trace: DecoderTrace,
}

/// Forward pass plus every active objective. Terms whose weight is zero are
/// not computed and report 0.
pub fn compute_losses(
    g: &mut Graph<'_>,
    model: &S2utModel,
    batch: &Batch,
    w: &LossWeights,
) -> Result<(LossVars, LossBreakdown)> {
    w.validate()?;
    let cfg = model.config();
    let variant = cfg.mtp_variant;
    let feats = g.constant(batch.src_feats.clone());
    let enc = model.encode(g, feats, &batch.src_segs)?;
    let dec_in = batch.decoder_inputs()?;
    let trace = model.decode_trace(g, &enc, &dec_in, &batch.tgt_segs)?;

    let mut parts: Vec<(f64, Var)> = Vec::new();
    let mtp = if variant == MtpVariant::None || w.w_mtp == 0.0 && !variant.replaces_ntp() {
        None
    } else {
        Some(mtp_loss(g, model, &enc, &trace, &batch.units, &MtpProbe::default())?)
    };
    let ntp = match (&mtp, variant.replaces_ntp()) {
        (Some(out), true) => Some(out.terms[0]),
        _ if w.w_ntp > 0.0 => Some(ntp_loss(g, model, &trace, &batch.units)?),
        _ => None,
    };
    if variant.replaces_ntp() {
        parts.push((w.w_mtp, mtp.as_ref().expect("computed above").total));
    } else {
        if let Some(v) = ntp {
            parts.push((w.w_ntp, v));
        }
        if let Some(out) = &mtp {
            parts.push((w.w_mtp, out.total));
        }
    }
    let mut ctc_stats = CtcStats::default();
    let ctc = if w.w_ctc > 0.0 {
        let (v, stats) = ctc_loss(g, model, &trace, &batch.units, &batch.y_text)?;
        ctc_stats = stats;
        parts.push((w.w_ctc, v));
        Some(v)
    } else {
        None
    };
    let taps = &cfg.aux_enc_taps;
    let mut aux = |g: &mut Graph<'_>, idx: usize, weight: f64, texts: &[Vec<usize>]| -> Result<Option<Var>> {
        match taps.get(idx) {
            Some(&tap) if weight > 0.0 => {
                let v = aux_text_loss(g, model, &enc, tap, texts)?;
                parts.push((weight, v));
                Ok(Some(v))
            }
            _ => Ok(None),
        }
    };
    let aux_src = aux(g, 0, w.w_aux_src, &batch.x_text)?;
    let aux_tgt = aux(g, 1, w.w_aux_tgt, &batch.y_text)?;

    let mut total: Option<Var> = None;
    for &(weight, v) in &parts {
        let scaled = g.scale(v, weight);
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled)?,
        });
    }
    let total = total.ok_or_else(|| Error::config("every loss weight is zero"))?;

    let value = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));
    let breakdown = LossBreakdown {
        ntp: value(ntp),
        mtp_terms: mtp
            .as_ref()
            .map_or_else(Vec::new, |o| o.terms.iter().map(|&t| g.scalar(t)).collect()),
        ctc: value(ctc),
        aux_src: value(aux_src),
        aux_tgt: value(aux_tgt),
        total: g.scalar(total),
        ctc_skipped: ctc_stats.infeasible,
    };
    Ok((
        LossVars {
            total,
            ntp,
            mtp,
            ctc,
            aux_src,
            aux_tgt,
            enc,
            trace,
        },
        breakdown,
    ))
}
