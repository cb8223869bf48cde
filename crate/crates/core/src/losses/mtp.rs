//! Multi-token prediction objectives. Every variant scores head `k` against
//! `U^{-k}` and sums the per-shift terms.

use super::shift::left_shift_packed;
use crate::autodiff::{Graph, Segment, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{layers, DecoderTrace, EncoderOutput, MtpVariant, S2utModel};

/// Per-shift terms and their sum.
#[derive(Clone, Debug)]
pub struct MtpOutput {
    pub total: Var,
    pub terms: Vec<Var>,
}

/// Interventions used to probe how information flows between heads.
#[derive(Clone, Debug, Default)]
pub struct MtpProbe {
    /// Replaces the teacher-forced tokens `U^{1-k}` fed to head `k` (DeepSeek-V3).
    pub teacher_override: Option<(usize, Vec<usize>)>,
    /// Replaces the input state of head `k` with zeros.
    pub zero_input: Option<usize>,
}

/// Per-shift NLL of unit log-probabilities against `U^{-k}`.
pub fn shifted_nll(g: &mut Graph<'_>, logp: Var, units: &[usize], segs: &[Segment], k: usize) -> Result<Var> {
    let (targets, mask) = left_shift_packed(units, segs, k)?;
    g.nll(logp, &targets, &mask)
}

fn head_count(model: &S2utModel) -> Result<usize> {
    if model.config().mtp_variant == MtpVariant::None {
        return Err(Error::config("model has no multi-token prediction heads"));
    }
    Ok(model.config().mtp_n)
}

fn finish(g: &mut Graph<'_>, terms: Vec<Var>) -> Result<MtpOutput> {
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(MtpOutput { total, terms })
}

fn maybe_zero(g: &mut Graph<'_>, probe: &MtpProbe, k: usize, x: Var) -> Var {
    if probe.zero_input == Some(k) {
        let shape = g.shape(x).to_vec();
        g.constant(Tensor::zeros(&shape))
    } else {
        x
    }
}

/// `N` independent output heads on `H_dec^L`; head 0 is the main output head.
pub fn mtp_parallel_linear_loss(
    g: &mut Graph<'_>,
    model: &S2utModel,
    trace: &DecoderTrace,
    units: &[usize],
) -> Result<MtpOutput> {
    let n = head_count(model)?;
    let mtp = model.p.mtp.as_ref().expect("variant has heads");
    let h = trace.last();
    let eps = model.config().ln_eps;
    let mut terms = Vec::with_capacity(n);
    for k in 0..n {
        let head = if k == 0 { &model.p.out } else { &mtp.linear_heads[k - 1] };
        let logp = layers::output_log_probs(g, head, h, eps)?;
        terms.push(shifted_nll(g, logp, units, &trace.segs, k)?);
    }
    finish(g, terms)
}

/// Chained heads; head `k` fuses `LN(H_out^{k-1})` with `LN(Emb(U^{1-k}))`.
pub fn mtp_deepseek_v3_loss(
    g: &mut Graph<'_>,
    model: &S2utModel,
    enc: &EncoderOutput,
    trace: &DecoderTrace,
    units: &[usize],
    probe: &MtpProbe,
) -> Result<MtpOutput> {
    let n = head_count(model)?;
    let mtp = model.p.mtp.as_ref().expect("variant has heads");
    let cfg = model.config();
    let eps = cfg.ln_eps;
    let segs = &trace.segs;
    let mut h = trace.last();
    let logp = model.unit_log_probs(g, h)?;
    let mut terms = vec![shifted_nll(g, logp, units, segs, 0)?];
    for k in 1..n {
        let tokens = match &probe.teacher_override {
            Some((j, t)) if *j == k => t.clone(),
            _ => left_shift_packed(units, segs, k - 1)?.0,
        };
        let prev = maybe_zero(g, probe, k, h);
        let fusion = &mtp.fusions[k - 1];
        let state = layers::layer_norm(g, &fusion.ln_state, prev, eps)?;
        let table = g.param(model.p.unit_embedding);
        let emb = g.embedding(table, &tokens)?;
        let emb = layers::layer_norm(g, &fusion.ln_embed, emb, eps)?;
        let fused = g.concat_cols(&[state, emb])?;
        let h_in = layers::linear(g, &fusion.proj, fused)?;
        h = layers::decoder_stack(g, &mtp.decoders[k - 1], h_in, segs, enc.memory(), cfg.heads, eps)?;
        let logp = model.unit_log_probs(g, h)?;
        terms.push(shifted_nll(g, logp, units, segs, k)?);
    }
    finish(g, terms)
}

/// Chained heads with `H_in^k = H_out^{k-1}` and no token inputs.
pub fn mtp_vocalnet_loss(
    g: &mut Graph<'_>,
    model: &S2utModel,
    enc: &EncoderOutput,
    trace: &DecoderTrace,
    units: &[usize],
    probe: &MtpProbe,
) -> Result<MtpOutput> {
    let n = head_count(model)?;
    let mtp = model.p.mtp.as_ref().expect("variant has heads");
    let cfg = model.config();
    let segs = &trace.segs;
    let mut h = trace.last();
    let logp = model.unit_log_probs(g, h)?;
    let mut terms = vec![shifted_nll(g, logp, units, segs, 0)?];
    for k in 1..n {
        let h_in = maybe_zero(g, probe, k, h);
        h = layers::decoder_stack(g, &mtp.decoders[k - 1], h_in, segs, enc.memory(), cfg.heads, cfg.ln_eps)?;
        let logp = model.unit_log_probs(g, h)?;
        terms.push(shifted_nll(g, logp, units, segs, k)?);
    }
    finish(g, terms)
}

/// `N` sibling heads, each reading `H_dec^m` directly.
pub fn mtp_s2ut_loss(
    g: &mut Graph<'_>,
    model: &S2utModel,
    enc: &EncoderOutput,
    trace: &DecoderTrace,
    units: &[usize],
    probe: &MtpProbe,
) -> Result<MtpOutput> {
    let n = head_count(model)?;
    let mtp = model.p.mtp.as_ref().expect("variant has heads");
    let cfg = model.config();
    let h_mid = *trace
        .states
        .get(cfg.ctc_layer)
        .ok_or_else(|| Error::config(format!("ctc layer {} outside decoder trace", cfg.ctc_layer)))?;
    let segs = &trace.segs;
    let mut terms = Vec::with_capacity(n);
    for k in 0..n {
        let h_in = maybe_zero(g, probe, k, h_mid);
        let h = layers::decoder_stack(g, &mtp.decoders[k], h_in, segs, enc.memory(), cfg.heads, cfg.ln_eps)?;
        let logp = model.unit_log_probs(g, h)?;
        terms.push(shifted_nll(g, logp, units, segs, k)?);
    }
    finish(g, terms)
}

/// Dispatches on the model's configured variant.
pub fn mtp_loss(
    g: &mut Graph<'_>,
    model: &S2utModel,
    enc: &EncoderOutput,
    trace: &DecoderTrace,
    units: &[usize],
    probe: &MtpProbe,
) -> Result<MtpOutput> {
    match model.config().mtp_variant {
        MtpVariant::None => Err(Error::config("model has no multi-token prediction heads")),
        MtpVariant::ParallelLinear => mtp_parallel_linear_loss(g, model, trace, units),
        MtpVariant::DeepseekV3 => mtp_deepseek_v3_loss(g, model, enc, trace, units, probe),
        MtpVariant::Vocalnet => mtp_vocalnet_loss(g, model, enc, trace, units, probe),
        MtpVariant::S2ut => mtp_s2ut_loss(g, model, enc, trace, units, probe),
    }
}
