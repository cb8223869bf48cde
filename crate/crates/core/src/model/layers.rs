use super::params::{
    AttentionP, ConvBlockP, DecoderLayerP, EncoderLayerP, FeedForwardP, LayerNormP, LinearP, OutputHeadP,
};
use crate::autodiff::{Graph, Segment, Tensor, Var};
use crate::error::Result;

pub(crate) fn linear(g: &mut Graph<'_>, p: &LinearP, x: Var) -> Result<Var> {
    let w = g.param(p.w);
    let b = p.b.map(|b| g.param(b));
    g.linear(x, w, b)
}

pub(crate) fn layer_norm(g: &mut Graph<'_>, p: &LayerNormP, x: Var, eps: f64) -> Result<Var> {
    let gain = g.param(p.gain);
    let bias = g.param(p.bias);
    g.layer_norm(x, gain, bias, eps)
}

pub(crate) fn feed_forward(g: &mut Graph<'_>, p: &FeedForwardP, x: Var) -> Result<Var> {
    let h = linear(g, &p.up, x)?;
    let h = g.silu(h);
    linear(g, &p.down, h)
}

/// Keys and values already projected for one attention sublayer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct KeyValues {
    pub k: Var,
    pub v: Var,
}

pub(crate) fn project_kv(g: &mut Graph<'_>, p: &AttentionP, source: Var) -> Result<KeyValues> {
    Ok(KeyValues {
        k: linear(g, &p.k, source)?,
        v: linear(g, &p.v, source)?,
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attend(
    g: &mut Graph<'_>,
    p: &AttentionP,
    query_source: Var,
    kv: KeyValues,
    q_segs: &[Segment],
    k_segs: &[Segment],
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let q = linear(g, &p.q, query_source)?;
    let o = g.attention(q, kv.k, kv.v, q_segs, k_segs, heads, causal)?;
    linear(g, &p.o, o)
}

pub(crate) fn conv_block(g: &mut Graph<'_>, p: &ConvBlockP, x: Var, segs: &[Segment], eps: f64) -> Result<Var> {
    let h = layer_norm(g, &p.ln, x, eps)?;
    let w = g.param(p.depthwise_w);
    let b = g.param(p.depthwise_b);
    let h = g.depthwise_conv(h, w, b, segs)?;
    let h = g.silu(h);
    linear(g, &p.pointwise, h)
}

pub(crate) fn encoder_layer(
    g: &mut Graph<'_>,
    p: &EncoderLayerP,
    x: Var,
    segs: &[Segment],
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let h = layer_norm(g, &p.ln_attn, x, eps)?;
    let kv = project_kv(g, &p.attn, h)?;
    let a = attend(g, &p.attn, h, kv, segs, segs, heads, false)?;
    let mut x = g.add(x, a)?;
    if let Some(conv) = &p.conv {
        let c = conv_block(g, conv, x, segs, eps)?;
        x = g.add(x, c)?;
    }
    let h = layer_norm(g, &p.ln_ff, x, eps)?;
    let f = feed_forward(g, &p.ff, h)?;
    g.add(x, f)
}

/// Encoder-side context for cross-attention.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Memory<'a> {
    pub states: Var,
    pub segs: &'a [Segment],
}

/// Pre-norm decoder layer over full sequences: causal self-attention,
/// cross-attention to `memory`, feed-forward; each with a residual.
pub(crate) fn decoder_layer(
    g: &mut Graph<'_>,
    p: &DecoderLayerP,
    x: Var,
    segs: &[Segment],
    memory: Memory<'_>,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let h = layer_norm(g, &p.ln_self, x, eps)?;
    let kv = project_kv(g, &p.self_attn, h)?;
    let a = attend(g, &p.self_attn, h, kv, segs, segs, heads, true)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, &p.ln_cross, x, eps)?;
    let mem_kv = project_kv(g, &p.cross_attn, memory.states)?;
    let c = attend(g, &p.cross_attn, h, mem_kv, segs, memory.segs, heads, false)?;
    let x = g.add(x, c)?;
    let h = layer_norm(g, &p.ln_ff, x, eps)?;
    let f = feed_forward(g, &p.ff, h)?;
    g.add(x, f)
}

pub(crate) fn decoder_stack(
    g: &mut Graph<'_>,
    layers: &[DecoderLayerP],
    mut x: Var,
    segs: &[Segment],
    memory: Memory<'_>,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    for layer in layers {
        x = decoder_layer(g, layer, x, segs, memory, heads, eps)?;
    }
    Ok(x)
}

/// Unnormalized vocabulary scores.
pub(crate) fn output_logits(g: &mut Graph<'_>, p: &OutputHeadP, h: Var, eps: f64) -> Result<Var> {
    let n = layer_norm(g, &p.ln, h, eps)?;
    linear(g, &p.proj, n)
}

pub(crate) fn output_log_probs(g: &mut Graph<'_>, p: &OutputHeadP, h: Var, eps: f64) -> Result<Var> {
    let logits = output_logits(g, p, h, eps)?;
    Ok(g.log_softmax_rows(logits))
}

/// Sinusoidal position table, restarting at zero for each segment.
pub(crate) fn positional_table(segs: &[Segment], dim: usize) -> Tensor {
    let rows: usize = segs.iter().map(|s| s.len).sum();
    let mut t = Tensor::zeros(&[rows, dim]);
    let mut r = 0;
    for s in segs {
        for pos in 0..s.len {
            write_position(&mut t.data_mut()[r * dim..(r + 1) * dim], pos);
            r += 1;
        }
    }
    t
}

pub(crate) fn write_position(row: &mut [f64], pos: usize) {
    let dim = row.len();
    for i in (0..dim).step_by(2) {
        let freq = 1.0 / 10000f64.powf(i as f64 / dim as f64);
        row[i] = (pos as f64 * freq).sin();
        if i + 1 < dim {
            row[i + 1] = (pos as f64 * freq).cos();
        }
    }
}
