//! Raw numeric kernels over flat row-major buffers. No graph bookkeeping here.

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m × k` and `op(b)` is `k × n`.
///
/// `a` is stored row-major as `m × k` (or `k × m` when `trans_a`), likewise `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].fill(0.0);
        } else {
            c[..m * n].iter_mut().for_each(|x| *x *= beta);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(x);
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// A contiguous block of rows belonging to one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(offset: usize, len: usize) -> Self {
        Self { offset, len }
    }

    /// Packs consecutive lengths into back-to-back segments.
    pub fn pack(lens: &[usize]) -> Vec<Segment> {
        let mut off = 0;
        lens.iter()
            .map(|&len| {
                let s = Segment::new(off, len);
                off += len;
                s
            })
            .collect()
    }

    pub fn end(&self) -> usize {
        self.offset + self.len
    }
}

pub(crate) struct AttentionShape<'a> {
    pub q_segs: &'a [Segment],
    pub k_segs: &'a [Segment],
    pub heads: usize,
    pub dim: usize,
    pub causal: bool,
}

impl AttentionShape<'_> {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    /// Number of keys visible to query `i` of a segment pair.
    fn visible(&self, i: usize, ql: usize, kl: usize) -> usize {
        if self.causal {
            i + 1 + (kl - ql)
        } else {
            kl
        }
    }

    pub fn probs_len(&self) -> usize {
        self.q_segs
            .iter()
            .zip(self.k_segs)
            .map(|(q, k)| q.len * k.len * self.heads)
            .sum()
    }
}

/// Scaled dot-product multi-head attention over ragged segment pairs.
/// Returns the attention output and the stored probabilities.
pub(crate) fn attention_forward(shape: &AttentionShape<'_>, q: &[f64], k: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = shape.dim;
    let dh = shape.head_dim();
    let scale = shape.scale();
    let n_q = q.len() / d;
    let mut out = vec![0.0; n_q * d];
    let mut probs = vec![0.0; shape.probs_len()];
    let mut p_off = 0;
    let mut scores = Vec::new();
    for (qs, ks) in shape.q_segs.iter().zip(shape.k_segs) {
        let (ql, kl) = (qs.len, ks.len);
        for h in 0..shape.heads {
            let c0 = h * dh;
            for i in 0..ql {
                let qrow = &q[(qs.offset + i) * d + c0..(qs.offset + i) * d + c0 + dh];
                let vis = shape.visible(i, ql, kl);
                scores.clear();
                for j in 0..vis {
                    let krow = &k[(ks.offset + j) * d + c0..(ks.offset + j) * d + c0 + dh];
                    let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                    scores.push(dot * scale);
                }
                let prow = &mut probs[p_off + i * kl..p_off + i * kl + vis];
                softmax_row(&scores, prow);
                let orow = &mut out[(qs.offset + i) * d + c0..(qs.offset + i) * d + c0 + dh];
                for (j, &p) in prow.iter().enumerate() {
                    let vrow = &v[(ks.offset + j) * d + c0..(ks.offset + j) * d + c0 + dh];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
            p_off += ql * kl;
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    shape: &AttentionShape<'_>,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let d = shape.dim;
    let dh = shape.head_dim();
    let scale = shape.scale();
    let mut p_off = 0;
    let mut dp = Vec::new();
    for (qs, ks) in shape.q_segs.iter().zip(shape.k_segs) {
        let (ql, kl) = (qs.len, ks.len);
        for h in 0..shape.heads {
            let c0 = h * dh;
            for i in 0..ql {
                let qi = (qs.offset + i) * d + c0;
                let vis = shape.visible(i, ql, kl);
                let prow = &probs[p_off + i * kl..p_off + i * kl + vis];
                let drow = &dout[qi..qi + dh];
                dp.clear();
                for j in 0..vis {
                    let vj = (ks.offset + j) * d + c0;
                    let dot: f64 = drow.iter().zip(&v[vj..vj + dh]).map(|(a, b)| a * b).sum();
                    dp.push(dot);
                }
                let s: f64 = prow.iter().zip(&dp).map(|(p, g)| p * g).sum();
                for j in 0..vis {
                    let kj = (ks.offset + j) * d + c0;
                    let p = prow[j];
                    let ds = p * (dp[j] - s) * scale;
                    for c in 0..dh {
                        dq[qi + c] += ds * k[kj + c];
                        dk[kj + c] += ds * q[qi + c];
                        dv[kj + c] += p * drow[c];
                    }
                }
            }
            p_off += ql * kl;
        }
    }
}

/// Result of the CTC forward-backward pass on one sequence.
pub(crate) struct CtcResult {
    /// `ln P(labels | frames)`; `-inf` when no alignment exists.
    pub log_prob: f64,
    /// `d(-ln P)/d logp[t, c]`, laid out like the frame block (`T × C`).
    pub grad: Vec<f64>,
}

/// Minimum number of frames needed to emit `labels` under CTC.
pub fn ctc_min_frames(labels: &[usize]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

/// Log-space forward-backward over the blank-interleaved label sequence.
/// `logp` is a `frames × classes` block of log-probabilities.
pub(crate) fn ctc_forward_backward(
    logp: &[f64],
    frames: usize,
    classes: usize,
    labels: &[usize],
    blank: usize,
) -> CtcResult {
    let ninf = f64::NEG_INFINITY;
    if frames < ctc_min_frames(labels) || frames == 0 {
        return CtcResult {
            log_prob: ninf,
            grad: vec![0.0; frames * classes],
        };
    }
    let s_len = 2 * labels.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { blank } else { labels[s / 2] })
        .collect();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let lp = |t: usize, s: usize| logp[t * classes + ext[s]];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = lse2(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, s) };
        }
    }
    let last = &alpha[(frames - 1) * s_len..];
    let log_prob = if s_len > 1 {
        lse2(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };

    let mut beta = vec![ninf; frames * s_len];
    let tl = frames - 1;
    beta[tl * s_len + s_len - 1] = lp(tl, s_len - 1);
    if s_len > 1 {
        beta[tl * s_len + s_len - 2] = lp(tl, s_len - 2);
    }
    for t in (0..tl).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = lse2(acc, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = lse2(acc, next[s + 2]);
            }
            beta[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, s) };
        }
    }

    let mut grad = vec![0.0; frames * classes];
    if log_prob == ninf {
        return CtcResult { log_prob, grad };
    }
    for t in 0..frames {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            let occupancy = (a + b - lp(t, s) - log_prob).exp();
            grad[t * classes + ext[s]] -= occupancy;
        }
    }
    CtcResult { log_prob, grad }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, false, &b, false, 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // a^T (3x2) stored as 2x3, times c (2x4) -> 3x4
        let mut d = vec![0.0; 12];
        gemm(3, 2, 4, &a, true, &c, false, 0.0, &mut d);
        for i in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|p| a[p * 3 + i] * c[p * 4 + j]).sum();
                assert!((d[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ctc_empty_labels_is_all_blank_path() {
        let logp = [(0.5f64).ln(), (0.5f64).ln(), (0.25f64).ln(), (0.75f64).ln()];
        let r = ctc_forward_backward(&logp, 2, 2, &[], 0);
        assert!((r.log_prob - (0.5f64 * 0.25).ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_min_frames_counts_repeats() {
        assert_eq!(ctc_min_frames(&[1, 1, 2]), 4);
        assert_eq!(ctc_min_frames(&[1, 2, 3]), 3);
        assert_eq!(ctc_min_frames(&[]), 0);
    }
}
