use super::kernels::{self, AttentionShape, Segment};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

/// One sequence's CTC target inside a frame block.
#[derive(Clone, Debug)]
pub struct CtcTarget {
    pub frames: Segment,
    pub labels: Vec<usize>,
}

/// Outcome of a batched CTC evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CtcStats {
    pub feasible: usize,
    pub infeasible: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Silu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Nll {
        logp: Var,
        picks: Vec<usize>,
        count: usize,
    },
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        q_segs: Vec<Segment>,
        k_segs: Vec<Segment>,
        heads: usize,
        causal: bool,
        probs: Vec<f64>,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        b: Var,
        segs: Vec<Segment>,
    },
    Ctc {
        logp: Var,
        grad: Vec<f64>,
    },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// Tape of tensor operations recorded in execution order.
///
/// Parameters are borrowed from a [`ParamStore`] for the lifetime of the
/// graph. Gradients of leaves accumulate across repeated `backward` calls
/// until [`Graph::zero_grad`].
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f64>>>,
    store: Option<&'p ParamStore>,
    param_nodes: Vec<Option<Var>>,
    no_grad: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            store: None,
            param_nodes: Vec::new(),
            no_grad: false,
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            param_nodes: vec![None; store.len()],
            store: Some(store),
            ..Self::new()
        }
    }

    /// A graph that records values only; nothing will require gradients.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self {
            no_grad: true,
            ..Self::with_params(store)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_value(Value::Owned(value), op, requires_grad)
    }

    fn push_value(&mut self, value: Value<'p>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && !self.no_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        let store = self.store.expect("graph was built without a parameter store");
        let v = self.push_value(Value::Borrowed(store.tensor(id)), Op::Leaf, true);
        self.param_nodes[id.index()] = Some(v);
        v
    }

    /// Gradient accumulated on a parameter's leaf, if it took part in the graph.
    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.param_nodes
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|v| self.grad(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Adds a length-`d` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(b).numel() != d {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x /= 1.0 + (-*x).exp());
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    /// Row-wise softmax over the last axis, computed with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut out = Tensor::zeros(x.shape());
        for (o, r) in out.data_mut().chunks_mut(c).zip(x.data().chunks(c)) {
            kernels::softmax_row(r, o);
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Fused `x - max - log(sum(exp(x - max)))` per row.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut out = Tensor::zeros(x.shape());
        for (o, r) in out.data_mut().chunks_mut(c).zip(x.data().chunks(c)) {
            kernels::log_softmax_row(r, o);
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: xt.shape().to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let rows = xt.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = Tensor::zeros(xt.shape());
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for r in 0..rows {
            let row = &xt.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out.data_mut()[r * d + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Index {
                    position: pos,
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean of `-logp[t, targets[t]]` over positions whose mask is set.
    /// Zero when nothing is unmasked.
    pub fn nll(&mut self, logp: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lp = self.value(logp);
        let (t_len, v) = (lp.rows(), lp.cols());
        if targets.len() != t_len || mask.len() != t_len {
            return Err(Error::Dimension {
                op: "nll",
                lhs: lp.shape().to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let mut picks = Vec::new();
        for (pos, (&tg, &m)) in targets.iter().zip(mask).enumerate() {
            if tg >= v {
                return Err(Error::Index {
                    position: pos,
                    index: tg,
                    bound: v,
                });
            }
            if m {
                picks.push(pos * v + tg);
            }
        }
        let count = picks.len();
        let loss = if count == 0 {
            0.0
        } else {
            -picks.iter().map(|&i| lp.data()[i]).sum::<f64>() / count as f64
        };
        let rg = self.rg(logp);
        Ok(self.push(Tensor::scalar(loss), Op::Nll { logp, picks, count }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != rows || self.shape(p).len() != 2 {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            if self.value(p).cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / cols;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(rows.len() * c);
        for (pos, &r) in rows.iter().enumerate() {
            if r >= n {
                return Err(Error::Index {
                    position: pos,
                    index: r,
                    bound: n,
                });
            }
            out.extend_from_slice(t.row(r));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), c], out),
            Op::GatherRows(x, rows.to_vec()),
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention. Query segment `i` attends to
    /// key segment `i`; with `causal`, query row `r` of a segment sees the
    /// first `r + 1 + (k_len - q_len)` keys.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_segs: &[Segment],
        k_segs: &[Segment],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let dim = self.value(q).cols();
        if self.value(k).cols() != dim || self.shape(k) != self.shape(v) || !dim.is_multiple_of(heads) {
            return Err(Error::Dimension {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        if q_segs.len() != k_segs.len() {
            return Err(Error::contract("attention needs one key segment per query segment"));
        }
        let (nq, nk) = (self.value(q).rows(), self.value(k).rows());
        for (qs, ks) in q_segs.iter().zip(k_segs) {
            if qs.end() > nq || ks.end() > nk {
                return Err(Error::contract("attention segment exceeds tensor rows"));
            }
            if ks.len == 0 || (causal && ks.len < qs.len) {
                return Err(Error::contract("attention query has no visible keys"));
            }
        }
        let shape = AttentionShape {
            q_segs,
            k_segs,
            heads,
            dim,
            causal,
        };
        let (out, probs) =
            kernels::attention_forward(&shape, self.value(q).data(), self.value(k).data(), self.value(v).data());
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::from_parts(vec![nq, dim], out),
            Op::Attention {
                q,
                k,
                v,
                q_segs: q_segs.to_vec(),
                k_segs: k_segs.to_vec(),
                heads,
                causal,
                probs,
            },
            rg,
        ))
    }

    /// Per-channel convolution along rows with a width-3 kernel `w` (`3 × d`),
    /// zero-padded at segment boundaries.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var, segs: &[Segment]) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(w) != [3, d] || self.value(b).numel() != d {
            return Err(Error::Dimension {
                op: "depthwise_conv",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; xd.len()];
        for seg in segs {
            for t in 0..seg.len {
                let orow = &mut out[(seg.offset + t) * d..(seg.offset + t + 1) * d];
                orow.copy_from_slice(bd);
                for j in 0..3 {
                    let src = t as isize + j as isize - 1;
                    if src < 0 || src as usize >= seg.len {
                        continue;
                    }
                    let xrow = &xd[(seg.offset + src as usize) * d..(seg.offset + src as usize + 1) * d];
                    for c in 0..d {
                        orow[c] += wd[j * d + c] * xrow[c];
                    }
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::DepthwiseConv {
                x,
                w,
                b,
                segs: segs.to_vec(),
            },
            rg,
        ))
    }

    /// Mean CTC negative log-likelihood over feasible targets; infeasible
    /// targets are skipped and counted.
    pub fn ctc(&mut self, logp: Var, targets: &[CtcTarget], blank: usize) -> Result<(Var, CtcStats)> {
        let lp = self.value(logp);
        let classes = lp.cols();
        let mut grad = vec![0.0; lp.numel()];
        let mut total = 0.0;
        let mut stats = CtcStats::default();
        let mut feasible_blocks = Vec::new();
        for tg in targets {
            if tg.frames.end() > lp.rows() {
                return Err(Error::contract("ctc frame segment exceeds tensor rows"));
            }
            if let Some(pos) = tg.labels.iter().position(|&l| l >= classes || l == blank) {
                return Err(Error::Index {
                    position: pos,
                    index: tg.labels[pos],
                    bound: classes,
                });
            }
            let block = &lp.data()[tg.frames.offset * classes..tg.frames.end() * classes];
            let r = kernels::ctc_forward_backward(block, tg.frames.len, classes, &tg.labels, blank);
            if r.log_prob == f64::NEG_INFINITY {
                stats.infeasible += 1;
                continue;
            }
            stats.feasible += 1;
            total -= r.log_prob;
            feasible_blocks.push((tg.frames.offset * classes, r.grad));
        }
        let loss = if stats.feasible > 0 {
            let scale = 1.0 / stats.feasible as f64;
            for (off, g) in feasible_blocks {
                for (dst, src) in grad[off..off + g.len()].iter_mut().zip(g) {
                    *dst += src * scale;
                }
            }
            total * scale
        } else {
            0.0
        };
        let rg = self.rg(logp);
        Ok((self.push(Tensor::scalar(loss), Op::Ctc { logp, grad }, rg), stats))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, gout: &[f64]) {
        // Temporarily move the op out so that its inputs can be mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| nodes[v.0].value.get();
        let rg = |v: Var| nodes[v.0].requires_grad;
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if let Some(ga) = grad_buf(nodes, grads, *a) {
                    kernels::gemm(m, n, k, gout, false, val(*b).data(), true, 1.0, ga);
                }
                if let Some(gb) = grad_buf(nodes, grads, *b) {
                    kernels::gemm(k, m, n, val(*a).data(), true, gout, false, 1.0, gb);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    add_into(gx, gout);
                }
                if let Some(gb) = grad_buf(nodes, grads, *b) {
                    let d = gb.len();
                    for row in gout.chunks(d) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = grad_buf(nodes, grads, *a) {
                    add_into(ga, gout);
                }
                if let Some(gb) = grad_buf(nodes, grads, *b) {
                    add_into(gb, gout);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = grad_buf(nodes, grads, *a) {
                    for (g, &o) in ga.iter_mut().zip(gout) {
                        *g += c * o;
                    }
                }
            }
            Op::Relu(a) => {
                let y = nodes[i].value.get().data();
                if let Some(ga) = grad_buf(nodes, grads, *a) {
                    for ((g, &o), &yy) in ga.iter_mut().zip(gout).zip(y) {
                        if yy > 0.0 {
                            *g += o;
                        }
                    }
                }
            }
            Op::Silu(a) => {
                let x = val(*a).data();
                if let Some(ga) = grad_buf(nodes, grads, *a) {
                    for ((g, &o), &xx) in ga.iter_mut().zip(gout).zip(x) {
                        let sig = 1.0 / (1.0 + (-xx).exp());
                        *g += o * sig * (1.0 + xx * (1.0 - sig));
                    }
                }
            }
            Op::Softmax(a) => {
                let y = nodes[i].value.get();
                let c = y.cols();
                if let Some(ga) = grad_buf(nodes, grads, *a) {
                    for ((g, yr), gr) in ga.chunks_mut(c).zip(y.data().chunks(c)).zip(gout.chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            g[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = nodes[i].value.get();
                let c = y.cols();
                if let Some(ga) = grad_buf(nodes, grads, *a) {
                    for ((g, yr), gr) in ga.chunks_mut(c).zip(y.data().chunks(c)).zip(gout.chunks(c)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            g[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = val(*x).cols();
                let gv = val(*gain).data();
                if let Some(gg) = grad_buf(nodes, grads, *gain) {
                    for (hr, gr) in xhat.chunks(d).zip(gout.chunks(d)) {
                        for c in 0..d {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if let Some(gb) = grad_buf(nodes, grads, *bias) {
                    for gr in gout.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    let mut dh = vec![0.0; d];
                    for (r, ((gxr, hr), gr)) in gx.chunks_mut(d).zip(xhat.chunks(d)).zip(gout.chunks(d)).enumerate() {
                        for c in 0..d {
                            dh[c] = gr[c] * gv[c];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            gxr[c] += inv_std[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = grad_buf(nodes, grads, *table) {
                    let d = gout.len().checked_div(ids.len()).unwrap_or(0);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Nll { logp, picks, count } => {
                if *count > 0 {
                    let scale = gout[0] / *count as f64;
                    if let Some(gl) = grad_buf(nodes, grads, *logp) {
                        for &p in picks {
                            gl[p] -= scale;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = grad_buf(nodes, grads, *a) {
                    ga.iter_mut().for_each(|g| *g += gout[0]);
                }
            }
            Op::ConcatCols(parts) => {
                let total: usize = parts.iter().map(|&p| val(p).cols()).sum();
                let mut c0 = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if let Some(gp) = grad_buf(nodes, grads, p) {
                        for (r, gr) in gp.chunks_mut(c).enumerate() {
                            add_into(gr, &gout[r * total + c0..r * total + c0 + c]);
                        }
                    }
                    c0 += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if let Some(gp) = grad_buf(nodes, grads, p) {
                        add_into(gp, &gout[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::GatherRows(x, rows) => {
                let c = val(*x).cols();
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    for (pos, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * c..(r + 1) * c], &gout[pos * c..(pos + 1) * c]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                q_segs,
                k_segs,
                heads,
                causal,
                probs,
            } => {
                let shape = AttentionShape {
                    q_segs,
                    k_segs,
                    heads: *heads,
                    dim: val(*q).cols(),
                    causal: *causal,
                };
                let mut dq = vec![0.0; val(*q).numel()];
                let mut dk = vec![0.0; val(*k).numel()];
                let mut dv = vec![0.0; val(*v).numel()];
                kernels::attention_backward(
                    &shape,
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    probs,
                    gout,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(buf) = grad_buf(nodes, grads, var) {
                        add_into(buf, &g);
                    }
                }
            }
            Op::DepthwiseConv { x, w, b, segs } => {
                let d = val(*x).cols();
                let xd = val(*x).data();
                let wd = val(*w).data();
                if let Some(gb) = grad_buf(nodes, grads, *b) {
                    for seg in segs {
                        for t in 0..seg.len {
                            add_into(gb, &gout[(seg.offset + t) * d..(seg.offset + t + 1) * d]);
                        }
                    }
                }
                let want_x = rg(*x);
                let want_w = rg(*w);
                let mut gx = vec![0.0; if want_x { xd.len() } else { 0 }];
                let mut gw = vec![0.0; if want_w { 3 * d } else { 0 }];
                for seg in segs {
                    for t in 0..seg.len {
                        let go = &gout[(seg.offset + t) * d..(seg.offset + t + 1) * d];
                        for j in 0..3 {
                            let src = t as isize + j as isize - 1;
                            if src < 0 || src as usize >= seg.len {
                                continue;
                            }
                            let row = (seg.offset + src as usize) * d;
                            for c in 0..d {
                                if want_x {
                                    gx[row + c] += wd[j * d + c] * go[c];
                                }
                                if want_w {
                                    gw[j * d + c] += xd[row + c] * go[c];
                                }
                            }
                        }
                    }
                }
                if let Some(buf) = grad_buf(nodes, grads, *x) {
                    add_into(buf, &gx);
                }
                if let Some(buf) = grad_buf(nodes, grads, *w) {
                    add_into(buf, &gw);
                }
            }
            Op::Ctc { logp, grad } => {
                if let Some(gl) = grad_buf(nodes, grads, *logp) {
                    for (g, &s) in gl.iter_mut().zip(grad) {
                        *g += gout[0] * s;
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn grad_buf<'a>(nodes: &[Node<'_>], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.get().numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
