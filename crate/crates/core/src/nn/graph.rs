//! Reverse-mode tape for the handful of differentiable ops this project
//! needs. A graph is built per forward pass; `backward` walks the tape in
//! reverse and accumulates gradients into the leaf nodes, from which they
//! are scattered back into a [`ParamSet`].

use crate::error::{Error, Result};

use super::math::{matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_row_inplace};
use super::params::{ParamId, ParamSet};
use super::real::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Probabilities are clamped into [eps, 1-eps] before the BCE logs.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<S: Real> {
    Leaf,
    Param(ParamId),
    Add(NodeId, NodeId),
    /// matrix + broadcast row vector
    AddBias(NodeId, NodeId),
    Scale(NodeId, S),
    MatMul(NodeId, NodeId),
    Conv1d {
        x: NodeId,
        kernel: NodeId,
        ksize: usize,
        stride: usize,
    },
    PadRows {
        x: NodeId,
        before: usize,
    },
    ConcatRows(NodeId, NodeId),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    Gelu(NodeId),
    Sigmoid(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        causal: bool,
        /// softmax probabilities, layout [head][query][key]
        probs: Vec<S>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    MeanRows(NodeId),
    /// Forward emits replacement values; backward is the identity into x.
    StraightThrough(NodeId),
    CrossEntropyMean {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    BceSum {
        probs: NodeId,
        labels: Vec<S>,
    },
    /// Fused sigmoid + summed BCE on logits; numerically stable where the
    /// probability-space form saturates.
    BceLogitsSum {
        logits: NodeId,
        labels: Vec<S>,
    },
    MseConst {
        x: NodeId,
        target: Vec<S>,
    },
}

struct Node<S: Real> {
    op: Op<S>,
    rows: usize,
    cols: usize,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
}

pub struct Graph<S: Real> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op<S>, rows: usize, cols: usize, data: Vec<S>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node {
            op,
            rows,
            cols,
            data,
            grad: None,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn n(&self, id: NodeId) -> &Node<S> {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = self.n(id);
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.n(id).data
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> S {
        debug_assert_eq!(self.n(id).data.len(), 1);
        self.n(id).data[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.n(id).grad.as_deref()
    }

    // ---- leaf constructors -------------------------------------------------

    pub fn input(&mut self, data: Vec<S>, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Leaf, rows, cols, data, false)
    }

    /// Input leaf that participates in gradient computation (used by tests
    /// and by the straight-through contract checks).
    pub fn input_with_grad(&mut self, data: Vec<S>, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Leaf, rows, cols, data, true)
    }

    /// Bind a parameter's current values into the graph.
    pub fn param(&mut self, set: &ParamSet<S>, id: ParamId) -> NodeId {
        let p = set.get(id);
        self.push(
            Op::Param(id),
            p.rows,
            p.cols,
            p.values.clone(),
            p.trainable,
        )
    }

    // ---- ops ---------------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if (ar, ac) != (br, bc) {
            return Err(Error::Shape(format!(
                "add: left is {ar}x{ac}, right is {br}x{bc}"
            )));
        }
        let data = self
            .n(a)
            .data
            .iter()
            .zip(self.n(b).data.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.n(a).needs_grad || self.n(b).needs_grad;
        Ok(self.push(Op::Add(a, b), ar, ac, data, ng))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xr, xc) = self.shape(x);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != xc {
            return Err(Error::Shape(format!(
                "add_bias: matrix is {xr}x{xc}, bias is {br}x{bc}"
            )));
        }
        let bvals = &self.n(bias).data;
        let mut data = self.n(x).data.clone();
        for r in 0..xr {
            for c in 0..xc {
                data[r * xc + c] += bvals[c];
            }
        }
        let ng = self.n(x).needs_grad || self.n(bias).needs_grad;
        Ok(self.push(Op::AddBias(x, bias), xr, xc, data, ng))
    }

    pub fn scale(&mut self, x: NodeId, factor: S) -> NodeId {
        let (r, c) = self.shape(x);
        let data = self.n(x).data.iter().map(|&v| v * factor).collect();
        let ng = self.n(x).needs_grad;
        self.push(Op::Scale(x, factor), r, c, data, ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul: left is {m}x{ka}, right is {kb}x{n}"
            )));
        }
        let mut data = vec![S::ZERO; m * n];
        matmul_acc(&mut data, &self.n(a).data, &self.n(b).data, m, ka, n);
        let ng = self.n(a).needs_grad || self.n(b).needs_grad;
        Ok(self.push(Op::MatMul(a, b), m, n, data, ng))
    }

    /// 1-D convolution over rows, no padding. `kernel` is (ksize·Din)×Dout
    /// where row j·Din+c is tap j of input channel c.
    pub fn conv1d(&mut self, x: NodeId, kernel: NodeId, ksize: usize, stride: usize) -> Result<NodeId> {
        let (t, din) = self.shape(x);
        let (kr, dout) = self.shape(kernel);
        if kr != ksize * din {
            return Err(Error::Shape(format!(
                "conv1d: kernel is {kr}x{dout}, expected {}x{dout} for k={ksize}, Din={din}",
                ksize * din
            )));
        }
        if t < ksize {
            return Err(Error::Shape(format!(
                "conv1d: input has {t} frames, kernel needs at least {ksize}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d: stride must be >= 1".into()));
        }
        let t_out = (t - ksize) / stride + 1;
        let mut data = vec![S::ZERO; t_out * dout];
        {
            let xv = &self.n(x).data;
            let kv = &self.n(kernel).data;
            for to in 0..t_out {
                let orow = &mut data[to * dout..(to + 1) * dout];
                for j in 0..ksize {
                    let xrow = &xv[(to * stride + j) * din..(to * stride + j + 1) * din];
                    let kblock = &kv[j * din * dout..(j + 1) * din * dout];
                    matmul_acc(orow, xrow, kblock, 1, din, dout);
                }
            }
        }
        let ng = self.n(x).needs_grad || self.n(kernel).needs_grad;
        Ok(self.push(
            Op::Conv1d {
                x,
                kernel,
                ksize,
                stride,
            },
            t_out,
            dout,
            data,
            ng,
        ))
    }

    /// Zero rows prepended/appended.
    pub fn pad_rows(&mut self, x: NodeId, before: usize, after: usize) -> NodeId {
        let (r, c) = self.shape(x);
        let mut data = vec![S::ZERO; (r + before + after) * c];
        data[before * c..(before + r) * c].copy_from_slice(&self.n(x).data);
        let ng = self.n(x).needs_grad;
        self.push(Op::PadRows { x, before }, r + before + after, c, data, ng)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc {
            return Err(Error::Shape(format!(
                "concat_rows: left is {ar}x{ac}, right is {br}x{bc}"
            )));
        }
        let mut data = Vec::with_capacity((ar + br) * ac);
        data.extend_from_slice(&self.n(a).data);
        data.extend_from_slice(&self.n(b).data);
        let ng = self.n(a).needs_grad || self.n(b).needs_grad;
        Ok(self.push(Op::ConcatRows(a, b), ar + br, ac, data, ng))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if start + len > r {
            return Err(Error::Shape(format!(
                "slice_rows: [{start}, {}) out of {r} rows",
                start + len
            )));
        }
        let data = self.n(x).data[start * c..(start + len) * c].to_vec();
        let ng = self.n(x).needs_grad;
        Ok(self.push(Op::SliceRows { x, start }, len, c, data, ng))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let data = self.n(x).data.iter().map(|&v| gelu_fwd(v)).collect();
        let ng = self.n(x).needs_grad;
        self.push(Op::Gelu(x), r, c, data, ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let data = self
            .n(x)
            .data
            .iter()
            .map(|&v| S::ONE / (S::ONE + (-v).exp()))
            .collect();
        let ng = self.n(x).needs_grad;
        self.push(Op::Sigmoid(x), r, c, data, ng)
    }

    /// Row-wise layer normalization with learned gain/bias (1×cols each).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        let (gr, gc) = self.shape(gain);
        let (br, bc) = self.shape(bias);
        if gr != 1 || gc != c || br != 1 || bc != c {
            return Err(Error::Shape(format!(
                "layer_norm: input is {r}x{c}, gain is {gr}x{gc}, bias is {br}x{bc}"
            )));
        }
        let eps = S::from_f64(LAYER_NORM_EPS);
        let inv_c = S::ONE / S::from_usize(c);
        let mut data = vec![S::ZERO; r * c];
        let mut means = vec![S::ZERO; r];
        let mut rstds = vec![S::ZERO; r];
        {
            let xv = &self.n(x).data;
            let gv = &self.n(gain).data;
            let bv = &self.n(bias).data;
            for i in 0..r {
                let row = &xv[i * c..(i + 1) * c];
                let mut mean = S::ZERO;
                for &v in row {
                    mean += v;
                }
                mean *= inv_c;
                let mut var = S::ZERO;
                for &v in row {
                    let d = v - mean;
                    var += d * d;
                }
                var *= inv_c;
                let rstd = S::ONE / (var + eps).sqrt();
                means[i] = mean;
                rstds[i] = rstd;
                let orow = &mut data[i * c..(i + 1) * c];
                for j in 0..c {
                    orow[j] = (row[j] - mean) * rstd * gv[j] + bv[j];
                }
            }
        }
        let ng = self.n(x).needs_grad || self.n(gain).needs_grad || self.n(bias).needs_grad;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            r,
            c,
            data,
            ng,
        ))
    }

    /// Scaled dot-product attention over `heads` heads. q is Tq×D, k and v
    /// are Tk×D. With `causal` the query/key lengths must match and
    /// position i only attends to keys ≤ i.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        causal: bool,
    ) -> Result<NodeId> {
        let (tq, d) = self.shape(q);
        let (tk, dk) = self.shape(k);
        let (tv, dv) = self.shape(v);
        if d != dk || d != dv || tk != tv {
            return Err(Error::Shape(format!(
                "attention: q is {tq}x{d}, k is {tk}x{dk}, v is {tv}x{dv}"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        if causal && tq != tk {
            return Err(Error::Shape(format!(
                "attention: causal mask needs square scores, got {tq} queries and {tk} keys"
            )));
        }
        let dh = d / heads;
        let scale = S::ONE / S::from_f64((dh as f64).sqrt());
        let mut probs = vec![S::ZERO; heads * tq * tk];
        let mut data = vec![S::ZERO; tq * d];
        {
            let qv = &self.n(q).data;
            let kv = &self.n(k).data;
            let vv = &self.n(v).data;
            let mut scores = vec![S::ZERO; tk];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let qrow = &qv[i * d + off..i * d + off + dh];
                    let limit = if causal { i + 1 } else { tk };
                    for (j, s) in scores.iter_mut().take(limit).enumerate() {
                        let krow = &kv[j * d + off..j * d + off + dh];
                        let mut acc = S::ZERO;
                        for p in 0..dh {
                            acc += qrow[p] * krow[p];
                        }
                        *s = acc * scale;
                    }
                    softmax_row_inplace(&mut scores[..limit]);
                    let prow = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                    prow[..limit].copy_from_slice(&scores[..limit]);
                    let orow = &mut data[i * d + off..i * d + off + dh];
                    for (j, &p) in prow.iter().take(limit).enumerate() {
                        let vrow = &vv[j * d + off..j * d + off + dh];
                        for t in 0..dh {
                            orow[t] += p * vrow[t];
                        }
                    }
                }
            }
        }
        let ng = self.n(q).needs_grad || self.n(k).needs_grad || self.n(v).needs_grad;
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            },
            tq,
            d,
            data,
            ng,
        ))
    }

    /// Row lookup: out[i] = table[ids[i]].
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Data(format!(
                "embedding: id {bad} out of range for table with {v} rows"
            )));
        }
        let tv = &self.n(table).data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.n(table).needs_grad;
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ids.len(),
            d,
            data,
            ng,
        ))
    }

    /// Mean over rows: T×D → 1×D.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let inv = S::ONE / S::from_usize(r);
        let xv = &self.n(x).data;
        let mut data = vec![S::ZERO; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += xv[i * c + j];
            }
        }
        for v in data.iter_mut() {
            *v *= inv;
        }
        let ng = self.n(x).needs_grad;
        self.push(Op::MeanRows(x), 1, c, data, ng)
    }

    /// Replace the values of `x` with `replacement` while letting gradients
    /// pass through unchanged (straight-through estimator).
    pub fn straight_through(&mut self, x: NodeId, replacement: Vec<S>) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if replacement.len() != r * c {
            return Err(Error::Shape(format!(
                "straight_through: input is {r}x{c}, replacement has {} values",
                replacement.len()
            )));
        }
        let ng = self.n(x).needs_grad;
        Ok(self.push(Op::StraightThrough(x), r, c, replacement, ng))
    }

    /// Mean token-level cross entropy: −(1/m)·Σ_t log softmax(logits[t])[targets[t]].
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (m, vocab) = self.shape(logits);
        if targets.is_empty() {
            return Err(Error::Config("cross_entropy_mean: no target tokens".into()));
        }
        if targets.len() != m {
            return Err(Error::Shape(format!(
                "cross_entropy_mean: {m} logit rows vs {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Data(format!(
                "cross_entropy_mean: target {bad} out of vocab {vocab}"
            )));
        }
        let mut probs = self.n(logits).data.clone();
        let mut loss = S::ZERO;
        for (t, &y) in targets.iter().enumerate() {
            let row = &mut probs[t * vocab..(t + 1) * vocab];
            softmax_row_inplace(row);
            loss -= row[y].maxv(S::from_f64(1e-30)).ln();
        }
        loss /= S::from_usize(m);
        let ng = self.n(logits).needs_grad;
        Ok(self.push(
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            1,
            1,
            vec![loss],
            ng,
        ))
    }

    /// Summed binary cross entropy over all entries, probabilities clamped
    /// to [1e-7, 1−1e-7].
    pub fn bce_sum(&mut self, probs: NodeId, labels: &[S]) -> Result<NodeId> {
        let (r, c) = self.shape(probs);
        if labels.len() != r * c {
            return Err(Error::Shape(format!(
                "bce_sum: probs are {r}x{c}, labels have {} entries",
                labels.len()
            )));
        }
        let lo = S::from_f64(BCE_CLAMP);
        let hi = S::ONE - lo;
        let mut loss = S::ZERO;
        for (&p, &l) in self.n(probs).data.iter().zip(labels.iter()) {
            if !p.is_finite() {
                return Err(Error::Numerical("bce_sum: non-finite probability".into()));
            }
            let f = p.maxv(lo).minv(hi);
            loss -= l * f.ln() + (S::ONE - l) * (S::ONE - f).ln();
        }
        let ng = self.n(probs).needs_grad;
        Ok(self.push(
            Op::BceSum {
                probs,
                labels: labels.to_vec(),
            },
            1,
            1,
            vec![loss],
            ng,
        ))
    }

    /// Summed binary cross entropy evaluated on logits (fused with the
    /// sigmoid): Σ max(z,0) − z·l + ln(1+e^{−|z|}). Same value as
    /// sigmoid→bce_sum away from saturation, but the gradient
    /// (sigmoid(z) − l) never vanishes.
    pub fn bce_logits_sum(&mut self, logits: NodeId, labels: &[S]) -> Result<NodeId> {
        let (r, c) = self.shape(logits);
        if labels.len() != r * c {
            return Err(Error::Shape(format!(
                "bce_logits_sum: logits are {r}x{c}, labels have {} entries",
                labels.len()
            )));
        }
        let mut loss = S::ZERO;
        for (&z, &l) in self.n(logits).data.iter().zip(labels.iter()) {
            if !z.is_finite() {
                return Err(Error::Numerical("bce_logits_sum: non-finite logit".into()));
            }
            loss += z.maxv(S::ZERO) - z * l + (S::ONE + (-z.abs()).exp()).ln();
        }
        let ng = self.n(logits).needs_grad;
        Ok(self.push(
            Op::BceLogitsSum {
                logits,
                labels: labels.to_vec(),
            },
            1,
            1,
            vec![loss],
            ng,
        ))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse_const(&mut self, x: NodeId, target: &[S]) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if target.len() != r * c {
            return Err(Error::Shape(format!(
                "mse_const: input is {r}x{c}, target has {} entries",
                target.len()
            )));
        }
        let inv = S::ONE / S::from_usize(r * c);
        let mut loss = S::ZERO;
        for (&v, &t) in self.n(x).data.iter().zip(target.iter()) {
            let d = v - t;
            loss += d * d;
        }
        loss *= inv;
        let ng = self.n(x).needs_grad;
        Ok(self.push(
            Op::MseConst {
                x,
                target: target.to_vec(),
            },
            1,
            1,
            vec![loss],
            ng,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Run reverse-mode accumulation from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let n = self.n(loss);
        if n.rows * n.cols != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be 1x1, got {}x{}",
                n.rows, n.cols
            )));
        }
        if !n.data[0].is_finite() {
            return Err(Error::Numerical(format!(
                "backward: loss is not finite ({})",
                n.data[0]
            )));
        }
        self.nodes[loss.0].grad = Some(vec![S::ONE]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            // inputs always precede node i on the tape
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let g = node.grad.as_ref().unwrap();
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Add(a, b) => {
                    accumulate(before, *a, g);
                    accumulate(before, *b, g);
                }
                Op::AddBias(x, bias) => {
                    accumulate(before, *x, g);
                    let cols = node.cols;
                    if before[bias.0].needs_grad {
                        let bg = grad_buf(&mut before[bias.0]);
                        for r in 0..node.rows {
                            for c in 0..cols {
                                bg[c] += g[r * cols + c];
                            }
                        }
                    }
                }
                Op::Scale(x, factor) => {
                    let factor = *factor;
                    if before[x.0].needs_grad {
                        let xg = grad_buf(&mut before[x.0]);
                        for (gx, &gv) in xg.iter_mut().zip(g.iter()) {
                            *gx += gv * factor;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let m = before[a.0].rows;
                    let kk = before[a.0].cols;
                    let nn = node.cols;
                    if before[a.0].needs_grad {
                        let bdata = before[b.0].data.clone();
                        let ag = grad_buf(&mut before[a.0]);
                        matmul_nt_acc(ag, g, &bdata, m, nn, kk);
                    }
                    if before[b.0].needs_grad {
                        let adata = before[a.0].data.clone();
                        let bg = grad_buf(&mut before[b.0]);
                        matmul_tn_acc(bg, &adata, g, m, kk, nn);
                    }
                }
                Op::Conv1d {
                    x,
                    kernel,
                    ksize,
                    stride,
                } => {
                    let (ksize, stride) = (*ksize, *stride);
                    let din = before[x.0].cols;
                    let dout = node.cols;
                    let t_out = node.rows;
                    if before[x.0].needs_grad {
                        let kdata = before[kernel.0].data.clone();
                        let xg = grad_buf(&mut before[x.0]);
                        for to in 0..t_out {
                            let grow = &g[to * dout..(to + 1) * dout];
                            for j in 0..ksize {
                                let xrow =
                                    &mut xg[(to * stride + j) * din..(to * stride + j + 1) * din];
                                let kblock = &kdata[j * din * dout..(j + 1) * din * dout];
                                // xrow += grow · kblockᵀ
                                matmul_nt_acc(xrow, grow, kblock, 1, dout, din);
                            }
                        }
                    }
                    if before[kernel.0].needs_grad {
                        let xdata = before[x.0].data.clone();
                        let kg = grad_buf(&mut before[kernel.0]);
                        for to in 0..t_out {
                            let grow = &g[to * dout..(to + 1) * dout];
                            for j in 0..ksize {
                                let xrow = &xdata
                                    [(to * stride + j) * din..(to * stride + j + 1) * din];
                                let kblock = &mut kg[j * din * dout..(j + 1) * din * dout];
                                matmul_tn_acc(kblock, xrow, grow, 1, din, dout);
                            }
                        }
                    }
                }
                Op::PadRows { x, before: pre } => {
                    let (xr, xc) = (before[x.0].rows, before[x.0].cols);
                    if before[x.0].needs_grad {
                        let slice = g[pre * xc..(pre + xr) * xc].to_vec();
                        let xg = grad_buf(&mut before[x.0]);
                        for (gx, gv) in xg.iter_mut().zip(slice.iter()) {
                            *gx += *gv;
                        }
                    }
                }
                Op::ConcatRows(a, b) => {
                    let asize = before[a.0].rows * before[a.0].cols;
                    accumulate(before, *a, &g[..asize]);
                    accumulate(before, *b, &g[asize..]);
                }
                Op::SliceRows { x, start } => {
                    let xc = before[x.0].cols;
                    let len = node.rows;
                    if before[x.0].needs_grad {
                        let gcopy = g.clone();
                        let xg = grad_buf(&mut before[x.0]);
                        xg[start * xc..(start + len) * xc]
                            .iter_mut()
                            .zip(gcopy.iter())
                            .for_each(|(gx, gv)| *gx += *gv);
                    }
                }
                Op::Gelu(x) => {
                    if before[x.0].needs_grad {
                        let xdata = before[x.0].data.clone();
                        let xg = grad_buf(&mut before[x.0]);
                        for ((gx, &xv), &gv) in xg.iter_mut().zip(xdata.iter()).zip(g.iter()) {
                            *gx += gv * gelu_bwd(xv);
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    if before[x.0].needs_grad {
                        let out = node.data.clone();
                        let xg = grad_buf(&mut before[x.0]);
                        for ((gx, &s), &gv) in xg.iter_mut().zip(out.iter()).zip(g.iter()) {
                            *gx += gv * s * (S::ONE - s);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    mean,
                    rstd,
                } => {
                    let (r, c) = (node.rows, node.cols);
                    let inv_c = S::ONE / S::from_usize(c);
                    let xdata = before[x.0].data.clone();
                    let gdata = before[gain.0].data.clone();
                    let mean = mean.clone();
                    let rstd = rstd.clone();
                    if before[gain.0].needs_grad {
                        let mut gg = vec![S::ZERO; c];
                        for i in 0..r {
                            for j in 0..c {
                                let xhat = (xdata[i * c + j] - mean[i]) * rstd[i];
                                gg[j] += g[i * c + j] * xhat;
                            }
                        }
                        accumulate(before, *gain, &gg);
                    }
                    if before[bias.0].needs_grad {
                        let mut bg = vec![S::ZERO; c];
                        for i in 0..r {
                            for j in 0..c {
                                bg[j] += g[i * c + j];
                            }
                        }
                        accumulate(before, *bias, &bg);
                    }
                    if before[x.0].needs_grad {
                        let gvec = g.clone();
                        let xg = grad_buf(&mut before[x.0]);
                        for i in 0..r {
                            // dxhat = dy * gain; dx = rstd*(dxhat − mean(dxhat) − xhat*mean(dxhat⊙xhat))
                            let mut mean_dxhat = S::ZERO;
                            let mut mean_dxhat_xhat = S::ZERO;
                            for j in 0..c {
                                let xhat = (xdata[i * c + j] - mean[i]) * rstd[i];
                                let dxhat = gvec[i * c + j] * gdata[j];
                                mean_dxhat += dxhat;
                                mean_dxhat_xhat += dxhat * xhat;
                            }
                            mean_dxhat *= inv_c;
                            mean_dxhat_xhat *= inv_c;
                            for j in 0..c {
                                let xhat = (xdata[i * c + j] - mean[i]) * rstd[i];
                                let dxhat = gvec[i * c + j] * gdata[j];
                                xg[i * c + j] +=
                                    rstd[i] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                            }
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    causal,
                    probs,
                } => {
                    let heads = *heads;
                    let causal = *causal;
                    let d = node.cols;
                    let tq = node.rows;
                    let tk = before[k.0].rows;
                    let dh = d / heads;
                    let scale = S::ONE / S::from_f64((dh as f64).sqrt());
                    let qdata = before[q.0].data.clone();
                    let kdata = before[k.0].data.clone();
                    let vdata = before[v.0].data.clone();
                    let probs = probs.clone();
                    let need_q = before[q.0].needs_grad;
                    let need_k = before[k.0].needs_grad;
                    let need_v = before[v.0].needs_grad;
                    let mut qg = vec![S::ZERO; tq * d];
                    let mut kg = vec![S::ZERO; tk * d];
                    let mut vg = vec![S::ZERO; tk * d];
                    let mut dp = vec![S::ZERO; tk];
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..tq {
                            let limit = if causal { i + 1 } else { tk };
                            let prow = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                            let grow = &g[i * d + off..i * d + off + dh];
                            // dV += Pᵀ dO ; dP = dO Vᵀ
                            let mut dot = S::ZERO;
                            for (j, dpj) in dp.iter_mut().take(limit).enumerate() {
                                let vrow = &vdata[j * d + off..j * d + off + dh];
                                let mut acc = S::ZERO;
                                for t in 0..dh {
                                    acc += grow[t] * vrow[t];
                                }
                                *dpj = acc;
                                dot += acc * prow[j];
                                if need_v {
                                    let vgrow = &mut vg[j * d + off..j * d + off + dh];
                                    for t in 0..dh {
                                        vgrow[t] += prow[j] * grow[t];
                                    }
                                }
                            }
                            if need_q || need_k {
                                let qrow = &qdata[i * d + off..i * d + off + dh];
                                for j in 0..limit {
                                    let ds = prow[j] * (dp[j] - dot) * scale;
                                    if ds == S::ZERO {
                                        continue;
                                    }
                                    let krow = &kdata[j * d + off..j * d + off + dh];
                                    if need_q {
                                        let qgrow = &mut qg[i * d + off..i * d + off + dh];
                                        for t in 0..dh {
                                            qgrow[t] += ds * krow[t];
                                        }
                                    }
                                    if need_k {
                                        let kgrow = &mut kg[j * d + off..j * d + off + dh];
                                        for t in 0..dh {
                                            kgrow[t] += ds * qrow[t];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if need_q {
                        accumulate(before, *q, &qg);
                    }
                    if need_k {
                        accumulate(before, *k, &kg);
                    }
                    if need_v {
                        accumulate(before, *v, &vg);
                    }
                }
                Op::Embedding { table, ids } => {
                    let d = node.cols;
                    if before[table.0].needs_grad {
                        let ids = ids.clone();
                        let gcopy = g.clone();
                        let tg = grad_buf(&mut before[table.0]);
                        for (i, &id) in ids.iter().enumerate() {
                            let grow = &gcopy[i * d..(i + 1) * d];
                            let trow = &mut tg[id * d..(id + 1) * d];
                            for t in 0..d {
                                trow[t] += grow[t];
                            }
                        }
                    }
                }
                Op::MeanRows(x) => {
                    let r = before[x.0].rows;
                    let c = before[x.0].cols;
                    if before[x.0].needs_grad {
                        let inv = S::ONE / S::from_usize(r);
                        let gcopy = g.clone();
                        let xg = grad_buf(&mut before[x.0]);
                        for i in 0..r {
                            for j in 0..c {
                                xg[i * c + j] += gcopy[j] * inv;
                            }
                        }
                    }
                }
                Op::StraightThrough(x) => {
                    accumulate(before, *x, g);
                }
                Op::CrossEntropyMean {
                    logits,
                    targets,
                    probs,
                } => {
                    let vocab = before[logits.0].cols;
                    let m = targets.len();
                    if before[logits.0].needs_grad {
                        let gscalar = g[0] / S::from_usize(m);
                        let targets = targets.clone();
                        let probs = probs.clone();
                        let lg = grad_buf(&mut before[logits.0]);
                        for (t, &y) in targets.iter().enumerate() {
                            for vcol in 0..vocab {
                                let indicator = if vcol == y { S::ONE } else { S::ZERO };
                                lg[t * vocab + vcol] +=
                                    gscalar * (probs[t * vocab + vcol] - indicator);
                            }
                        }
                    }
                }
                Op::BceSum { probs, labels } => {
                    if before[probs.0].needs_grad {
                        let lo = S::from_f64(BCE_CLAMP);
                        let hi = S::ONE - lo;
                        let gscalar = g[0];
                        let labels = labels.clone();
                        let pdata = before[probs.0].data.clone();
                        let pg = grad_buf(&mut before[probs.0]);
                        for ((gp, &p), &l) in pg.iter_mut().zip(pdata.iter()).zip(labels.iter()) {
                            if p <= lo || p >= hi {
                                continue; // gradient of the clamp is zero
                            }
                            *gp += gscalar * (-(l / p) + (S::ONE - l) / (S::ONE - p));
                        }
                    }
                }
                Op::BceLogitsSum { logits, labels } => {
                    if before[logits.0].needs_grad {
                        let gscalar = g[0];
                        let labels = labels.clone();
                        let zdata = before[logits.0].data.clone();
                        let lg = grad_buf(&mut before[logits.0]);
                        for ((gz, &z), &l) in lg.iter_mut().zip(zdata.iter()).zip(labels.iter()) {
                            let s = S::ONE / (S::ONE + (-z).exp());
                            *gz += gscalar * (s - l);
                        }
                    }
                }
                Op::MseConst { x, target } => {
                    if before[x.0].needs_grad {
                        let n = target.len();
                        let factor = g[0] * S::from_f64(2.0) / S::from_usize(n);
                        let target = target.clone();
                        let xdata = before[x.0].data.clone();
                        let xg = grad_buf(&mut before[x.0]);
                        for ((gx, &xv), &tv) in xg.iter_mut().zip(xdata.iter()).zip(target.iter())
                        {
                            *gx += factor * (xv - tv);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Scatter accumulated leaf gradients back into the parameter set.
    /// Frozen parameters never receive gradients (their graph leaves opted
    /// out of the backward pass entirely).
    pub fn accumulate_param_grads(&self, set: &mut ParamSet<S>) {
        for node in &self.nodes {
            if let (Op::Param(pid), Some(g)) = (&node.op, &node.grad) {
                let p = set.get_mut(*pid);
                debug_assert!(p.trainable);
                for (pg, &gv) in p.grad.iter_mut().zip(g.iter()) {
                    *pg += gv;
                }
            }
        }
    }

    /// Leaf gradients keyed by parameter id (used by batch-parallel training).
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<S>)> {
        self.nodes
            .iter()
            .filter_map(|n| match (&n.op, &n.grad) {
                (Op::Param(pid), Some(g)) => Some((*pid, g.clone())),
                _ => None,
            })
            .collect()
    }
}

fn grad_buf<S: Real>(node: &mut Node<S>) -> &mut Vec<S> {
    if node.grad.is_none() {
        node.grad = Some(vec![S::ZERO; node.rows * node.cols]);
    }
    node.grad.as_mut().unwrap()
}

fn accumulate<S: Real>(nodes: &mut [Node<S>], id: NodeId, g: &[S]) {
    if !nodes[id.0].needs_grad {
        return;
    }
    let buf = grad_buf(&mut nodes[id.0]);
    debug_assert_eq!(buf.len(), g.len());
    for (b, &v) in buf.iter_mut().zip(g.iter()) {
        *b += v;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<S: Real>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::ONE + u.tanh())
}

fn gelu_bwd<S: Real>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (S::ONE + three * a * x * x);
    half * (S::ONE + t) + half * x * (S::ONE - t * t) * du
}
