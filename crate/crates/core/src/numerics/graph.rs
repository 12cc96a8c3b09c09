//! Reverse-mode tape.
//!
//! A [`Graph`] records every op of one forward pass together with its
//! value. [`Graph::backward`] walks the nodes in reverse creation order and
//! applies each op's backward rule; gradients of parameter leaves are then
//! scattered into full-size master buffers by [`Graph::accumulate`].
//!
//! Parameter leaves are *views*: the leaf value is the leading block of a
//! master tensor, and its gradient lands in exactly that block of the
//! master gradient buffer.
//!
//! FLOPs are counted as the ops execute: a product of `(a×b)·(b×c)` costs
//! `2abc`, element-wise ops cost one per output element, softmax and layer
//! norm cost [`SOFTMAX_FLOPS`] / [`LAYER_NORM_FLOPS`] per element.

use std::collections::HashMap;

use crate::error::{shape_err, DstError, Result};
use crate::numerics::kernels::{self, add_assign};
use crate::numerics::Tensor;

pub const SOFTMAX_FLOPS: u64 = 5;
pub const LAYER_NORM_FLOPS: u64 = 5;

/// Probabilities below this are clamped before taking a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

pub type ParamId = usize;

/// Anything that owns master parameter tensors addressable by id.
pub trait ParamSource {
    fn param_tensor(&self, id: ParamId) -> &Tensor;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param { id: ParamId, master_shape: Vec<usize> },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, seg_q: usize, seg_kv: usize, probs: Vec<f64> },
    GatherRows { sources: Vec<Var>, index: Vec<(usize, usize)> },
    Reshape(Var),
    SegmentWeightedSum { alpha: Var, x: Var },
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    KlDiv { logits: Var, probs: Vec<f64>, target: Vec<f64> },
    Bce { logits: Var, sig: Vec<f64>, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded ops.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_cache: HashMap<(ParamId, Vec<usize>), Var>,
    no_grad: bool,
    flops: u64,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl NodeGrads {
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Master-shaped gradient buffers, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore {
    bufs: Vec<Vec<f64>>,
}

impl GradStore {
    pub fn zeros_like<P: ParamSource + ?Sized>(src: &P, count: usize) -> Self {
        Self {
            bufs: (0..count).map(|id| vec![0.0; src.param_tensor(id).numel()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id]
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.bufs.iter().map(Vec::as_slice)
    }
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DstError::NonFinite(op))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameter leaves never require gradients.
    pub fn no_grad() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `input > 0` for every ReLU element, in recording order. Two forward
    /// passes with equal patterns lie on the same smooth piece of the loss.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    /// FLOPs executed so far by this graph's ops.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn finish(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        check_finite(&data, name)?;
        let value = Tensor::new(shape, data)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, op, rg))
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf that collects a gradient (used by gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leading-block view of master parameter `id`. Repeated requests for
    /// the same block return the same node.
    pub fn param<P: ParamSource + ?Sized>(&mut self, src: &P, id: ParamId, extents: &[usize]) -> Result<Var> {
        let key = (id, extents.to_vec());
        if let Some(&v) = self.param_cache.get(&key) {
            return Ok(v);
        }
        let master = src.param_tensor(id);
        let value = master.leading_block(extents)?;
        let op = Op::Param {
            id,
            master_shape: master.shape().to_vec(),
        };
        let v = self.push(value, op, !self.no_grad);
        self.param_cache.insert(key, v);
        Ok(v)
    }

    /// `(id, extents)` of every parameter view in the graph, in creation order.
    pub fn param_views(&self) -> Vec<(ParamId, Vec<usize>)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param { id, .. } => Some((*id, n.value.shape().to_vec())),
                _ => None,
            })
            .collect()
    }

    fn mat_dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a);
        let (k2, n) = self.mat_dims(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} by {k2}x{n}")));
        }
        let c = kernels::gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.flops += 2 * (m * k * n) as u64;
        self.finish(vec![m, n], c, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a);
        let (n, k2) = self.mat_dims(b);
        if k != k2 {
            return Err(shape_err("matmul_bt", format!("{m}x{k} by ({n}x{k2})ᵀ")));
        }
        let c = kernels::gemm_bt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.flops += 2 * (m * k * n) as u64;
        self.finish(vec![m, n], c, Op::MatMulBt(a, b), &[a, b], "matmul_bt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        self.flops += data.len() as u64;
        self.finish(shape, data, Op::Add(a, b), &[a, b], "add")
    }

    /// Adds the vector `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let cols = tx.cols();
        if tb.numel() != cols {
            return Err(shape_err("add_row", format!("{:?} + row {:?}", tx.shape(), tb.shape())));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            add_assign(row, tb.data());
        }
        let shape = tx.shape().to_vec();
        self.flops += data.len() as u64;
        self.finish(shape, data, Op::AddRow(x, bias), &[x, bias], "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", format!("{:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        self.flops += data.len() as u64;
        self.finish(shape, data, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let data: Vec<f64> = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        self.flops += data.len() as u64;
        self.finish(shape, data, Op::Scale(x, c), &[x], "scale")
    }

    /// `max(0, x)`; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data: Vec<f64> = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = t.shape().to_vec();
        self.flops += data.len() as u64;
        self.finish(shape, data, Op::Relu(x), &[x], "relu")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        self.flops += SOFTMAX_FLOPS * data.len() as u64;
        self.finish(shape, data, Op::SoftmaxRows(x), &[x], "softmax_rows")
    }

    /// Layer norm over the last dimension: `γ·(x−μ)/√(σ²+ε) + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if tg.numel() != d || tb.numel() != d {
            return Err(shape_err(
                "layer_norm",
                format!("features {d}, gamma {:?}, beta {:?}", tg.shape(), tb.shape()),
            ));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let xr = &tx.data()[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (xr[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        self.flops += LAYER_NORM_FLOPS * out.len() as u64;
        self.finish(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    /// Multi-head scaled dot-product attention over per-sample segments.
    ///
    /// `q` holds `B·seg_q` rows and `k`, `v` hold `B·seg_kv` rows; row block
    /// `b` of `q` only attends to row block `b` of `k`/`v`. Columns are
    /// `heads` contiguous blocks of equal width. Each head computes
    /// `softmax(Q Kᵀ / √d_h) V`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seg_q: usize, seg_kv: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let width = tq.cols();
        if heads == 0 || width % heads != 0 || tk.cols() != width || tv.cols() != width {
            return Err(shape_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}, heads {heads}", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        if seg_q == 0 || seg_kv == 0 || tq.rows() % seg_q != 0 {
            return Err(shape_err("attention", format!("{} query rows in segments of {seg_q}", tq.rows())));
        }
        let batch = tq.rows() / seg_q;
        if tk.rows() != batch * seg_kv || tv.rows() != batch * seg_kv {
            return Err(shape_err(
                "attention",
                format!("{batch} segments need {} key rows, got {}/{}", batch * seg_kv, tk.rows(), tv.rows()),
            ));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seg_q * seg_kv];
        let mut out = vec![0.0; tq.numel()];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for b in 0..batch {
            for h in 0..heads {
                let p_base = ((b * heads + h) * seg_q) * seg_kv;
                for i in 0..seg_q {
                    let qrow = &qd[(b * seg_q + i) * width + h * dh..][..dh];
                    let prow = &mut probs[p_base + i * seg_kv..][..seg_kv];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let krow = &kd[(b * seg_kv + j) * width + h * dh..][..dh];
                        let mut dot = 0.0;
                        for t in 0..dh {
                            dot += qrow[t] * krow[t];
                        }
                        *p = dot * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(b * seg_q + i) * width + h * dh..][..dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let vrow = &vd[(b * seg_kv + j) * width + h * dh..][..dh];
                        for t in 0..dh {
                            orow[t] += p * vrow[t];
                        }
                    }
                }
            }
        }
        let shape = vec![tq.rows(), width];
        let scores = (batch * heads * seg_q * seg_kv) as u64;
        // QKᵀ and PV products, the scaling, and the softmax.
        self.flops += 4 * scores * dh as u64 + scores + SOFTMAX_FLOPS * scores;
        self.finish(
            shape,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seg_q,
                seg_kv,
                probs,
            },
            &[q, k, v],
            "attention",
        )
    }

    /// Attention probabilities recorded by an [`Graph::attention`] node, laid
    /// out as `[segment][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], usize, usize, usize)> {
        match &self.nodes[v.0].op {
            Op::Attention {
                probs,
                heads,
                seg_q,
                seg_kv,
                ..
            } => Some((probs, *heads, *seg_q, *seg_kv)),
            _ => None,
        }
    }

    /// Stacks rows picked from `sources`; `index[r] = (source, row)`.
    pub fn gather_rows(&mut self, sources: &[Var], index: Vec<(usize, usize)>) -> Result<Var> {
        let cols = match sources.first() {
            Some(&s) => self.value(s).cols(),
            None => return Err(shape_err("gather_rows", "no sources")),
        };
        if sources.iter().any(|&s| self.value(s).cols() != cols) {
            return Err(shape_err("gather_rows", "sources differ in width"));
        }
        if index.is_empty() {
            return Err(shape_err("gather_rows", "empty index"));
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &(s, r) in &index {
            let src = self.value(*sources.get(s).ok_or_else(|| shape_err("gather_rows", "bad source"))?);
            if r >= src.rows() {
                return Err(shape_err("gather_rows", format!("row {r} of {}", src.rows())));
            }
            data.extend_from_slice(src.row(r));
        }
        let shape = vec![index.len(), cols];
        let sources = sources.to_vec();
        let inputs = sources.clone();
        self.finish(shape, data, Op::GatherRows { sources, index }, &inputs, "gather_rows")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `out[b] = Σ_i alpha[b,i] · x[b·n + i]` with `alpha: B×n`, `x: B·n×C`.
    pub fn segment_weighted_sum(&mut self, alpha: Var, x: Var) -> Result<Var> {
        let (ta, tx) = (self.value(alpha), self.value(x));
        let (batch, n) = (ta.rows(), ta.cols());
        let c = tx.cols();
        if tx.rows() != batch * n {
            return Err(shape_err("segment_weighted_sum", format!("alpha {batch}x{n}, x {:?}", tx.shape())));
        }
        let mut out = vec![0.0; batch * c];
        for b in 0..batch {
            let orow = &mut out[b * c..(b + 1) * c];
            for i in 0..n {
                let a = ta.data()[b * n + i];
                for (o, xv) in orow.iter_mut().zip(tx.row(b * n + i)) {
                    *o += a * xv;
                }
            }
        }
        self.flops += 2 * (batch * n * c) as u64;
        self.finish(vec![batch, c], out, Op::SegmentWeightedSum { alpha, x }, &[alpha, x], "segment_weighted_sum")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum::<f64>();
        self.finish(vec![1], vec![s], Op::Sum(x), &[x], "sum")
    }

    /// Mean softmax cross-entropy of `logits` (B×A) against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (batch, classes) = (t.rows(), t.cols());
        if labels.len() != batch || labels.iter().any(|&y| y >= classes) {
            return Err(shape_err("cross_entropy", format!("{batch}x{classes} logits, labels {labels:?}")));
        }
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for b in 0..batch {
            let row = t.row(b);
            let logp = log_softmax(row);
            loss -= logp[labels[b]];
            for j in 0..classes {
                probs[b * classes + j] = logp[j].exp();
            }
        }
        loss /= batch as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.finish(vec![1], vec![loss], op, &[logits], "cross_entropy")
    }

    /// Mean over rows of `KL(softmax(target) ‖ softmax(logits))`; the
    /// target logits are constants.
    pub fn kl_div(&mut self, logits: Var, target_logits: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.shape() != target_logits.shape() {
            return Err(shape_err("kl_div", format!("{:?} vs {:?}", t.shape(), target_logits.shape())));
        }
        let (batch, classes) = (t.rows(), t.cols());
        let mut probs = vec![0.0; batch * classes];
        let mut target = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for b in 0..batch {
            let logp = log_softmax(t.row(b));
            let logt = log_softmax(target_logits.row(b));
            for j in 0..classes {
                let tj = logt[j].exp();
                loss += tj * (logt[j] - logp[j]);
                probs[b * classes + j] = logp[j].exp();
                target[b * classes + j] = tj;
            }
        }
        loss /= batch as f64;
        self.finish(vec![1], vec![loss], Op::KlDiv { logits, probs, target }, &[logits], "kl_div")
    }

    /// Mean element-wise binary cross-entropy of `sigmoid(logits)` against
    /// `sigmoid(target_logits)`. Log arguments are clamped at [`LOG_CLAMP`].
    pub fn bce_with_logits(&mut self, logits: Var, target_logits: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.shape() != target_logits.shape() {
            return Err(shape_err("bce", format!("{:?} vs {:?}", t.shape(), target_logits.shape())));
        }
        let n = t.numel();
        let sig: Vec<f64> = t.data().iter().map(|&s| sigmoid(s)).collect();
        let target: Vec<f64> = target_logits.data().iter().map(|&s| sigmoid(s)).collect();
        let mut loss = 0.0;
        for (p, y) in sig.iter().zip(&target) {
            loss -= y * p.max(LOG_CLAMP).ln() + (1.0 - y) * (1.0 - p).max(LOG_CLAMP).ln();
        }
        loss /= n as f64;
        self.finish(vec![1], vec![loss], Op::Bce { logits, sig, target }, &[logits], "bce")
    }

    /// Reverse pass from the scalar `root`, seeded with gradient 1.
    pub fn backward(&self, root: Var) -> Result<NodeGrads> {
        if self.value(root).numel() != 1 {
            return Err(shape_err("backward", format!("root must be scalar, got {:?}", self.value(root).shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(NodeGrads { grads })
    }

    /// Scatter parameter-view gradients into `store`, in node order.
    pub fn accumulate(&self, grads: &NodeGrads, store: &mut GradStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            let (Op::Param { id, master_shape }, Some(g)) = (&node.op, grads.grads[i].as_ref()) else {
                continue;
            };
            let buf = &mut store.bufs[*id];
            let ext = node.value.shape();
            match master_shape.len() {
                1 => add_assign(&mut buf[..ext[0]], g),
                _ => {
                    let cols = master_shape[1];
                    for r in 0..ext[0] {
                        add_assign(&mut buf[r * cols..r * cols + ext[1]], &g[r * ext[1]..(r + 1) * ext[1]]);
                    }
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => add_assign(existing, &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.mat_dims(a);
                let n = self.mat_dims(b).1;
                if self.rg(a) {
                    let da = kernels::gemm_bt(g, self.value(b).data(), m, n, k);
                    self.acc(grads, a, da);
                }
                if self.rg(b) {
                    let db = kernels::gemm_at(self.value(a).data(), g, m, k, n);
                    self.acc(grads, b, db);
                }
            }
            &Op::MatMulBt(a, b) => {
                let (m, k) = self.mat_dims(a);
                let n = self.mat_dims(b).0;
                if self.rg(a) {
                    let da = kernels::gemm(g, self.value(b).data(), m, n, k);
                    self.acc(grads, a, da);
                }
                if self.rg(b) {
                    let db = kernels::gemm_at(g, self.value(a).data(), m, n, k);
                    self.acc(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, g.to_vec());
                self.acc(grads, b, g.to_vec());
            }
            &Op::AddRow(x, bias) => {
                self.acc(grads, x, g.to_vec());
                if self.rg(bias) {
                    let cols = self.value(bias).numel();
                    let mut db = vec![0.0; cols];
                    for row in g.chunks_exact(cols) {
                        add_assign(&mut db, row);
                    }
                    self.acc(grads, bias, db);
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a).data(), self.value(b).data());
                if self.rg(a) {
                    self.acc(grads, a, g.iter().zip(tb).map(|(g, y)| g * y).collect());
                }
                if self.rg(b) {
                    self.acc(grads, b, g.iter().zip(ta).map(|(g, x)| g * x).collect());
                }
            }
            &Op::Scale(x, c) => self.acc(grads, x, g.iter().map(|v| v * c).collect()),
            &Op::Relu(x) => {
                let tx = self.value(x).data();
                let dx = g.iter().zip(tx).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
                self.acc(grads, x, dx);
            }
            &Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_exact_mut(cols).zip(y.chunks_exact(cols)).zip(g.chunks_exact(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                let rows = xhat.len() / d;
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; xhat.len()];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gam[j];
                    }
                    let mean_dh = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dh_h = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    let inv = inv_std[r];
                    for j in 0..d {
                        dx[r * d + j] = inv * (dxhat[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seg_q,
                seg_kv,
                probs,
            } => {
                let (heads, seg_q, seg_kv) = (*heads, *seg_q, *seg_kv);
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let width = self.value(*q).cols();
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let batch = self.value(*q).rows() / seg_q;
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut ds = vec![0.0; seg_kv];
                for b in 0..batch {
                    for h in 0..heads {
                        let p_base = ((b * heads + h) * seg_q) * seg_kv;
                        for i in 0..seg_q {
                            let prow = &probs[p_base + i * seg_kv..][..seg_kv];
                            let go = &g[(b * seg_q + i) * width + h * dh..][..dh];
                            // dP = dO · Vᵀ, dV += Pᵀ · dO
                            for j in 0..seg_kv {
                                let off = (b * seg_kv + j) * width + h * dh;
                                let vrow = &vd[off..off + dh];
                                let mut dot = 0.0;
                                for t in 0..dh {
                                    dot += go[t] * vrow[t];
                                }
                                ds[j] = dot;
                                let dvrow = &mut dv[off..off + dh];
                                for t in 0..dh {
                                    dvrow[t] += prow[j] * go[t];
                                }
                            }
                            let pd: f64 = prow.iter().zip(&ds).map(|(p, d)| p * d).sum();
                            let qoff = (b * seg_q + i) * width + h * dh;
                            for j in 0..seg_kv {
                                let s = prow[j] * (ds[j] - pd) * scale;
                                let koff = (b * seg_kv + j) * width + h * dh;
                                for t in 0..dh {
                                    dq[qoff + t] += s * kd[koff + t];
                                    dk[koff + t] += s * qd[qoff + t];
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *q, dq);
                self.acc(grads, *k, dk);
                self.acc(grads, *v, dv);
            }
            Op::GatherRows { sources, index } => {
                let cols = node.value.cols();
                let mut per_source: Vec<Option<Vec<f64>>> = sources
                    .iter()
                    .map(|&s| self.rg(s).then(|| vec![0.0; self.value(s).numel()]))
                    .collect();
                for (r, &(s, row)) in index.iter().enumerate() {
                    if let Some(buf) = &mut per_source[s] {
                        add_assign(&mut buf[row * cols..(row + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
                for (&s, buf) in sources.iter().zip(per_source) {
                    if let Some(buf) = buf {
                        self.acc(grads, s, buf);
                    }
                }
            }
            &Op::Reshape(x) => self.acc(grads, x, g.to_vec()),
            &Op::SegmentWeightedSum { alpha, x } => {
                let (ta, tx) = (self.value(alpha), self.value(x));
                let (batch, n) = (ta.rows(), ta.cols());
                let c = tx.cols();
                let mut dalpha = vec![0.0; batch * n];
                let mut dx = vec![0.0; tx.numel()];
                for b in 0..batch {
                    let gr = &g[b * c..(b + 1) * c];
                    for i in 0..n {
                        let r = b * n + i;
                        dalpha[r] = gr.iter().zip(tx.row(r)).map(|(a, b)| a * b).sum();
                        let a = ta.data()[r];
                        for (d, gv) in dx[r * c..(r + 1) * c].iter_mut().zip(gr) {
                            *d = a * gv;
                        }
                    }
                }
                self.acc(grads, alpha, dalpha);
                self.acc(grads, x, dx);
            }
            &Op::Sum(x) => {
                let n = self.value(x).numel();
                self.acc(grads, x, vec![g[0]; n]);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = self.value(*logits).cols();
                let batch = labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0] / batch).collect();
                for (b, &y) in labels.iter().enumerate() {
                    d[b * classes + y] -= g[0] / batch;
                }
                self.acc(grads, *logits, d);
            }
            Op::KlDiv { logits, probs, target } => {
                let batch = self.value(*logits).rows() as f64;
                let d = probs.iter().zip(target).map(|(p, t)| (p - t) * g[0] / batch).collect();
                self.acc(grads, *logits, d);
            }
            Op::Bce { logits, sig, target } => {
                let n = sig.len() as f64;
                let d = sig
                    .iter()
                    .zip(target)
                    .map(|(&p, &y)| {
                        let mut ds = 0.0;
                        if p > LOG_CLAMP {
                            ds -= y * (1.0 - p);
                        }
                        if 1.0 - p > LOG_CLAMP {
                            ds += (1.0 - y) * p;
                        }
                        ds * g[0] / n
                    })
                    .collect();
                self.acc(grads, *logits, d);
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
