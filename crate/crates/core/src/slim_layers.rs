//! Slimmable transformer blocks.
//!
//! Every weight is registered at full size and each op runs on the leading
//! block selected by a [`SlimSpec`]. With `slim-all` the input, output and
//! intermediate widths shrink together; `slim-intermediate` only shrinks
//! the head count and the FFN hidden width. The per-head width never
//! changes, so narrowing to `d` keeps the first `H·d/D` heads.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::ParamStore;
use crate::error::{shape_err, DstError, Result};
use crate::numerics::{Graph, ParamId, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WidthMode {
    #[default]
    SlimAll,
    SlimIntermediate,
}

impl WidthMode {
    pub fn name(self) -> &'static str {
        match self {
            WidthMode::SlimAll => "slim-all",
            WidthMode::SlimIntermediate => "slim-intermediate",
        }
    }
}

impl fmt::Display for WidthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WidthMode {
    type Err = DstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slim-all" => Ok(WidthMode::SlimAll),
            "slim-intermediate" => Ok(WidthMode::SlimIntermediate),
            _ => Err(DstError::Config(format!("unknown width mode '{s}'"))),
        }
    }
}

/// How one dimension of a weight follows the active width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    /// Never sliced.
    Full,
    /// Representation width: `d` under slim-all, `D` under slim-intermediate.
    Model,
    /// Concatenated head width `Ĥ·D_H`.
    Inner,
    /// FFN hidden width, scaled by `d/D`.
    Ffn,
}

/// Checkpoint tag describing which sides of a tensor can shrink.
pub fn slicing_tag(axes: &[Axis]) -> &'static str {
    let sliced: Vec<bool> = axes.iter().map(|a| *a != Axis::Full).collect();
    match sliced.as_slice() {
        [false] | [false, false] => "unslimmed",
        [true] | [true, false] => "slim-rows",
        [false, true] => "slim-cols",
        _ => "slim-both",
    }
}

/// Reference (unslimmed) block dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDims {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn: usize,
    pub widths: Vec<usize>,
    pub ln_eps: f64,
}

impl LayerDims {
    pub fn inner(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Active width of one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlimSpec {
    /// Selected width `d`.
    pub width: usize,
    /// Active head count `Ĥ = H·d/D`.
    pub heads: usize,
    pub head_dim: usize,
    /// Width of the representations flowing between blocks.
    pub model: usize,
    pub ffn: usize,
    pub mode: WidthMode,
}

impl SlimSpec {
    pub fn new(dims: &LayerDims, width: usize, mode: WidthMode) -> Result<Self> {
        if !dims.widths.contains(&width) {
            return Err(DstError::InvalidWidth(format!(
                "{width} is not in the width set {:?}",
                dims.widths
            )));
        }
        if width == 0 || !(dims.heads * width).is_multiple_of(dims.d_model) || !(dims.ffn * width).is_multiple_of(dims.d_model) {
            return Err(DstError::InvalidWidth(format!(
                "width {width} of {} gives a fractional head count or FFN width",
                dims.d_model
            )));
        }
        let model = match mode {
            WidthMode::SlimAll => width,
            WidthMode::SlimIntermediate => dims.d_model,
        };
        Ok(Self {
            width,
            heads: dims.heads * width / dims.d_model,
            head_dim: dims.head_dim,
            model,
            ffn: dims.ffn * width / dims.d_model,
            mode,
        })
    }

    /// The identity slicing.
    pub fn full(dims: &LayerDims) -> Self {
        Self {
            width: dims.d_model,
            heads: dims.heads,
            head_dim: dims.head_dim,
            model: dims.d_model,
            ffn: dims.ffn,
            mode: WidthMode::SlimAll,
        }
    }

    pub fn inner(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn extent(&self, axis: Axis, full: usize) -> usize {
        match axis {
            Axis::Full => full,
            Axis::Model => self.model,
            Axis::Inner => self.inner(),
            Axis::Ffn => self.ffn,
        }
    }
}

/// Leading-block extents of a tensor with the given `axes` under `spec`.
pub fn slice_width(axes: &[Axis], master_shape: &[usize], spec: &SlimSpec) -> Vec<usize> {
    axes.iter()
        .zip(master_shape)
        .map(|(&a, &full)| spec.extent(a, full))
        .collect()
}

/// Graph view of parameter `id` sliced for `spec`.
pub fn view(g: &mut Graph, store: &ParamStore, id: ParamId, spec: &SlimSpec) -> Result<Var> {
    let entry = store.entry(id);
    let ext = slice_width(&entry.axes, entry.tensor.shape(), spec);
    g.param(store, id, &ext)
}

/// How freshly registered tensors are filled. Draws happen in registration
/// order, one normal per element in row-major order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal with std `1/√rows`.
    Weight,
    /// Normal with std 1.
    Embedding,
    Zeros,
    Ones,
    Identity,
}

pub(crate) fn init_tensor(shape: &[usize], init: Init, rng: &mut Rng) -> Tensor {
    match init {
        Init::Weight => Tensor::randn(shape, 1.0 / (shape[0] as f64).sqrt(), rng),
        Init::Embedding => Tensor::randn(shape, 1.0, rng),
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
        Init::Identity => {
            let mut t = Tensor::zeros(shape);
            let cols = shape[1];
            for i in 0..shape[0].min(cols) {
                t.data_mut()[i * cols + i] = 1.0;
            }
            t
        }
    }
}

/// Registers tensors under a common name prefix.
pub struct Registrar<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl Registrar<'_> {
    pub fn add(&mut self, name: String, shape: &[usize], axes: &[Axis], init: Init) -> ParamId {
        let t = init_tensor(shape, init, self.rng);
        self.store.insert(name, t, axes.to_vec())
    }
}

/// Projection weights of one multi-head attention block. The query, key
/// and value matrices hold `H` column blocks of `D_H` each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MhaWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bq: ParamId,
    pub bk: ParamId,
    pub bv: ParamId,
    pub bo: ParamId,
    pub heads: usize,
    pub head_dim: usize,
}

impl MhaWeights {
    pub fn register(r: &mut Registrar<'_>, prefix: &str, dims: &LayerDims) -> Self {
        let (d, inner) = (dims.d_model, dims.inner());
        let proj = [Axis::Model, Axis::Inner];
        let wq = r.add(format!("{prefix}.wq"), &[d, inner], &proj, Init::Weight);
        let wk = r.add(format!("{prefix}.wk"), &[d, inner], &proj, Init::Weight);
        let wv = r.add(format!("{prefix}.wv"), &[d, inner], &proj, Init::Weight);
        let wo = r.add(format!("{prefix}.wo"), &[inner, d], &[Axis::Inner, Axis::Model], Init::Weight);
        let bq = r.add(format!("{prefix}.bq"), &[inner], &[Axis::Inner], Init::Zeros);
        let bk = r.add(format!("{prefix}.bk"), &[inner], &[Axis::Inner], Init::Zeros);
        let bv = r.add(format!("{prefix}.bv"), &[inner], &[Axis::Inner], Init::Zeros);
        let bo = r.add(format!("{prefix}.bo"), &[d], &[Axis::Model], Init::Zeros);
        Self {
            wq,
            wk,
            wv,
            wo,
            bq,
            bk,
            bv,
            bo,
            heads: dims.heads,
            head_dim: dims.head_dim,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.wq, self.wk, self.wv, self.wo, self.bq, self.bk, self.bv, self.bo]
    }
}

/// `ReLU(X·W1 + b1)·W2ᵀ + b2`, with `W1, W2: D × 4D`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FfnWeights {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnWeights {
    pub fn register(r: &mut Registrar<'_>, prefix: &str, dims: &LayerDims) -> Self {
        let (d, f) = (dims.d_model, dims.ffn);
        let both = [Axis::Model, Axis::Ffn];
        let w1 = r.add(format!("{prefix}.w1"), &[d, f], &both, Init::Weight);
        let b1 = r.add(format!("{prefix}.b1"), &[f], &[Axis::Ffn], Init::Zeros);
        // W2 is applied transposed, so its fan-in is the hidden width.
        let w2 = r.add(format!("{prefix}.w2"), &[d, f], &both, Init::Zeros);
        let w2_init = Tensor::randn(&[d, f], 1.0 / (f as f64).sqrt(), r.rng);
        *r.store.tensor_mut(w2) = w2_init;
        let b2 = r.add(format!("{prefix}.b2"), &[d], &[Axis::Model], Init::Zeros);
        Self { w1, b1, w2, b2 }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LnWeights {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LnWeights {
    pub fn register(r: &mut Registrar<'_>, prefix: &str, width: usize, axis: Axis, eps: f64) -> Self {
        let gamma = r.add(format!("{prefix}.gamma"), &[width], &[axis], Init::Ones);
        let beta = r.add(format!("{prefix}.beta"), &[width], &[axis], Init::Zeros);
        Self { gamma, beta, eps }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerWeights {
    pub attn: MhaWeights,
    pub ln1: LnWeights,
    pub ffn: FfnWeights,
    pub ln2: LnWeights,
}

impl EncoderLayerWeights {
    pub fn register(r: &mut Registrar<'_>, prefix: &str, dims: &LayerDims) -> Self {
        Self {
            attn: MhaWeights::register(r, &format!("{prefix}.attn"), dims),
            ln1: LnWeights::register(r, &format!("{prefix}.ln1"), dims.d_model, Axis::Model, dims.ln_eps),
            ffn: FfnWeights::register(r, &format!("{prefix}.ffn"), dims),
            ln2: LnWeights::register(r, &format!("{prefix}.ln2"), dims.d_model, Axis::Model, dims.ln_eps),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.attn.ids(), self.ln1.ids(), self.ffn.ids(), self.ln2.ids()].concat()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayerWeights {
    pub self_attn: MhaWeights,
    pub ln1: LnWeights,
    pub guided_attn: MhaWeights,
    pub ln2: LnWeights,
    pub ffn: FfnWeights,
    pub ln3: LnWeights,
}

impl DecoderLayerWeights {
    pub fn register(r: &mut Registrar<'_>, prefix: &str, dims: &LayerDims) -> Self {
        let eps = dims.ln_eps;
        Self {
            self_attn: MhaWeights::register(r, &format!("{prefix}.self_attn"), dims),
            ln1: LnWeights::register(r, &format!("{prefix}.ln1"), dims.d_model, Axis::Model, eps),
            guided_attn: MhaWeights::register(r, &format!("{prefix}.guided_attn"), dims),
            ln2: LnWeights::register(r, &format!("{prefix}.ln2"), dims.d_model, Axis::Model, eps),
            ffn: FfnWeights::register(r, &format!("{prefix}.ffn"), dims),
            ln3: LnWeights::register(r, &format!("{prefix}.ln3"), dims.d_model, Axis::Model, eps),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [
            self.self_attn.ids(),
            self.ln1.ids(),
            self.guided_attn.ids(),
            self.ln2.ids(),
            self.ffn.ids(),
            self.ln3.ids(),
        ]
        .concat()
    }
}

fn check_width(g: &Graph, x: Var, spec: &SlimSpec, op: &'static str) -> Result<()> {
    let cols = g.value(x).cols();
    if cols != spec.model {
        return Err(shape_err(op, format!("input width {cols}, active width {}", spec.model)));
    }
    Ok(())
}

/// Single-head scaled dot-product attention `softmax(Q Kᵀ/√D_H)·V`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (rq, rk) = (g.value(q).rows(), g.value(k).rows());
    g.attention(q, k, v, 1, rq, rk)
}

/// Output of a multi-head attention block; `probs` is the attention node
/// whose probabilities can be read back with [`Graph::attention_probs`].
#[derive(Clone, Copy, Debug)]
pub struct MhaOut {
    pub out: Var,
    pub probs: Var,
}

/// `[head_1 … head_Ĥ]·Wo + bo` with `head_j = ATT(Xq·Wq_j, Xkv·Wk_j, Xkv·Wv_j)`.
///
/// `xq` holds segments of `seg_q` rows and `xkv` segments of `seg_kv` rows;
/// segment `b` of the queries only sees segment `b` of the keys.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    xq: Var,
    xkv: Var,
    w: &MhaWeights,
    spec: &SlimSpec,
    seg_q: usize,
    seg_kv: usize,
) -> Result<MhaOut> {
    check_width(g, xq, spec, "multi_head_attention")?;
    check_width(g, xkv, spec, "multi_head_attention")?;
    let wq = view(g, store, w.wq, spec)?;
    let wk = view(g, store, w.wk, spec)?;
    let wv = view(g, store, w.wv, spec)?;
    let bq = view(g, store, w.bq, spec)?;
    let bk = view(g, store, w.bk, spec)?;
    let bv = view(g, store, w.bv, spec)?;
    let q = g.matmul(xq, wq)?;
    let q = g.add_row(q, bq)?;
    let k = g.matmul(xkv, wk)?;
    let k = g.add_row(k, bk)?;
    let v = g.matmul(xkv, wv)?;
    let v = g.add_row(v, bv)?;
    let heads = g.attention(q, k, v, spec.heads, seg_q, seg_kv)?;
    let wo = view(g, store, w.wo, spec)?;
    let bo = view(g, store, w.bo, spec)?;
    let out = g.matmul(heads, wo)?;
    let out = g.add_row(out, bo)?;
    Ok(MhaOut { out, probs: heads })
}

pub fn feed_forward(g: &mut Graph, store: &ParamStore, x: Var, w: &FfnWeights, spec: &SlimSpec) -> Result<Var> {
    check_width(g, x, spec, "feed_forward")?;
    let w1 = view(g, store, w.w1, spec)?;
    let b1 = view(g, store, w.b1, spec)?;
    let w2 = view(g, store, w.w2, spec)?;
    let b2 = view(g, store, w.b2, spec)?;
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h)?;
    let out = g.matmul_bt(h, w2)?;
    g.add_row(out, b2)
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, x: Var, w: &LnWeights, spec: &SlimSpec) -> Result<Var> {
    if g.value(x).cols() == 0 {
        return Err(shape_err("layer_norm", "zero width"));
    }
    let gamma = view(g, store, w.gamma, spec)?;
    let beta = view(g, store, w.beta, spec)?;
    g.layer_norm(x, gamma, beta, w.eps)
}

/// Output of one encoder or decoder layer with its attention nodes.
#[derive(Clone, Debug)]
pub struct LayerOut {
    pub out: Var,
    pub self_attn: Var,
    pub guided_attn: Option<Var>,
}

/// `F̂ = LN(MHA(X,X,X) + X)`, `F = LN(FFN(F̂) + F̂)`.
pub fn encoder_layer(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    w: &EncoderLayerWeights,
    spec: &SlimSpec,
    seg: usize,
) -> Result<LayerOut> {
    let att = multi_head_attention(g, store, x, x, &w.attn, spec, seg, seg)?;
    let h = g.add(att.out, x)?;
    let h = layer_norm(g, store, h, &w.ln1, spec)?;
    let f = feed_forward(g, store, h, &w.ffn, spec)?;
    let f = g.add(f, h)?;
    let out = layer_norm(g, store, f, &w.ln2, spec)?;
    Ok(LayerOut {
        out,
        self_attn: att.probs,
        guided_attn: None,
    })
}

/// Self-attention, then guided attention from `x` onto `y`, then FFN; each
/// followed by a residual and layer norm.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    y: Var,
    w: &DecoderLayerWeights,
    spec: &SlimSpec,
    seg_x: usize,
    seg_y: usize,
) -> Result<LayerOut> {
    if g.value(x).cols() != g.value(y).cols() {
        return Err(shape_err(
            "decoder_layer",
            format!("modality widths {} and {}", g.value(x).cols(), g.value(y).cols()),
        ));
    }
    let sa = multi_head_attention(g, store, x, x, &w.self_attn, spec, seg_x, seg_x)?;
    let x1 = g.add(sa.out, x)?;
    let x1 = layer_norm(g, store, x1, &w.ln1, spec)?;
    let ga = multi_head_attention(g, store, x1, y, &w.guided_attn, spec, seg_x, seg_y)?;
    let x2 = g.add(ga.out, x1)?;
    let x2 = layer_norm(g, store, x2, &w.ln2, spec)?;
    let f = feed_forward(g, store, x2, &w.ffn, spec)?;
    let f = g.add(f, x2)?;
    let out = layer_norm(g, store, f, &w.ln3, spec)?;
    Ok(LayerOut {
        out,
        self_attn: sa.probs,
        guided_attn: Some(ga.probs),
    })
}
