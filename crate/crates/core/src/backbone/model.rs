use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Variant};
use super::params::ParamStore;
use crate::error::{shape_err, DstError, Result};
use crate::numerics::{Graph, ParamId, Rng, Tensor, Var};
use crate::slim_layers::{
    decoder_layer, encoder_layer, layer_norm, view, Axis, DecoderLayerWeights, EncoderLayerWeights, Init, LayerDims,
    LnWeights, Registrar, SlimSpec,
};
use crate::slim_space::{ArchDescriptor, ArchSpace};
use crate::synthdata::{Sample, REGION_FEAT_DIM};

/// Initial value of the embedding bridge `W_emb`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbInit {
    /// Identity (rectangular identity when the widths differ).
    #[default]
    Identity,
    /// Normal with std `1/√D`.
    Random,
}

/// Scoring MLP `d → d → 1` of an attentional reduction. The output bias is
/// omitted: the softmax over scores ignores it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReduceWeights {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
}

impl ReduceWeights {
    fn register(r: &mut Registrar<'_>, prefix: &str, dims: &LayerDims) -> Self {
        let (d, inner) = (dims.d_model, dims.inner());
        Self {
            w1: r.add(format!("{prefix}.w1"), &[d, inner], &[Axis::Model, Axis::Inner], Init::Weight),
            b1: r.add(format!("{prefix}.b1"), &[inner], &[Axis::Inner], Init::Zeros),
            w2: r.add(format!("{prefix}.w2"), &[inner, 1], &[Axis::Inner, Axis::Full], Init::Weight),
        }
    }
}

/// Parameter ids of every block, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub tokens: ParamId,
    pub region_w: ParamId,
    pub region_b: ParamId,
    pub cls_token: Option<ParamId>,
    pub w_emb: ParamId,
    pub encoder: Vec<EncoderLayerWeights>,
    pub decoder: Vec<DecoderLayerWeights>,
    pub reduce_q: Option<ReduceWeights>,
    pub reduce_v: Option<ReduceWeights>,
    pub fuse_q: ParamId,
    pub fuse_v: Option<ParamId>,
    pub fuse_ln: LnWeights,
    pub classifier_w: ParamId,
    pub classifier_b: ParamId,
}

impl Layout {
    fn register(cfg: &ModelConfig, dims: &LayerDims, r: &mut Registrar<'_>, emb: EmbInit) -> Self {
        let (e, d) = (cfg.embed_dim(), cfg.d_model);
        let full = [Axis::Full, Axis::Full];
        let tokens = r.add("embed.tokens".into(), &[cfg.vocab_size, e], &full, Init::Embedding);
        let region_w = r.add("embed.regions.w".into(), &[cfg.region_feat_dim, e], &full, Init::Weight);
        let region_b = r.add("embed.regions.b".into(), &[e], &[Axis::Full], Init::Zeros);
        let unified = cfg.variant == Variant::UnifiedEncoder;
        let cls_token = unified.then(|| r.add("embed.cls".into(), &[1, e], &full, Init::Embedding));
        let emb_init = match emb {
            EmbInit::Identity => Init::Identity,
            EmbInit::Random => Init::Weight,
        };
        let w_emb = r.add("w_emb".into(), &[e, d], &[Axis::Full, Axis::Model], emb_init);
        let encoder = (1..=cfg.layers)
            .map(|i| EncoderLayerWeights::register(r, &format!("encoder.{i}"), dims))
            .collect();
        let decoder = if unified {
            Vec::new()
        } else {
            (1..=cfg.layers)
                .map(|i| DecoderLayerWeights::register(r, &format!("decoder.{i}"), dims))
                .collect()
        };
        let (reduce_q, reduce_v) = if unified {
            (None, None)
        } else {
            (
                Some(ReduceWeights::register(r, "reduce_q", dims)),
                Some(ReduceWeights::register(r, "reduce_v", dims)),
            )
        };
        let proj = [Axis::Model, Axis::Full];
        let fuse_q = r.add("fuse.q".into(), &[d, e], &proj, Init::Weight);
        let fuse_v = (!unified).then(|| r.add("fuse.v".into(), &[d, e], &proj, Init::Weight));
        let fuse_ln = LnWeights::register(r, "fuse.ln", e, Axis::Full, cfg.ln_eps);
        let classifier_w = r.add("classifier.w".into(), &[e, cfg.num_answers], &full, Init::Weight);
        let classifier_b = r.add("classifier.b".into(), &[cfg.num_answers], &[Axis::Full], Init::Zeros);
        Self {
            tokens,
            region_w,
            region_b,
            cls_token,
            w_emb,
            encoder,
            decoder,
            reduce_q,
            reduce_v,
            fuse_q,
            fuse_v,
            fuse_ln,
            classifier_w,
            classifier_b,
        }
    }
}

/// Stacked samples: `B·m` question tokens and `B·n` region rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub regions: Tensor,
    pub labels: Vec<usize>,
    pub question_len: usize,
    pub num_regions: usize,
}

impl Batch {
    pub fn new(tokens: Vec<usize>, regions: Tensor, labels: Vec<usize>, question_len: usize, num_regions: usize) -> Result<Self> {
        let size = labels.len();
        if size == 0 || question_len == 0 || num_regions == 0 {
            return Err(shape_err("batch", "empty batch, question or region set"));
        }
        if tokens.len() != size * question_len || regions.shape().len() != 2 || regions.rows() != size * num_regions {
            return Err(shape_err(
                "batch",
                format!(
                    "{size} samples need {} tokens and {} region rows, got {} and {:?}",
                    size * question_len,
                    size * num_regions,
                    tokens.len(),
                    regions.shape()
                ),
            ));
        }
        Ok(Self {
            tokens,
            regions,
            labels,
            question_len,
            num_regions,
        })
    }

    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| shape_err("batch", "no samples"))?;
        let m = first.question.len();
        let n = first.regions.len() / REGION_FEAT_DIM;
        let mut tokens = Vec::with_capacity(samples.len() * m);
        let mut regions = Vec::with_capacity(samples.len() * n * REGION_FEAT_DIM);
        for s in samples {
            if s.question.len() != m || s.regions.len() != n * REGION_FEAT_DIM {
                return Err(shape_err("batch", "samples differ in question or region count"));
            }
            tokens.extend_from_slice(&s.question);
            regions.extend_from_slice(&s.regions);
        }
        let regions = Tensor::new(vec![samples.len() * n, REGION_FEAT_DIM], regions)?;
        let labels = samples.iter().map(|s| s.answer).collect();
        Self::new(tokens, regions, labels, m, n)
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    EncoderSelf,
    DecoderSelf,
    DecoderGuided,
}

/// Attention node of one kept layer; `layer` is the 1-based index in the
/// reference stack.
#[derive(Clone, Copy, Debug)]
pub struct AttentionSite {
    pub kind: AttentionKind,
    pub layer: usize,
    pub var: Var,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub sites: Vec<AttentionSite>,
}

/// Row-stochastic attention of one layer for one sample: `heads[h][q][k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub kind: AttentionKind,
    pub layer: usize,
    pub sample: usize,
    pub heads: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `B × num_answers`.
    pub logits: Tensor,
    pub attention: Option<Vec<AttentionMap>>,
}

/// A model whose every selected `(width, depth)` submodel shares one
/// master parameter store.
#[derive(Clone, Debug)]
pub struct SlimModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub layout: Layout,
    space: ArchSpace,
    dims: LayerDims,
}

/// `pe[p][2i] = sin(p / 10000^(2i/E))`, `pe[p][2i+1] = cos(·)`.
fn positional_table(len: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, width]);
    let data = t.data_mut();
    for p in 0..len {
        for c in 0..width {
            let i2 = (c - c % 2) as f64;
            let angle = p as f64 / 10000f64.powf(i2 / width as f64);
            data[p * width + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

impl SlimModel {
    /// Fresh model with an identity `W_emb`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_init(config, seed, EmbInit::Identity)
    }

    pub fn with_init(config: ModelConfig, seed: u64, emb: EmbInit) -> Result<Self> {
        let space = config.arch_space()?;
        let dims = config.layer_dims()?;
        let mut params = ParamStore::default();
        let mut rng = Rng::new(seed);
        let layout = Layout::register(
            &config,
            &dims,
            &mut Registrar {
                store: &mut params,
                rng: &mut rng,
            },
            emb,
        );
        Ok(Self {
            config,
            params,
            layout,
            space,
            dims,
        })
    }

    /// Wrap existing tensors; names, shapes and axes must match the layout
    /// implied by `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.copy_from(&params)?;
        Ok(model)
    }

    pub fn space(&self) -> &ArchSpace {
        &self.space
    }

    pub fn dims(&self) -> &LayerDims {
        &self.dims
    }

    pub fn spec(&self, width: usize) -> Result<SlimSpec> {
        SlimSpec::new(&self.dims, width, self.config.width_mode)
    }

    fn check_arch(&self, arch: &ArchDescriptor) -> Result<SlimSpec> {
        if !self.space.contains(arch) {
            return Err(DstError::InvalidArch(format!(
                "{arch} with layers {:?} is not in the selected set",
                arch.kept_layers
            )));
        }
        self.spec(arch.width)
    }

    /// Question rows (token + position) and region rows (linear), both at
    /// the embedding width.
    pub fn embed_inputs(&self, g: &mut Graph, batch: &Batch, regions: Var) -> Result<(Var, Var)> {
        let vocab = self.config.vocab_size;
        if let Some(&token) = batch.tokens.iter().find(|&&t| t >= vocab) {
            return Err(DstError::OutOfVocab { token, vocab });
        }
        let e = self.config.embed_dim();
        let full = SlimSpec::full(&self.dims);
        let table = view(g, &self.params, self.layout.tokens, &full)?;
        let rows = batch.tokens.iter().map(|&t| (0, t)).collect();
        let q = g.gather_rows(&[table], rows)?;
        let pe = positional_table(batch.question_len, e);
        let mut tiled = Vec::with_capacity(batch.tokens.len() * e);
        for _ in 0..batch.size() {
            tiled.extend_from_slice(pe.data());
        }
        let pos = g.input(Tensor::new(vec![batch.tokens.len(), e], tiled)?);
        let q = g.add(q, pos)?;
        let rw = view(g, &self.params, self.layout.region_w, &full)?;
        let rb = view(g, &self.params, self.layout.region_b, &full)?;
        let r = g.matmul(regions, rw)?;
        let r = g.add_row(r, rb)?;
        Ok((q, r))
    }

    /// `e · W_emb[:, :d]`.
    pub fn project_embeddings(&self, g: &mut Graph, e: Var, spec: &SlimSpec) -> Result<Var> {
        let w = view(g, &self.params, self.layout.w_emb, spec)?;
        g.matmul(e, w)
    }

    /// Softmax-weighted pooling of each `seg`-row block of `x`.
    pub fn attentional_reduce(&self, g: &mut Graph, x: Var, w: &ReduceWeights, spec: &SlimSpec, seg: usize) -> Result<Var> {
        let rows = g.value(x).rows();
        if seg == 0 || rows == 0 || !rows.is_multiple_of(seg) {
            return Err(shape_err("attentional_reduce", format!("{rows} rows in segments of {seg}")));
        }
        let w1 = view(g, &self.params, w.w1, spec)?;
        let b1 = view(g, &self.params, w.b1, spec)?;
        let w2 = view(g, &self.params, w.w2, spec)?;
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h)?;
        let s = g.matmul(h, w2)?;
        let s = g.reshape(s, vec![rows / seg, seg])?;
        let alpha = g.softmax_rows(s)?;
        g.segment_weighted_sum(alpha, x)
    }

    /// `LN(fq·Wfq[:d] + fv·Wfv[:d])·Wcls + bcls`.
    pub fn fuse_and_classify(&self, g: &mut Graph, fq: Var, fv: Option<Var>, spec: &SlimSpec) -> Result<Var> {
        let wq = view(g, &self.params, self.layout.fuse_q, spec)?;
        let mut z = g.matmul(fq, wq)?;
        if let Some(fv) = fv {
            if g.value(fv).shape() != g.value(fq).shape() {
                return Err(shape_err(
                    "fuse_and_classify",
                    format!("{:?} vs {:?}", g.value(fq).shape(), g.value(fv).shape()),
                ));
            }
            let id = self
                .layout
                .fuse_v
                .ok_or_else(|| shape_err("fuse_and_classify", "model has no region projection"))?;
            let wv = view(g, &self.params, id, spec)?;
            let zv = g.matmul(fv, wv)?;
            z = g.add(z, zv)?;
        }
        let z = layer_norm(g, &self.params, z, &self.layout.fuse_ln, spec)?;
        let full = SlimSpec::full(&self.dims);
        let wc = view(g, &self.params, self.layout.classifier_w, &full)?;
        let bc = view(g, &self.params, self.layout.classifier_b, &full)?;
        let logits = g.matmul(z, wc)?;
        g.add_row(logits, bc)
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch, arch: &ArchDescriptor) -> Result<ForwardVars> {
        let regions = g.input(batch.regions.clone());
        self.forward_with_regions(g, batch, regions, arch)
    }

    /// Forward pass with the region features supplied as a graph node.
    pub fn forward_with_regions(&self, g: &mut Graph, batch: &Batch, regions: Var, arch: &ArchDescriptor) -> Result<ForwardVars> {
        let spec = self.check_arch(arch)?;
        let (q, r) = self.embed_inputs(g, batch, regions)?;
        match self.config.variant {
            Variant::EncoderDecoder => self.forward_encoder_decoder(g, batch, q, r, arch, &spec),
            Variant::UnifiedEncoder => self.forward_unified(g, batch, q, r, arch, &spec),
        }
    }

    fn forward_encoder_decoder(
        &self,
        g: &mut Graph,
        batch: &Batch,
        q: Var,
        r: Var,
        arch: &ArchDescriptor,
        spec: &SlimSpec,
    ) -> Result<ForwardVars> {
        let (m, n) = (batch.question_len, batch.num_regions);
        let mut x = self.project_embeddings(g, q, spec)?;
        let mut y = self.project_embeddings(g, r, spec)?;
        let mut sites = Vec::new();
        for &layer in &arch.kept_layers {
            let out = encoder_layer(g, &self.params, x, &self.layout.encoder[layer - 1], spec, m)?;
            sites.push(AttentionSite {
                kind: AttentionKind::EncoderSelf,
                layer,
                var: out.self_attn,
            });
            x = out.out;
        }
        for &layer in &arch.kept_layers {
            let out = decoder_layer(g, &self.params, y, x, &self.layout.decoder[layer - 1], spec, n, m)?;
            sites.push(AttentionSite {
                kind: AttentionKind::DecoderSelf,
                layer,
                var: out.self_attn,
            });
            if let Some(var) = out.guided_attn {
                sites.push(AttentionSite {
                    kind: AttentionKind::DecoderGuided,
                    layer,
                    var,
                });
            }
            y = out.out;
        }
        let missing = || shape_err("forward", "encoder-decoder layout without reduction heads");
        let fq = self.attentional_reduce(g, x, self.layout.reduce_q.as_ref().ok_or_else(missing)?, spec, m)?;
        let fv = self.attentional_reduce(g, y, self.layout.reduce_v.as_ref().ok_or_else(missing)?, spec, n)?;
        let logits = self.fuse_and_classify(g, fq, Some(fv), spec)?;
        Ok(ForwardVars { logits, sites })
    }

    fn forward_unified(
        &self,
        g: &mut Graph,
        batch: &Batch,
        q: Var,
        r: Var,
        arch: &ArchDescriptor,
        spec: &SlimSpec,
    ) -> Result<ForwardVars> {
        let (m, n) = (batch.question_len, batch.num_regions);
        let seg = 1 + m + n;
        let cls_id = self
            .layout
            .cls_token
            .ok_or_else(|| shape_err("forward", "unified layout without [CLS]"))?;
        let cls = view(g, &self.params, cls_id, &SlimSpec::full(&self.dims))?;
        let mut index = Vec::with_capacity(batch.size() * seg);
        for b in 0..batch.size() {
            index.push((0, 0));
            index.extend((0..m).map(|i| (1, b * m + i)));
            index.extend((0..n).map(|i| (2, b * n + i)));
        }
        let seq = g.gather_rows(&[cls, q, r], index)?;
        let mut x = self.project_embeddings(g, seq, spec)?;
        let mut sites = Vec::new();
        for &layer in &arch.kept_layers {
            let out = encoder_layer(g, &self.params, x, &self.layout.encoder[layer - 1], spec, seg)?;
            sites.push(AttentionSite {
                kind: AttentionKind::EncoderSelf,
                layer,
                var: out.self_attn,
            });
            x = out.out;
        }
        let heads = g.gather_rows(&[x], (0..batch.size()).map(|b| (0, b * seg)).collect())?;
        let logits = self.fuse_and_classify(g, heads, None, spec)?;
        Ok(ForwardVars { logits, sites })
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(&self, batch: &Batch, arch: &ArchDescriptor, capture: bool) -> Result<ForwardOutput> {
        let mut g = Graph::no_grad();
        let vars = self.forward(&mut g, batch, arch)?;
        let logits = g.value(vars.logits).clone();
        let attention = capture.then(|| collect_attention(&g, &vars.sites));
        Ok(ForwardOutput { logits, attention })
    }

    pub fn logits(&self, batch: &Batch, arch: &ArchDescriptor) -> Result<Tensor> {
        Ok(self.predict(batch, arch, false)?.logits)
    }

    /// Embeddings of a single sample: `(m × E, n × E)`.
    pub fn embed_sample(&self, sample: &Sample) -> Result<(Tensor, Tensor)> {
        let batch = Batch::from_samples(&[sample])?;
        let mut g = Graph::no_grad();
        let regions = g.input(batch.regions.clone());
        let (q, r) = self.embed_inputs(&mut g, &batch, regions)?;
        Ok((g.value(q).clone(), g.value(r).clone()))
    }
}

fn collect_attention(g: &Graph, sites: &[AttentionSite]) -> Vec<AttentionMap> {
    let mut maps = Vec::new();
    for site in sites {
        let Some((probs, heads, sq, skv)) = g.attention_probs(site.var) else {
            continue;
        };
        let segs = probs.len() / (heads * sq * skv);
        for b in 0..segs {
            let per_head = (0..heads)
                .map(|h| {
                    let base = (b * heads + h) * sq * skv;
                    (0..sq).map(|i| probs[base + i * skv..base + (i + 1) * skv].to_vec()).collect()
                })
                .collect();
            maps.push(AttentionMap {
                kind: site.kind,
                layer: site.layer,
                sample: b,
                heads: per_head,
            });
        }
    }
    maps
}
