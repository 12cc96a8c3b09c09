//! Closed-form parameter and FLOP counts per architecture.
//!
//! Counts are derived from the configuration alone, so reference-scale
//! models can be analysed without allocating them. Conventions: a product
//! of `(a×b)·(b×c)` costs `2abc`; element-wise ops cost one per element;
//! softmax and layer norm cost five per element; gathers, reshapes and
//! losses are free.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, Variant};
use crate::error::Result;
use crate::numerics::graph::{LAYER_NORM_FLOPS, SOFTMAX_FLOPS};
use crate::slim_layers::SlimSpec;
use crate::slim_space::ArchDescriptor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub arch: ArchDescriptor,
    pub backbone_params: u64,
    /// Embedders, fusion norm and classifier.
    pub fixed_params: u64,
    pub total_params: u64,
    /// Per sample at the configured question length and region count.
    pub flops: u64,
    /// `flops` minus the embedders, fusion norm and classifier.
    pub backbone_flops: u64,
    /// Encoder and decoder layers only.
    pub layer_flops: u64,
}

#[derive(Clone, Copy)]
struct Dims {
    model: u64,
    inner: u64,
    ffn: u64,
    heads: u64,
    head_dim: u64,
    embed: u64,
}

impl Dims {
    fn new(cfg: &ModelConfig, spec: &SlimSpec) -> Self {
        Self {
            model: spec.model as u64,
            inner: spec.inner() as u64,
            ffn: spec.ffn as u64,
            heads: spec.heads as u64,
            head_dim: spec.head_dim as u64,
            embed: cfg.embed_dim() as u64,
        }
    }

    fn mha_params(&self) -> u64 {
        3 * (self.model * self.inner + self.inner) + self.inner * self.model + self.model
    }

    fn ffn_params(&self) -> u64 {
        2 * self.model * self.ffn + self.ffn + self.model
    }

    fn ln_params(&self) -> u64 {
        2 * self.model
    }

    fn encoder_params(&self) -> u64 {
        self.mha_params() + self.ffn_params() + 2 * self.ln_params()
    }

    fn decoder_params(&self) -> u64 {
        2 * self.mha_params() + self.ffn_params() + 3 * self.ln_params()
    }

    fn reduce_params(&self) -> u64 {
        self.model * self.inner + self.inner + self.inner
    }

    /// `rq` query rows attending to `rkv` key rows.
    fn mha_flops(&self, rq: u64, rkv: u64) -> u64 {
        let (d, i) = (self.model, self.inner);
        let q = 2 * rq * d * i + rq * i;
        let kv = 2 * (2 * rkv * d * i + rkv * i);
        let scores = self.heads * rq * rkv;
        let att = 4 * scores * self.head_dim + scores + SOFTMAX_FLOPS * scores;
        let out = 2 * rq * i * d + rq * d;
        q + kv + att + out
    }

    fn ffn_flops(&self, r: u64) -> u64 {
        let (d, f) = (self.model, self.ffn);
        2 * r * d * f + r * f + r * f + 2 * r * f * d + r * d
    }

    /// Residual add followed by layer norm.
    fn add_norm_flops(&self, r: u64) -> u64 {
        r * self.model + LAYER_NORM_FLOPS * r * self.model
    }

    fn encoder_flops(&self, r: u64) -> u64 {
        self.mha_flops(r, r) + self.ffn_flops(r) + 2 * self.add_norm_flops(r)
    }

    fn decoder_flops(&self, r: u64, guide: u64) -> u64 {
        self.mha_flops(r, r) + self.mha_flops(r, guide) + self.ffn_flops(r) + 3 * self.add_norm_flops(r)
    }

    fn reduce_flops(&self, r: u64) -> u64 {
        let (d, i) = (self.model, self.inner);
        2 * r * d * i + 2 * r * i + 2 * r * i + SOFTMAX_FLOPS * r + 2 * r * d
    }
}

/// Parameter and FLOP counts of `arch` under `cfg`.
pub fn analyze(cfg: &ModelConfig, arch: &ArchDescriptor) -> Result<CostReport> {
    let spec = SlimSpec::new(&cfg.layer_dims()?, arch.width, cfg.width_mode)?;
    let dm = Dims::new(cfg, &spec);
    let (e, a) = (dm.embed, cfg.num_answers as u64);
    let (v, feat) = (cfg.vocab_size as u64, cfg.region_feat_dim as u64);
    let (m, n) = (cfg.question_len as u64, cfg.num_regions as u64);
    let l = arch.kept_layers.len() as u64;
    let unified = cfg.variant == Variant::UnifiedEncoder;

    let mut fixed_params = v * e + feat * e + e + 2 * e + e * a + a;
    let mut backbone_params = e * dm.model;
    if unified {
        fixed_params += e;
        backbone_params += l * dm.encoder_params() + dm.model * e;
    } else {
        backbone_params += l * (dm.encoder_params() + dm.decoder_params()) + 2 * dm.reduce_params() + 2 * dm.model * e;
    }

    let embed_flops = m * e + 2 * n * feat * e + n * e;
    let head_fixed = LAYER_NORM_FLOPS * e + 2 * e * a + a;
    let (layer_flops, rest) = if unified {
        let seq = 1 + m + n;
        let layers = l * dm.encoder_flops(seq);
        (layers, 2 * seq * e * dm.model + 2 * dm.model * e)
    } else {
        let layers = l * (dm.encoder_flops(m) + dm.decoder_flops(n, m));
        let proj = 2 * (m + n) * e * dm.model;
        let reduce = dm.reduce_flops(m) + dm.reduce_flops(n);
        let fuse = 2 * (2 * dm.model * e) + e;
        (layers, proj + reduce + fuse)
    };
    let backbone_flops = layer_flops + rest;
    Ok(CostReport {
        arch: arch.clone(),
        backbone_params,
        fixed_params,
        total_params: backbone_params + fixed_params,
        flops: backbone_flops + embed_flops + head_fixed,
        backbone_flops,
        layer_flops,
    })
}

/// Reports for `archs`, ascending by FLOPs (ties by width, then depth).
pub fn cost_table(cfg: &ModelConfig, archs: &[ArchDescriptor]) -> Result<Vec<CostReport>> {
    let mut rows = archs.iter().map(|a| analyze(cfg, a)).collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| (r.flops, r.arch.width, r.arch.depth));
    Ok(rows)
}

pub fn kept_layers_label(kept: &[usize]) -> String {
    kept.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

#[derive(Serialize)]
struct CsvRow<'a> {
    arch_width: usize,
    arch_depth: usize,
    kept_layers: &'a str,
    backbone_params: u64,
    fixed_params: u64,
    total_params: u64,
    flops: u64,
}

pub fn write_csv<W: Write>(rows: &[CostReport], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    for r in rows {
        let kept = kept_layers_label(&r.arch.kept_layers);
        w.serialize(CsvRow {
            arch_width: r.arch.width,
            arch_depth: r.arch.depth,
            kept_layers: &kept,
            backbone_params: r.backbone_params,
            fixed_params: r.fixed_params,
            total_params: r.total_params,
            flops: r.flops,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Batch, SlimModel};
    use crate::numerics::Graph;
    use crate::slim_layers::WidthMode;
    use crate::synthdata::{generate_dataset, Split};

    fn toy_space() -> (ModelConfig, Vec<ArchDescriptor>) {
        let cfg = ModelConfig::toy();
        let archs = cfg.arch_space().unwrap().selected().to_vec();
        (cfg, archs)
    }

    fn largest(cfg: &ModelConfig) -> ArchDescriptor {
        cfg.arch_space().unwrap().largest().clone()
    }

    fn half_width(cfg: &ModelConfig) -> ArchDescriptor {
        cfg.arch_space().unwrap().get(cfg.d_model / 2, cfg.layers).unwrap().clone()
    }

    #[test]
    fn ffn_block_count() {
        let cfg = ModelConfig::toy();
        let spec = SlimSpec::full(&cfg.layer_dims().unwrap());
        let dm = Dims::new(&cfg, &spec);
        assert_eq!(dm.ffn_params(), 64 * 256 + 256 + 256 * 64 + 64);
        assert_eq!(dm.ffn_params(), 33_088);
    }

    #[test]
    fn matmul_flops_convention() {
        let mut g = Graph::new();
        let a = g.input(crate::numerics::Tensor::zeros(&[8, 64]));
        let b = g.input(crate::numerics::Tensor::zeros(&[64, 64]));
        g.matmul(a, b).unwrap();
        assert_eq!(g.flops(), 65_536);
    }

    #[test]
    fn half_width_keeps_a_quarter_of_the_backbone() {
        for cfg in [ModelConfig::toy(), ModelConfig::encoder_decoder_reference(), ModelConfig::unified_reference()] {
            let full = analyze(&cfg, &largest(&cfg)).unwrap();
            let half = analyze(&cfg, &half_width(&cfg)).unwrap();
            let ratio = half.backbone_params as f64 / full.backbone_params as f64;
            assert!((0.24..=0.26).contains(&ratio), "{:?}: {ratio}", cfg.variant);
            assert_eq!(full.fixed_params, half.fixed_params);
            let fr = half.flops as f64 / full.flops as f64;
            assert!(fr > 0.25 && fr < 0.5, "{fr}");
        }
    }

    #[test]
    fn layer_stack_shrinks_about_96x_at_reference_scale() {
        let cfg = ModelConfig::encoder_decoder_reference();
        let space = cfg.arch_space().unwrap();
        let full = analyze(&cfg, space.largest()).unwrap();
        let small = analyze(&cfg, space.smallest()).unwrap();
        assert_eq!((small.arch.width, small.arch.depth), (128, 1));
        let ratio = small.layer_flops as f64 / full.layer_flops as f64;
        assert!((ratio * 96.0 - 1.0).abs() < 0.1, "1/{}", 1.0 / ratio);
        assert!(small.backbone_flops > small.layer_flops);
    }

    #[test]
    fn table_is_monotone_and_sorted() {
        let (cfg, archs) = toy_space();
        let rows = cost_table(&cfg, &archs).unwrap();
        assert_eq!(rows.len(), 10);
        assert!(rows.windows(2).all(|w| w[0].flops < w[1].flops));
        let last = rows.last().unwrap();
        assert_eq!(last.arch, largest(&cfg));
        assert!(rows.iter().all(|r| r.total_params <= last.total_params));
        assert!(rows.iter().all(|r| r.total_params == r.backbone_params + r.fixed_params));
        for a in &rows {
            for b in &rows {
                let same_depth_wider = a.arch.depth == b.arch.depth && a.arch.width <= b.arch.width;
                let same_width_deeper = a.arch.width == b.arch.width && a.arch.depth <= b.arch.depth;
                if same_depth_wider || same_width_deeper {
                    assert!(a.total_params <= b.total_params && a.flops <= b.flops);
                }
            }
        }
        assert_eq!(cost_table(&cfg, &archs[..1]).unwrap().len(), 1);
    }

    #[test]
    fn counts_match_an_instrumented_forward() {
        for variant in [Variant::EncoderDecoder, Variant::UnifiedEncoder] {
            for mode in [WidthMode::SlimAll, WidthMode::SlimIntermediate] {
                let cfg = ModelConfig {
                    variant,
                    width_mode: mode,
                    d_model: 32,
                    ..ModelConfig::toy()
                };
                let model = SlimModel::new(cfg.clone(), 1).unwrap();
                let samples = generate_dataset(2, 3, Split::Train);
                let batch = Batch::from_samples(&samples.iter().collect::<Vec<_>>()).unwrap();
                for arch in model.space().selected() {
                    let mut g = Graph::new();
                    model.forward(&mut g, &batch, arch).unwrap();
                    let report = analyze(&cfg, arch).unwrap();
                    assert_eq!(g.flops(), 3 * report.flops, "{variant} {mode} {arch}");
                    let (mut backbone, mut fixed) = (0u64, 0u64);
                    for (id, ext) in g.param_views() {
                        let count: usize = ext.iter().product();
                        if model.params.entry(id).is_slimmable() {
                            backbone += count as u64;
                        } else {
                            fixed += count as u64;
                        }
                    }
                    assert_eq!((backbone, fixed), (report.backbone_params, report.fixed_params), "{variant} {mode} {arch}");
                }
            }
        }
    }

    #[test]
    fn full_architecture_matches_allocated_store() {
        let cfg = ModelConfig::toy();
        let model = SlimModel::new(cfg.clone(), 0).unwrap();
        let report = analyze(&cfg, &largest(&cfg)).unwrap();
        assert_eq!(report.total_params as usize, model.params.numel());
    }

    #[test]
    fn csv_layout() {
        let (cfg, archs) = toy_space();
        let rows = cost_table(&cfg, &archs).unwrap();
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "arch_width,arch_depth,kept_layers,backbone_params,fixed_params,total_params,flops"
        );
        assert!(lines.next().unwrap().starts_with("16,1,1,"));
        assert_eq!(text.lines().count(), 11);
        assert!(!text.contains('\r'));
    }
}
