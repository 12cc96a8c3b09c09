//! Acceptance suite: one PASS/FAIL line per criterion. Criteria 8 and 9
//! are reported but do not affect the exit status.
//!
//! Training criteria dominate the runtime (roughly half an hour on one
//! core). Artifacts land in the target tmp dir.

use std::path::PathBuf;
use std::time::Instant;

use dst_core::backbone::AttentionKind;
use dst_core::cost_model::{analyze, cost_table};
use dst_core::exec::Execution;
use dst_core::harness::checkpoint::{from_bytes, load, save, to_bytes};
use dst_core::harness::{capture_attention, evaluate, export_submodel, run_sweep, write_csv, write_csv_file, MetricsRow};
use dst_core::numerics::{finite_diff_check, GradStore, Graph, Rng, Tensor, Var};
use dst_core::slim_layers::{
    decoder_layer, encoder_layer, feed_forward, layer_norm, multi_head_attention, DecoderLayerWeights,
    EncoderLayerWeights, LayerDims, Registrar, SlimSpec, WidthMode,
};
use dst_core::slim_space::{DepthStrategy, Selection};
use dst_core::synthdata::{generate_dataset, Sample, Split};
use dst_core::trainer::{init_dst, train_dst, train_teacher, DstTrainer, InitMode, StepRecord, Strategy, TrainConfig};
use dst_core::{ArchDescriptor, Batch, ModelConfig, ParamStore, SlimModel, Variant};

type Check = Result<String, String>;

struct Outcome {
    id: usize,
    title: &'static str,
    soft: bool,
    result: Check,
    seconds: f64,
}

fn report(o: &Outcome) {
    let status = match (&o.result, o.soft) {
        (Ok(_), _) => "PASS",
        (Err(_), false) => "FAIL",
        (Err(_), true) => "FAIL (soft)",
    };
    let detail = match &o.result {
        Ok(s) | Err(s) => s,
    };
    println!("{status} [{}] {} ({:.1}s): {detail}", o.id, o.title, o.seconds);
}

fn run(id: usize, title: &'static str, soft: bool, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let o = Outcome {
        id,
        title,
        soft,
        result,
        seconds: start.elapsed().as_secs_f64(),
    };
    report(&o);
    o
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn artifacts() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn batch_of(samples: &[Sample]) -> Batch {
    Batch::from_samples(&samples.iter().collect::<Vec<_>>()).unwrap()
}

fn progress(label: &'static str, every: usize) -> impl FnMut(&StepRecord) {
    let start = Instant::now();
    move |rec| {
        if (rec.step + 1) % every == 0 {
            let mean = rec.losses.iter().map(|l| l.loss).sum::<f64>() / rec.losses.len() as f64;
            eprintln!("  {label}: step {} loss {mean:.4} ({:.0}s)", rec.step + 1, start.elapsed().as_secs_f64());
        }
    }
}

// 1

fn architecture_space() -> Check {
    let mut lines = Vec::new();
    for cfg in [ModelConfig::toy(), ModelConfig::encoder_decoder_reference(), ModelConfig::unified_reference()] {
        let full = ModelConfig {
            selection: Selection::Full,
            ..cfg.clone()
        }
        .arch_space()
        .map_err(|e| e.to_string())?;
        let space = cfg.arch_space().map_err(|e| e.to_string())?;
        ensure(full.selected().len() == 16, format!("|A| = {}", full.selected().len()))?;
        ensure(space.selected().len() == 10, format!("|S| = {}", space.selected().len()))?;
        let (w, d) = (&space.widths.values, &space.depths.values);
        for i in 0..4 {
            for j in 0..4 {
                let inside = space.get(w[i], d[j]).is_ok();
                ensure(inside == (i <= j), format!("a({}, {}) membership is {inside}", w[i], d[j]))?;
            }
        }
        let (dd, l) = (cfg.d_model, cfg.layers);
        for (a, b) in [(dd, l), (dd / 2, l), (dd / 2, l / 3), (dd / 4, l / 3), (dd / 4, l / 6)] {
            space.get(a, b).map_err(|e| e.to_string())?;
        }
        lines.push(format!("D={dd} L={l}"));
    }
    Ok(format!("|A|=16, |S|=10, triangle exact for {}", lines.join(", ")))
}

// 2

fn weight_sharing() -> Check {
    let samples = generate_dataset(21, 100, Split::Val);
    let batch = batch_of(&samples);
    let mut checked = 0;
    for variant in [Variant::EncoderDecoder, Variant::UnifiedEncoder] {
        let cfg = ModelConfig {
            variant,
            ..ModelConfig::toy()
        };
        let model = SlimModel::new(cfg, 7).map_err(|e| e.to_string())?;
        for arch in model.space().selected() {
            let export = export_submodel(&model, arch).map_err(|e| e.to_string())?;
            let full = export.space().largest().clone();
            let a = model.logits(&batch, arch).map_err(|e| e.to_string())?;
            let b = export.logits(&batch, &full).map_err(|e| e.to_string())?;
            ensure(a.bit_eq(&b), format!("{variant} {arch} differs by {:e}", a.max_abs_diff(&b)))?;
            let count = analyze(&model.config, arch).map_err(|e| e.to_string())?.total_params;
            ensure(export.params.numel() as u64 == count, format!("{arch}: export holds {} params", export.params.numel()))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} exports bitwise equal to master slices on 100 samples"))
}

// 3

fn coef(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn weighted_sum(g: &mut Graph, x: Var, c: &Tensor) -> dst_core::Result<Var> {
    let c = g.input(c.clone());
    let y = g.mul(x, c)?;
    g.sum(y)
}

/// Gradients below this are indistinguishable from round-off in a central
/// difference at h = 1e-4 (about `ε·|f|/h`), so they are compared absolutely.
const GRAD_FLOOR: f64 = 1e-6;

fn rel_err(ana: f64, num: f64) -> f64 {
    (ana - num).abs() / ana.abs().max(num.abs()).max(GRAD_FLOOR)
}

/// Worst relative error over every touched parameter entry.
fn param_fd<F>(store: &mut ParamStore, f: F, h: f64) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> dst_core::Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut gs = GradStore::zeros_like(store, store.len());
    g.accumulate(&grads, &mut gs);
    let mut worst: f64 = 0.0;
    for (id, ext) in g.param_views() {
        let cols = *store.get(id).shape().last().unwrap();
        let (rows, width) = if ext.len() == 2 { (ext[0], ext[1]) } else { (1, ext[0]) };
        for r in 0..rows {
            for c in 0..width {
                let flat = r * cols + c;
                let orig = store.get(id).data()[flat];
                let mut eval = |v: f64| {
                    store.tensor_mut(id).data_mut()[flat] = v;
                    let mut g = Graph::no_grad();
                    let l = f(&mut g, store).unwrap();
                    g.value(l).data()[0]
                };
                let num = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
                store.tensor_mut(id).data_mut()[flat] = orig;
                let ana = gs.get(id)[flat];
                worst = worst.max(rel_err(ana, num));
            }
        }
    }
    worst
}

fn op_checks(h: f64) -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(31);
    let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let w = Tensor::randn(&[6, 5], 1.0, &mut rng);
    let wt = Tensor::randn(&[5, 6], 1.0, &mut rng);
    let row = Tensor::randn(&[6], 1.0, &mut rng);
    let c46 = coef(&[4, 6], &mut rng);
    let c45 = coef(&[4, 5], &mut rng);
    let q = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let kv = Tensor::randn(&[8, 4], 1.0, &mut rng);
    let c64 = coef(&[6, 4], &mut rng);
    let alpha = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let c26 = coef(&[2, 6], &mut rng);
    let x6 = Tensor::randn(&[6, 6], 1.0, &mut rng);
    let target = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let labels = vec![0, 5, 2, 3];
    let mut out = Vec::new();
    macro_rules! check {
        ($name:expr, $x:expr, $f:expr) => {
            out.push(($name, finite_diff_check($f, $x, h).unwrap()));
        };
    }
    check!("matmul (lhs)", &x, |g, v| {
        let b = g.input(w.clone());
        let y = g.matmul(v, b)?;
        weighted_sum(g, y, &c45)
    });
    check!("matmul (rhs)", &w, |g, v| {
        let a = g.input(x.clone());
        let y = g.matmul(a, v)?;
        weighted_sum(g, y, &c45)
    });
    check!("matmul_bt", &wt, |g, v| {
        let a = g.input(x.clone());
        let y = g.matmul_bt(a, v)?;
        weighted_sum(g, y, &c45)
    });
    check!("add", &x, |g, v| {
        let b = g.input(target.clone());
        let y = g.add(v, b)?;
        let y = g.mul(y, v)?;
        weighted_sum(g, y, &c46)
    });
    check!("add_row (bias)", &row, |g, v| {
        let a = g.input(x.clone());
        let y = g.add_row(a, v)?;
        let y = g.mul(y, y)?;
        weighted_sum(g, y, &c46)
    });
    check!("scale", &x, |g, v| {
        let y = g.scale(v, -1.7)?;
        let y = g.mul(y, v)?;
        weighted_sum(g, y, &c46)
    });
    check!("relu", &x, |g, v| {
        let y = g.relu(v)?;
        weighted_sum(g, y, &c46)
    });
    check!("softmax_rows", &x, |g, v| {
        let y = g.softmax_rows(v)?;
        weighted_sum(g, y, &c46)
    });
    check!("layer_norm (input)", &x, |g, v| {
        let gm = g.input(row.clone());
        let bt = g.input(row.clone());
        let y = g.layer_norm(v, gm, bt, 1e-6)?;
        weighted_sum(g, y, &c46)
    });
    check!("layer_norm (gamma)", &row, |g, v| {
        let a = g.input(x.clone());
        let bt = g.input(row.clone());
        let y = g.layer_norm(a, v, bt, 1e-6)?;
        weighted_sum(g, y, &c46)
    });
    for (name, which) in [("attention (q)", 0), ("attention (k)", 1), ("attention (v)", 2)] {
        let src = if which == 0 { q.clone() } else { kv.clone() };
        let (q2, kv2, c2) = (q.clone(), kv.clone(), c64.clone());
        check!(name, &src, move |g: &mut Graph, v: Var| {
            let qq = if which == 0 { v } else { g.input(q2.clone()) };
            let kk = if which == 1 { v } else { g.input(kv2.clone()) };
            let vv = if which == 2 { v } else { g.input(kv2.clone()) };
            let y = g.attention(qq, kk, vv, 2, 3, 4)?;
            weighted_sum(g, y, &c2)
        });
    }
    check!("segment_weighted_sum (alpha)", &alpha, |g, v| {
        let a = g.softmax_rows(v)?;
        let xx = g.input(x6.clone());
        let y = g.segment_weighted_sum(a, xx)?;
        weighted_sum(g, y, &c26)
    });
    check!("segment_weighted_sum (x)", &x6, |g, v| {
        let a = g.input(alpha.clone());
        let y = g.segment_weighted_sum(a, v)?;
        weighted_sum(g, y, &c26)
    });
    check!("gather_rows", &x, |g, v| {
        let y = g.gather_rows(&[v], vec![(0, 3), (0, 1), (0, 3)])?;
        let y = g.mul(y, y)?;
        g.sum(y)
    });
    check!("cross_entropy", &x, |g, v| g.cross_entropy(v, &labels));
    check!("kl_div", &x, |g, v| g.kl_div(v, &target));
    check!("bce_with_logits", &x, |g, v| g.bce_with_logits(v, &target));
    out
}

fn layer_checks(h: f64) -> Vec<(&'static str, f64)> {
    let dims = LayerDims {
        d_model: 8,
        heads: 2,
        head_dim: 4,
        ffn: 16,
        widths: vec![4, 8],
        ln_eps: 1e-6,
    };
    let mut rng = Rng::new(41);
    let mut store = ParamStore::default();
    let (enc, dec) = {
        let mut r = Registrar {
            store: &mut store,
            rng: &mut rng,
        };
        (
            EncoderLayerWeights::register(&mut r, "enc", &dims),
            DecoderLayerWeights::register(&mut r, "dec", &dims),
        )
    };
    for id in 0..store.len() {
        let shape = store.get(id).shape().to_vec();
        *store.tensor_mut(id) = Tensor::randn(&shape, 0.3, &mut rng);
    }
    let mut out = Vec::new();
    for width in [4, 8] {
        let spec = SlimSpec::new(&dims, width, WidthMode::SlimAll).unwrap();
        let x = Tensor::randn(&[6, width], 1.0, &mut rng);
        let y = Tensor::randn(&[4, width], 1.0, &mut rng);
        let c = coef(&[6, width], &mut rng);
        let (xs, ys, cs) = (x.clone(), y.clone(), c.clone());
        let names: [&'static str; 5] = if width == 4 {
            ["mha d=4", "ffn d=4", "layer norm d=4", "encoder layer d=4", "decoder layer d=4"]
        } else {
            ["mha d=8", "ffn d=8", "layer norm d=8", "encoder layer d=8", "decoder layer d=8"]
        };
        let blocks: [Box<dyn Fn(&mut Graph, &ParamStore) -> dst_core::Result<Var>>; 5] = [
            Box::new(|g, s| {
                let xv = g.input(xs.clone());
                let yv = g.input(ys.clone());
                let o = multi_head_attention(g, s, xv, yv, &dec.guided_attn, &spec, 3, 2)?;
                weighted_sum(g, o.out, &cs)
            }),
            Box::new(|g, s| {
                let xv = g.input(xs.clone());
                let o = feed_forward(g, s, xv, &enc.ffn, &spec)?;
                weighted_sum(g, o, &cs)
            }),
            Box::new(|g, s| {
                let xv = g.input(xs.clone());
                let o = layer_norm(g, s, xv, &enc.ln1, &spec)?;
                weighted_sum(g, o, &cs)
            }),
            Box::new(|g, s| {
                let xv = g.input(xs.clone());
                let o = encoder_layer(g, s, xv, &enc, &spec, 3)?;
                weighted_sum(g, o.out, &cs)
            }),
            Box::new(|g, s| {
                let xv = g.input(xs.clone());
                let yv = g.input(ys.clone());
                let o = decoder_layer(g, s, xv, yv, &dec, &spec, 3, 2)?;
                weighted_sum(g, o.out, &cs)
            }),
        ];
        let input_err = finite_diff_check(
            |g, v| {
                let yv = g.input(ys.clone());
                let o = encoder_layer(g, &store, v, &enc, &spec, 3)?;
                let o = decoder_layer(g, &store, o.out, yv, &dec, &spec, 3, 2)?;
                weighted_sum(g, o.out, &c)
            },
            &x,
            h,
        )
        .unwrap();
        out.push((if width == 4 { "stacked layers (input) d=4" } else { "stacked layers (input) d=8" }, input_err));
        for (name, f) in names.iter().zip(&blocks) {
            out.push((*name, param_fd(&mut store, |g, s| f(g, s), h)));
        }
    }
    out
}

/// Worst input error, worst parameter error over probes whose ReLU pattern is
/// constant on `[θ-h, θ+h]`, probe count, and probes that crossed a kink.
struct EndToEnd {
    inputs: f64,
    params: f64,
    probes: usize,
    kinked: usize,
}

fn end_to_end(h: f64) -> EndToEnd {
    let mut out = EndToEnd { inputs: 0.0, params: 0.0, probes: 0, kinked: 0 };
    for variant in [Variant::EncoderDecoder, Variant::UnifiedEncoder] {
        let cfg = ModelConfig {
            variant,
            d_model: 16,
            ..ModelConfig::toy()
        };
        let mut model = SlimModel::new(cfg, 15).unwrap();
        let batch = batch_of(&generate_dataset(16, 2, Split::Train));
        let space = model.space().clone();
        for arch in [space.smallest().clone(), space.get(8, 4).unwrap().clone(), space.largest().clone()] {
            let loss_of = |m: &SlimModel, g: &mut Graph, r: Var| {
                let v = m.forward_with_regions(g, &batch, r, &arch)?;
                g.cross_entropy(v.logits, &batch.labels)
            };
            let err = finite_diff_check(|g, x| loss_of(&model, g, x), &batch.regions, h).unwrap();
            out.inputs = out.inputs.max(err);

            let mut g = Graph::new();
            let r = g.input(batch.regions.clone());
            let loss = loss_of(&model, &mut g, r).unwrap();
            let grads = g.backward(loss).unwrap();
            let mut gs = GradStore::zeros_like(&model.params, model.params.len());
            g.accumulate(&grads, &mut gs);
            let pattern = g.relu_pattern();
            for (id, ext) in g.param_views() {
                let cols = *model.params.get(id).shape().last().unwrap();
                let last = if ext.len() == 2 { (ext[0] - 1) * cols + ext[1] - 1 } else { ext[0] - 1 };
                for flat in [0, last] {
                    let orig = model.params.get(id).data()[flat];
                    let ana = gs.get(id)[flat];
                    let mut eval = |v: f64| {
                        model.params.tensor_mut(id).data_mut()[flat] = v;
                        let mut g = Graph::no_grad();
                        let r = g.input(batch.regions.clone());
                        let l = loss_of(&model, &mut g, r).unwrap();
                        (g.value(l).data()[0], g.relu_pattern())
                    };
                    let (up, p_up) = eval(orig + h);
                    let (down, p_down) = eval(orig - h);
                    model.params.tensor_mut(id).data_mut()[flat] = orig;
                    out.probes += 1;
                    if p_up != pattern || p_down != pattern {
                        out.kinked += 1;
                        continue;
                    }
                    out.params = out.params.max(rel_err(ana, (up - down) / (2.0 * h)));
                }
            }
        }
    }
    out
}

fn gradients() -> Check {
    let h = 1e-4;
    let mut all = op_checks(h);
    all.extend(layer_checks(h));
    let (worst_op, worst) = all
        .iter()
        .fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    let e2e = end_to_end(h);
    let detail = format!(
        "{} op/layer checks worst {worst:.1e} ({worst_op}); end-to-end at h=1e-4 over 3 archs x 2 backbones: inputs {:.1e}, \
         parameters {:.1e} on {} smooth probes ({} of {} skipped, a ReLU changed sign within the step)",
        all.len(),
        e2e.inputs,
        e2e.params,
        e2e.probes - e2e.kinked,
        e2e.kinked,
        e2e.probes
    );
    if worst < 1e-4 && e2e.inputs < 1e-4 && e2e.params < 1e-4 && e2e.kinked * 2 < e2e.probes {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 4

fn full_identity(teacher: &SlimModel, label: &str) -> Check {
    let student = init_dst(teacher, teacher.config.clone(), InitMode::Teacher, 0).map_err(|e| e.to_string())?;
    let batch = batch_of(&generate_dataset(5, 200, Split::Val));
    let arch = teacher.space().largest();
    let a = teacher.logits(&batch, arch).map_err(|e| e.to_string())?;
    let b = student.logits(&batch, arch).map_err(|e| e.to_string())?;
    ensure(a.bit_eq(&b), format!("{label}: differs by {:e}", a.max_abs_diff(&b)))?;
    Ok(format!("{label}: (D,L) logits bitwise equal on 200 samples"))
}

// 5

fn cost_structure() -> Check {
    let mut notes = Vec::new();
    for cfg in [ModelConfig::toy(), ModelConfig::encoder_decoder_reference(), ModelConfig::unified_reference()] {
        let space = cfg.arch_space().map_err(|e| e.to_string())?;
        let full = analyze(&cfg, space.largest()).map_err(|e| e.to_string())?;
        let half = analyze(&cfg, space.get(cfg.d_model / 2, cfg.layers).unwrap()).map_err(|e| e.to_string())?;
        let small = analyze(&cfg, space.smallest()).map_err(|e| e.to_string())?;
        let pr = half.backbone_params as f64 / full.backbone_params as f64;
        ensure((0.24..=0.26).contains(&pr), format!("{} D={}: params ratio {pr:.4}", cfg.variant, cfg.d_model))?;
        let layer = full.layer_flops as f64 / small.layer_flops as f64;
        let backbone = full.backbone_flops as f64 / small.backbone_flops as f64;
        notes.push(format!(
            "{} D={}: params(1/2D,L) {pr:.4}, layer-stack flops 1/{layer:.1}, slimmable flops 1/{backbone:.1}",
            cfg.variant, cfg.d_model
        ));
        let rows = cost_table(&cfg, space.selected()).map_err(|e| e.to_string())?;
        ensure(rows.windows(2).all(|w| w[0].flops < w[1].flops), "flops not strictly increasing over S")?;
        for a in &rows {
            for b in &rows {
                if (a.arch.width <= b.arch.width && a.arch.depth == b.arch.depth)
                    || (a.arch.depth <= b.arch.depth && a.arch.width == b.arch.width)
                {
                    ensure(a.total_params <= b.total_params && a.flops <= b.flops, format!("{} vs {}", a.arch, b.arch))?;
                }
            }
        }
    }
    let cfg = ModelConfig::encoder_decoder_reference();
    let space = cfg.arch_space().unwrap();
    let full = analyze(&cfg, space.largest()).unwrap();
    let small = analyze(&cfg, space.smallest()).unwrap();
    let ratio = full.layer_flops as f64 / small.layer_flops as f64;
    ensure((ratio / 96.0 - 1.0).abs() <= 0.10, format!("layer-stack flops ratio 1/{ratio:.1} at D=512"))?;

    let cfg = ModelConfig::toy();
    let model = SlimModel::new(cfg.clone(), 3).unwrap();
    let batch = batch_of(&generate_dataset(2, 4, Split::Train));
    for arch in model.space().selected() {
        let mut g = Graph::new();
        let vars = model.forward(&mut g, &batch, arch).map_err(|e| e.to_string())?;
        let loss = g.cross_entropy(vars.logits, &batch.labels).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut gs = GradStore::zeros_like(&model.params, model.params.len());
        g.accumulate(&grads, &mut gs);
        let report = analyze(&cfg, arch).unwrap();
        let (mut backbone, mut fixed) = (0u64, 0u64);
        for (id, ext) in g.param_views() {
            let n: usize = ext.iter().product();
            if model.params.entry(id).is_slimmable() {
                backbone += n as u64;
            } else {
                fixed += n as u64;
            }
        }
        ensure(
            (backbone, fixed) == (report.backbone_params, report.fixed_params),
            format!("{arch}: touched ({backbone}, {fixed}) vs counted ({}, {})", report.backbone_params, report.fixed_params),
        )?;
        ensure(g.flops() == 4 * report.flops, format!("{arch}: graph flops {} vs 4 x {}", g.flops(), report.flops))?;
    }
    notes.push("touched-parameter and instrumented-flop oracles exact for all 10 toy archs".into());
    Ok(notes.join("; "))
}

// 6, 7

struct Trained {
    teacher: SlimModel,
    teacher_acc: f64,
    teacher_secs: f64,
    student: SlimModel,
    dst_secs: f64,
    records: Vec<StepRecord>,
    checksums: (Option<u64>, Option<u64>),
    updates: u64,
    steps: usize,
    sweep: Vec<MetricsRow>,
}

fn train_toy(train: &[Sample], val: &[Sample]) -> Result<Trained, String> {
    let cfg = ModelConfig::toy();
    let mut teacher = SlimModel::new(cfg.clone(), 0).map_err(|e| e.to_string())?;
    let tcfg = TrainConfig::toy();
    let t = Instant::now();
    train_teacher(&mut teacher, train, &tcfg, progress("teacher", 250)).map_err(|e| e.to_string())?;
    let teacher_secs = t.elapsed().as_secs_f64();
    let teacher_acc = evaluate(&teacher, teacher.space().largest(), val, Execution::Parallel)
        .map_err(|e| e.to_string())?
        .accuracy();
    eprintln!("  teacher val accuracy {teacher_acc:.4} after {teacher_secs:.0}s");

    let student = init_dst(&teacher, cfg, InitMode::Teacher, 0).map_err(|e| e.to_string())?;
    let mut trainer = DstTrainer::new(student, &teacher, TrainConfig::toy_distill()).map_err(|e| e.to_string())?;
    let mut records = Vec::new();
    let mut prog = progress("dst", 250);
    let t = Instant::now();
    let rep = train_dst(&mut trainer, train, |r| {
        prog(r);
        records.push(r.clone());
    })
    .map_err(|e| e.to_string())?;
    let dst_secs = t.elapsed().as_secs_f64();
    let student = trainer.student;
    let sweep = run_sweep(&student, val, "val", 0, Execution::Parallel).map_err(|e| e.to_string())?;
    Ok(Trained {
        teacher,
        teacher_acc,
        teacher_secs,
        student,
        dst_secs,
        records,
        checksums: (rep.teacher_checksum_before, rep.teacher_checksum_after),
        updates: rep.updates,
        steps: rep.steps,
        sweep,
    })
}

fn toy_training(t: &Trained) -> Check {
    let accs: Vec<String> = t.sweep.iter().map(|r| format!("a({},{})={:.3}", r.width, r.depth, r.accuracy)).collect();
    let full = t.sweep.iter().find(|r| r.width == 64 && r.depth == 6).unwrap();
    let detail = format!(
        "teacher {:.4} in {:.0}s; dst {} steps in {:.0}s; {}",
        t.teacher_acc,
        t.teacher_secs,
        t.steps,
        t.dst_secs,
        accs.join(" ")
    );
    let mut failures = Vec::new();
    if t.teacher_acc < 0.90 {
        failures.push("teacher below 0.90".to_string());
    }
    if t.teacher_secs > 600.0 {
        failures.push("teacher over 10 min".into());
    }
    if t.dst_secs > 1200.0 {
        failures.push("dst over 20 min".into());
    }
    if full.accuracy < t.teacher_acc - 0.02 {
        failures.push(format!("(D,L) {:.4} more than 2 points below teacher", full.accuracy));
    }
    if let Some(r) = t.sweep.iter().find(|r| r.accuracy < 0.60) {
        failures.push(format!("a({},{}) below 0.60", r.width, r.depth));
    }
    for (i, a) in t.sweep.iter().enumerate() {
        for b in &t.sweep[i + 1..] {
            if b.accuracy < a.accuracy - 0.01 {
                failures.push(format!("a({},{}) drops more than 1 point below a({},{})", b.width, b.depth, a.width, a.depth));
            }
        }
    }
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", failures.join(", ")))
    }
}

fn conformance(t: &Trained) -> Check {
    let space = t.student.space();
    let (small, large) = (space.smallest(), space.largest());
    for rec in &t.records {
        let has = |a: &ArchDescriptor| rec.losses.iter().any(|l| l.width == a.width && l.depth == a.depth);
        ensure(has(small) && has(large), format!("step {} omega lacks a_s or a_l", rec.step))?;
        ensure(rec.losses.len() == 4, format!("step {} has |omega| = {}", rec.step, rec.losses.len()))?;
    }
    ensure(t.checksums.0 == t.checksums.1 && t.checksums.0.is_some(), "teacher checksum changed")?;
    ensure(t.teacher.params.checksum() == t.checksums.0.unwrap(), "teacher checksum changed after the run")?;
    ensure(t.updates as usize == t.steps && t.records.len() == t.steps, format!("{} updates for {} steps", t.updates, t.steps))?;
    Ok(format!(
        "{} iterations, each omega holds a_s and a_l, {} optimizer updates, teacher checksum {:016x} constant",
        t.steps,
        t.updates,
        t.checksums.0.unwrap()
    ))
}

// 8

fn dst_run(teacher: &SlimModel, cfg: ModelConfig, tc: TrainConfig, train: &[Sample], label: &'static str) -> Result<(SlimModel, f64, usize), String> {
    let student = init_dst(teacher, cfg, InitMode::Teacher, 0).map_err(|e| e.to_string())?;
    let mut trainer = DstTrainer::new(student, teacher, tc).map_err(|e| e.to_string())?;
    let rep = train_dst(&mut trainer, train, progress(label, 100)).map_err(|e| e.to_string())?;
    Ok((trainer.student, rep.seconds, rep.steps))
}

fn mean_acc(model: &SlimModel, archs: &[ArchDescriptor], val: &[Sample]) -> Result<Vec<f64>, String> {
    archs
        .iter()
        .map(|a| evaluate(model, a, val, Execution::Parallel).map(|r| r.accuracy()).map_err(|e| e.to_string()))
        .collect()
}

fn triangle_benefit(teacher: &SlimModel, train: &[Sample], val: &[Sample]) -> Check {
    let steps = 500;
    let tc = TrainConfig {
        max_steps: Some(steps),
        epochs: 1,
        ..TrainConfig::toy_distill()
    };
    let tri_cfg = ModelConfig::toy();
    let full_cfg = ModelConfig {
        selection: Selection::Full,
        ..ModelConfig::toy()
    };
    let (tri, tri_secs, _) = dst_run(teacher, tri_cfg, tc.clone(), train, "10-arch")?;
    let (full, full_secs, _) = dst_run(teacher, full_cfg, tc, train, "16-arch")?;
    let shared = tri.space().selected().to_vec();
    let a = mean_acc(&tri, &shared, val)?;
    let b = mean_acc(&full, &shared, val)?;
    let (ma, mb) = (a.iter().sum::<f64>() / a.len() as f64, b.iter().sum::<f64>() / b.len() as f64);
    let (pa, pb) = (tri_secs / steps as f64, full_secs / steps as f64);
    let detail = format!("{steps} steps each: 10-arch mean {ma:.4} ({pa:.3}s/step), 16-arch mean {mb:.4} ({pb:.3}s/step)");
    if ma >= mb - 0.005 && pa < pb {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 9

#[derive(serde::Serialize)]
struct AblationRow {
    ablation: &'static str,
    setting: String,
    steps: usize,
    mean_accuracy: f64,
    min_accuracy: f64,
    full_accuracy: f64,
    smallest_accuracy: f64,
    seconds: f64,
}

fn ablations(teacher: &SlimModel, train: &[Sample], val: &[Sample]) -> Check {
    let train = &train[..5_000];
    let tc = TrainConfig {
        epochs: 2,
        decay_after: 2,
        ..TrainConfig::toy_distill()
    };
    let mut rows = Vec::new();
    let mut record = |ablation: &'static str, setting: String, cfg: ModelConfig, tc: TrainConfig| -> Result<(), String> {
        let (model, secs, steps) = dst_run(teacher, cfg, tc, train, "ablation")?;
        let space = model.space();
        let accs = mean_acc(&model, space.selected(), val)?;
        let pos = |a: &ArchDescriptor| space.selected().iter().position(|s| s == a).unwrap();
        rows.push(AblationRow {
            ablation,
            setting,
            steps,
            mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
            min_accuracy: accs.iter().cloned().fold(1.0, f64::min),
            full_accuracy: accs[pos(space.largest())],
            smallest_accuracy: accs[pos(space.smallest())],
            seconds: secs,
        });
        Ok(())
    };
    for strategy in DepthStrategy::ALL {
        let cfg = ModelConfig {
            depth_strategy: strategy,
            depth_seed: 1,
            ..ModelConfig::toy()
        };
        record("depth", strategy.name().to_string(), cfg, tc.clone())?;
    }
    for strategy in [Strategy::InplaceDistill, Strategy::GroundTruth] {
        record("loss", strategy.name().to_string(), ModelConfig::toy(), TrainConfig { strategy, ..tc.clone() })?;
    }
    let path = artifacts().join("ablations.csv");
    write_csv_file(&rows, &path).map_err(|e| e.to_string())?;
    let mean = |setting: &str| rows.iter().find(|r| r.setting == setting).unwrap().mean_accuracy;
    let middle = mean(DepthStrategy::SlimMiddle.name());
    let middle_best = DepthStrategy::ALL.iter().all(|s| mean(s.name()) <= middle);
    let kd_over_id = middle >= mean(Strategy::InplaceDistill.name());
    let summary: Vec<String> = rows.iter().map(|r| format!("{}={:.4}", r.setting, r.mean_accuracy)).collect();
    let detail = format!(
        "{} runs on 5k samples, mean accuracy {} (kd-fixed-teacher is the slim-middle run); slim-middle best: {middle_best}; fixed-teacher KD >= ID: {kd_over_id}; csv {}",
        rows.len(),
        summary.join(" "),
        path.display()
    );
    if middle_best && kd_over_id {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 10

fn determinism(trained: &SlimModel, val: &[Sample]) -> Check {
    let train = generate_dataset(77, 400, Split::Train);
    let small_val = &val[..300];
    let one_run = || -> Result<Vec<u8>, String> {
        let mut teacher = SlimModel::new(ModelConfig::toy(), 77).map_err(|e| e.to_string())?;
        let tc = TrainConfig {
            max_steps: Some(10),
            seed: 77,
            ..TrainConfig::toy()
        };
        train_teacher(&mut teacher, &train, &tc, |_| {}).map_err(|e| e.to_string())?;
        let (student, _, _) = dst_run(
            &teacher,
            ModelConfig::toy(),
            TrainConfig {
                max_steps: Some(10),
                seed: 77,
                ..TrainConfig::toy_distill()
            },
            &train,
            "determinism",
        )?;
        let rows = run_sweep(&student, small_val, "val", 77, Execution::Parallel).map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).map_err(|e| e.to_string())?;
        Ok(buf)
    };
    let a = one_run()?;
    let b = one_run()?;
    ensure(a == b, "metrics CSVs differ between identical runs")?;

    let path = artifacts().join("dst.ckpt");
    save(trained, "dst", &path).map_err(|e| e.to_string())?;
    let (back, _) = load(&path).map_err(|e| e.to_string())?;
    for (x, y) in trained.params.entries().iter().zip(back.params.entries()) {
        ensure(x.name == y.name && x.tensor.bit_eq(&y.tensor), format!("'{}' changed in round trip", x.name))?;
    }
    ensure(to_bytes(&back, "dst").unwrap() == std::fs::read(&path).unwrap(), "re-saved bytes differ")?;
    let batch = batch_of(&val[..64]);
    for arch in trained.space().selected() {
        ensure(
            trained.logits(&batch, arch).unwrap().bit_eq(&back.logits(&batch, arch).unwrap()),
            format!("{arch} forward changed after reload"),
        )?;
    }
    let (_, manifest) = from_bytes(&std::fs::read(&path).unwrap()).map_err(|e| e.to_string())?;
    let sample = &val[0];
    let maps = capture_attention(&back, back.space().smallest(), sample).map_err(|e| e.to_string())?;
    ensure(maps.iter().filter(|m| m.kind == AttentionKind::EncoderSelf).count() == 1, "attention dump shape")?;
    Ok(format!(
        "two identical runs gave byte-identical metrics CSVs ({} bytes); {} tensors round-trip bit-exact",
        a.len(),
        manifest.tensors.len()
    ))
}

/// Criterion ids given on the command line, or all of them. Cargo's own
/// test flags (leading `-`) are ignored.
fn wanted() -> Vec<usize> {
    let ids: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if ids.is_empty() {
        (1..=10).collect()
    } else {
        ids
    }
}

fn main() {
    let start = Instant::now();
    let want = wanted();
    let on = |id: usize| want.contains(&id);
    let mut outcomes = Vec::new();
    let quick: [(usize, &'static str, fn() -> Check); 4] = [
        (1, "architecture space", architecture_space),
        (2, "weight-sharing oracle", weight_sharing),
        (3, "gradient correctness", gradients),
        (5, "cost structure", cost_structure),
    ];
    for (id, title, f) in quick {
        if on(id) {
            outcomes.push(run(id, title, false, f));
        }
    }

    if [4, 6, 7, 8, 9, 10].iter().any(|&id| on(id)) {
        eprintln!("generating 20k/2k synthetic samples and training (this takes a while)");
        let train = generate_dataset(0, 20_000, Split::Train);
        let val = generate_dataset(0, 2_000, Split::Val);
        match &train_toy(&train, &val) {
            Ok(t) => {
                let _ = write_csv_file(&t.sweep, artifacts().join("metrics.csv"));
                if on(4) {
                    outcomes.push(run(4, "full-architecture identity", false, || {
                        let fresh = SlimModel::new(ModelConfig::toy(), 9).unwrap();
                        let a = full_identity(&fresh, "fresh teacher")?;
                        let b = full_identity(&t.teacher, "trained teacher")?;
                        Ok(format!("{a}; {b}"))
                    }));
                }
                if on(6) {
                    outcomes.push(run(6, "end-to-end toy training", false, || toy_training(t)));
                }
                if on(7) {
                    outcomes.push(run(7, "training-loop conformance", false, || conformance(t)));
                }
                if on(8) {
                    outcomes.push(run(8, "triangle-selection benefit", true, || triangle_benefit(&t.teacher, &train, &val)));
                }
                if on(9) {
                    outcomes.push(run(9, "ablation plumbing", true, || ablations(&t.teacher, &train, &val)));
                }
                if on(10) {
                    outcomes.push(run(10, "determinism and persistence", false, || determinism(&t.student, &val)));
                }
            }
            Err(e) => {
                for (id, title, soft) in [
                    (4, "full-architecture identity", false),
                    (6, "end-to-end toy training", false),
                    (7, "training-loop conformance", false),
                    (8, "triangle-selection benefit", true),
                    (9, "ablation plumbing", true),
                    (10, "determinism and persistence", false),
                ] {
                    if on(id) {
                        outcomes.push(run(id, title, soft, || Err(format!("training failed: {e}"))));
                    }
                }
            }
        }
    }

    outcomes.sort_by_key(|o| o.id);
    println!("\nsummary ({:.0}s):", start.elapsed().as_secs_f64());
    for o in &outcomes {
        report(o);
    }
    let hard_failures = outcomes.iter().filter(|o| !o.soft && o.result.is_err()).count();
    if hard_failures > 0 {
        println!("{hard_failures} gating criteria failed");
        std::process::exit(1);
    }
}
