use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dst_core::cost_model::{cost_table, write_csv as write_cost_csv};
use dst_core::exec::Execution;
use dst_core::harness::checkpoint;
use dst_core::harness::{capture_attention, evaluate, export_submodel, run_sweep, write_csv, RunConfig};
use dst_core::synthdata::{generate_dataset, Sample, Split};
use dst_core::trainer::{init_dst, train_dst, train_teacher, DstTrainer, InitMode, StepRecord, Strategy};
use dst_core::{ArchDescriptor, ModelConfig, SlimModel};

#[derive(Parser)]
#[command(name = "dst", version, about = "Doubly slimmable transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON); defaults to the toy setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate serially instead of on the thread pool.
    #[arg(long)]
    serial: bool,
}

#[derive(Args, Clone)]
struct ArchArgs {
    #[arg(long, default_value_t = 1.0)]
    width_ratio: f64,
    #[arg(long, default_value_t = 1.0)]
    depth_ratio: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-size teacher with cross-entropy.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "teacher.dst")]
        out: PathBuf,
        /// JSON-lines step log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Distill every selected submodel from a frozen teacher.
    TrainDst {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "teacher.dst")]
        teacher: PathBuf,
        #[arg(long, default_value = "dst.dst")]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Architectures per iteration.
        #[arg(long)]
        k: Option<usize>,
        /// Start from random weights instead of the teacher's.
        #[arg(long)]
        random_init: bool,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Accuracy of one submodel on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        arch: ArchArgs,
        /// Evaluate on the training split instead.
        #[arg(long)]
        train: bool,
    },
    /// Write a standalone checkpoint of one submodel.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and FLOP table of the selected architectures.
    AnalyzeCost {
        #[command(flatten)]
        common: Common,
        /// toy, encoder-decoder or unified; overrides the configured model.
        #[arg(long)]
        preset: Option<String>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy and cost of every selected submodel.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
    },
    /// Attention maps of one submodel on one validation sample.
    AttnDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long, default_value_t = 0)]
        sample: u64,
        #[arg(long, default_value = "attention.json")]
        out: PathBuf,
    },
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn exec(common: &Common) -> Execution {
    if common.serial {
        Execution::Serial
    } else {
        Execution::Parallel
    }
}

fn load(path: &Path) -> Result<SlimModel> {
    let (model, _) = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(model)
}

fn pick(model: &SlimModel, arch: &ArchArgs) -> Result<ArchDescriptor> {
    Ok(model.space().by_ratio(arch.width_ratio, arch.depth_ratio)?.clone())
}

fn step_logger(path: Option<&PathBuf>, every: usize) -> Result<impl FnMut(&StepRecord)> {
    let mut file = path.map(File::create).transpose()?.map(BufWriter::new);
    Ok(move |rec: &StepRecord| {
        if let Some(f) = file.as_mut() {
            let _ = serde_json::to_writer(&mut *f, rec).map(|_| f.write_all(b"\n"));
        }
        if rec.step.is_multiple_of(every) {
            let losses: Vec<String> = rec
                .losses
                .iter()
                .map(|l| format!("a({}, {})={:.4}", l.width, l.depth, l.loss))
                .collect();
            eprintln!("step {:>6} epoch {} lr {:.2e} {}", rec.step, rec.epoch, rec.lr, losses.join(" "));
        }
    })
}

fn data(cfg: &RunConfig, split: Split) -> Vec<Sample> {
    let n = match split {
        Split::Train => cfg.data.train_size,
        Split::Val => cfg.data.val_size,
    };
    generate_dataset(cfg.seed, n, split)
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Command::TrainTeacher {
            common,
            out,
            log,
            max_steps,
        } => {
            let cfg = run_config(&common)?;
            let mut train = cfg.teacher_config();
            train.max_steps = max_steps.or(train.max_steps);
            let mut model = SlimModel::new(cfg.model.clone(), cfg.seed)?;
            let report = train_teacher(&mut model, &data(&cfg, Split::Train), &train, step_logger(log.as_ref(), 100)?)?;
            let val = evaluate(&model, model.space().largest(), &data(&cfg, Split::Val), exec(&common))?;
            checkpoint::save(&model, "teacher", &out)?;
            println!(
                "{} steps in {:.1}s, val accuracy {:.4}, wrote {}",
                report.steps,
                report.seconds,
                val.accuracy(),
                out.display()
            );
        }
        Command::TrainDst {
            common,
            teacher,
            out,
            log,
            strategy,
            k,
            random_init,
            max_steps,
        } => {
            let cfg = run_config(&common)?;
            let teacher = load(&teacher)?;
            let mut train = cfg.dst_config();
            train.strategy = strategy.unwrap_or(train.strategy);
            train.k = k.unwrap_or(train.k);
            train.max_steps = max_steps.or(train.max_steps);
            if random_init {
                train.init = InitMode::Random;
            }
            let student = init_dst(&teacher, cfg.model.clone(), train.init, cfg.seed)?;
            let mut trainer = DstTrainer::new(student, &teacher, train)?;
            let report = train_dst(&mut trainer, &data(&cfg, Split::Train), step_logger(log.as_ref(), 100)?)?;
            if report.teacher_checksum_before != report.teacher_checksum_after {
                bail!("teacher parameters changed during distillation");
            }
            checkpoint::save(&trainer.student, "dst", &out)?;
            println!("{} steps in {:.1}s, wrote {}", report.steps, report.seconds, out.display());
        }
        Command::Eval {
            common,
            checkpoint,
            arch,
            train,
        } => {
            let cfg = run_config(&common)?;
            let model = load(&checkpoint)?;
            let arch = pick(&model, &arch)?;
            let split = if train { Split::Train } else { Split::Val };
            let r = evaluate(&model, &arch, &data(&cfg, split), exec(&common))?;
            println!("{arch} accuracy {:.4} ({}/{})", r.accuracy(), r.correct, r.total);
        }
        Command::Export {
            common: _,
            checkpoint,
            arch,
            out,
        } => {
            let model = load(&checkpoint)?;
            let arch = pick(&model, &arch)?;
            let export = export_submodel(&model, &arch)?;
            checkpoint::save(&export, &format!("export {arch}"), &out)?;
            println!("{arch}: {} parameters, wrote {}", export.params.numel(), out.display());
        }
        Command::AnalyzeCost { common, preset, out } => {
            let model: ModelConfig = match preset.as_deref() {
                None => run_config(&common)?.model,
                Some("toy") => ModelConfig::toy(),
                Some("encoder-decoder") => ModelConfig::encoder_decoder_reference(),
                Some("unified") => ModelConfig::unified_reference(),
                Some(other) => bail!("unknown preset '{other}'"),
            };
            let rows = cost_table(&model, model.arch_space()?.selected())?;
            match out {
                Some(path) => write_cost_csv(&rows, File::create(path)?)?,
                None => write_cost_csv(&rows, std::io::stdout().lock())?,
            }
        }
        Command::Sweep {
            common,
            checkpoint,
            out,
        } => {
            let cfg = run_config(&common)?;
            let model = load(&checkpoint)?;
            let rows = run_sweep(&model, &data(&cfg, Split::Val), "val", cfg.seed, exec(&common))?;
            write_csv(&rows, File::create(&out)?)?;
            for r in &rows {
                println!("a({}, {}) flops {:>10} accuracy {:.4}", r.width, r.depth, r.flops, r.accuracy);
            }
        }
        Command::AttnDump {
            common,
            checkpoint,
            arch,
            sample,
            out,
        } => {
            let cfg = run_config(&common)?;
            let model = load(&checkpoint)?;
            let arch = pick(&model, &arch)?;
            let s = dst_core::synthdata::generate_sample(cfg.seed, Split::Val.first_index() + sample);
            let maps = capture_attention(&model, &arch, &s)?;
            serde_json::to_writer(BufWriter::new(File::create(&out)?), &maps)?;
            println!("{} attention maps for {arch}, wrote {}", maps.len(), out.display());
        }
    }
    Ok(())
}
