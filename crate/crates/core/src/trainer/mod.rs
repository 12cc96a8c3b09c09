//! Teacher training and sandwich-sampled self-distillation.
//!
//! Every distillation step runs the frozen teacher once, then for each
//! sampled architecture runs a forward and backward pass whose gradients
//! are summed into one set of master buffers, then applies a single
//! optimizer update.

mod optim;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{Batch, EmbInit, ModelConfig, SlimModel};
use crate::error::{DstError, Result};
use crate::numerics::{GradStore, Graph, Rng, Tensor, Var};
use crate::slim_space::{ArchDescriptor, ArchSpace};
use crate::synthdata::Sample;

pub use optim::{lr_schedule, Adam};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdKind {
    #[default]
    KlSoftmax,
    BceSigmoid,
}

/// Source of each submodel's training target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// The frozen teacher's logits.
    #[default]
    KdFixedTeacher,
    /// The largest submodel's detached logits; the largest submodel itself
    /// learns from the labels.
    InplaceDistill,
    /// The labels, for every submodel.
    GroundTruth,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::KdFixedTeacher, Strategy::InplaceDistill, Strategy::GroundTruth];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::KdFixedTeacher => "kd-fixed-teacher",
            Strategy::InplaceDistill => "inplace-distill",
            Strategy::GroundTruth => "ground-truth",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = DstError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| DstError::Config(format!("unknown strategy '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    #[default]
    Teacher,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_factor: f64,
    pub decay_every: usize,
    /// Last epoch at the base rate.
    pub decay_after: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Architectures per iteration.
    pub k: usize,
    pub kd_kind: KdKind,
    pub strategy: Strategy,
    pub init: InitMode,
    pub seed: u64,
    /// Stop after this many iterations, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 13,
            batch_size: 64,
            base_lr: 1e-4,
            warmup_epochs: 3,
            decay_factor: 0.2,
            decay_every: 2,
            decay_after: 10,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            k: 4,
            kd_kind: KdKind::KlSoftmax,
            strategy: Strategy::KdFixedTeacher,
            init: InitMode::Teacher,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Teacher schedule for the synthetic task on one CPU core.
    pub fn toy() -> Self {
        Self {
            epochs: 2,
            batch_size: 32,
            base_lr: 3e-4,
            warmup_epochs: 1,
            decay_after: 1,
            decay_every: 1,
            ..Self::default()
        }
    }

    /// Distillation schedule for the synthetic task on one CPU core.
    pub fn toy_distill() -> Self {
        Self {
            epochs: 4,
            decay_after: 3,
            ..Self::toy()
        }
    }

    pub fn validate(&self, space: Option<&ArchSpace>) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.warmup_epochs == 0 || self.decay_every == 0 {
            return Err(DstError::Config("epochs, batch_size, warmup_epochs and decay_every must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(DstError::Config(format!("decay_factor {} outside (0, 1)", self.decay_factor)));
        }
        if !(self.base_lr > 0.0) {
            return Err(DstError::Config("base_lr must be positive".into()));
        }
        if let Some(space) = space {
            let n = space.selected().len();
            if self.k < 2 || self.k > n {
                return Err(DstError::Config(format!("k = {} outside [2, {n}]", self.k)));
            }
        }
        Ok(())
    }
}

/// `KL(softmax(teacher) ‖ softmax(student))` or mean element-wise BCE of
/// `sigmoid(student)` against `sigmoid(teacher)`; the teacher is constant.
pub fn kd_loss(g: &mut Graph, student: Var, teacher: &Tensor, kind: KdKind) -> Result<Var> {
    match kind {
        KdKind::KlSoftmax => g.kl_div(student, teacher),
        KdKind::BceSigmoid => g.bce_with_logits(student, teacher),
    }
}

/// `Ω = {a_s, a_l}` plus `k − 2` uniform draws without replacement from the
/// rest of the selected set, in draw order.
pub fn sample_architectures(space: &ArchSpace, k: usize, rng: &mut Rng) -> Result<Vec<ArchDescriptor>> {
    let all = space.selected();
    if k < 2 || k > all.len() {
        return Err(DstError::Config(format!("k = {k} outside [2, {}]", all.len())));
    }
    let (small, large) = (space.smallest().clone(), space.largest().clone());
    let mut rest: Vec<&ArchDescriptor> = all.iter().filter(|a| **a != small && **a != large).collect();
    let mut omega = vec![small, large];
    omega.dedup();
    while omega.len() < k {
        let i = rng.below(rest.len());
        omega.push(rest.remove(i).clone());
    }
    Ok(omega)
}

/// Checks the sandwich invariants of a sampled set.
pub fn validate_omega(space: &ArchSpace, omega: &[ArchDescriptor]) -> Result<()> {
    let bad = |why: String| Err(DstError::InvalidArch(why));
    if !omega.contains(space.smallest()) || !omega.contains(space.largest()) {
        return bad("sampled set misses the smallest or largest architecture".into());
    }
    for (i, a) in omega.iter().enumerate() {
        if !space.contains(a) {
            return bad(format!("{a} is not selected"));
        }
        if omega[..i].contains(a) {
            return bad(format!("{a} sampled twice"));
        }
    }
    Ok(())
}

/// Fixed-size batches over a seed-determined permutation of `data`.
pub fn epoch_batches(data: &[Sample], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    Rng::with_stream(seed, epoch as u64).shuffle(&mut order);
    order
        .chunks(batch_size)
        .map(|idx| {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
            Batch::from_samples(&refs)
        })
        .collect()
}

fn as_divergence(step: usize) -> impl Fn(DstError) -> DstError {
    move |e| match e {
        DstError::NonFinite(_) => DstError::Divergence { step, loss: f64::NAN },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchLoss {
    pub width: usize,
    pub depth: usize,
    pub loss: f64,
}

/// One machine-readable log line per iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub losses: Vec<ArchLoss>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub updates: u64,
    pub final_loss: f64,
    pub seconds: f64,
    pub teacher_checksum_before: Option<u64>,
    pub teacher_checksum_after: Option<u64>,
}

/// Cross-entropy training of the full architecture.
pub fn train_teacher(
    model: &mut SlimModel,
    data: &[Sample],
    cfg: &TrainConfig,
    mut log: impl FnMut(&StepRecord),
) -> Result<TrainReport> {
    cfg.validate(None)?;
    let start = std::time::Instant::now();
    let arch = model.space().largest().clone();
    let mut opt = Adam::from_config(&model.params, cfg);
    let mut grads = GradStore::zeros_like(&model.params, model.params.len());
    let mut report = TrainReport::default();
    'epochs: for epoch in 1..=cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        for batch in epoch_batches(data, cfg.batch_size, cfg.seed, epoch)? {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                break 'epochs;
            }
            let step = report.steps;
            let mut g = Graph::new();
            let loss = model
                .forward(&mut g, &batch, &arch)
                .and_then(|v| g.cross_entropy(v.logits, &batch.labels))
                .map_err(as_divergence(step))?;
            let value = g.value(loss).data()[0];
            let ng = g.backward(loss)?;
            grads.zero();
            g.accumulate(&ng, &mut grads);
            opt.update(&mut model.params, &grads, lr).map_err(as_divergence(step))?;
            report.steps += 1;
            report.final_loss = value;
            log(&StepRecord {
                step,
                epoch,
                lr,
                losses: vec![ArchLoss {
                    width: arch.width,
                    depth: arch.depth,
                    loss: value,
                }],
            });
        }
    }
    report.updates = opt.steps();
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// A student over `config` starting from the teacher's weights or from a
/// fresh random draw.
pub fn init_dst(teacher: &SlimModel, config: ModelConfig, mode: InitMode, seed: u64) -> Result<SlimModel> {
    match mode {
        InitMode::Teacher => SlimModel::from_params(config, teacher.params.clone()),
        InitMode::Random => {
            let student = SlimModel::with_init(config, seed, EmbInit::Random)?;
            student.params.check_compatible(&teacher.params)?;
            Ok(student)
        }
    }
}

/// Distillation state: the student, its optimizer and gradient buffers,
/// and a borrowed frozen teacher.
pub struct DstTrainer<'t> {
    pub student: SlimModel,
    teacher: &'t SlimModel,
    cfg: TrainConfig,
    opt: Adam,
    grads: GradStore,
    rng: Rng,
    steps: usize,
}

impl<'t> DstTrainer<'t> {
    pub fn new(student: SlimModel, teacher: &'t SlimModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate(Some(student.space()))?;
        student.params.check_compatible(&teacher.params)?;
        let opt = Adam::from_config(&student.params, &cfg);
        let grads = GradStore::zeros_like(&student.params, student.params.len());
        // batch shuffling uses streams 1..=epochs
        let rng = Rng::with_stream(cfg.seed, u64::MAX);
        Ok(Self {
            student,
            teacher,
            cfg,
            opt,
            grads,
            rng,
            steps: 0,
        })
    }

    pub fn updates(&self) -> u64 {
        self.opt.steps()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Gradients accumulated by the last step, before they were cleared.
    pub fn last_grads(&self) -> &GradStore {
        &self.grads
    }

    pub fn sample(&mut self) -> Result<Vec<ArchDescriptor>> {
        sample_architectures(self.student.space(), self.cfg.k, &mut self.rng)
    }

    /// Samples `Ω` and runs one iteration.
    pub fn step(&mut self, batch: &Batch, epoch: usize) -> Result<StepRecord> {
        let omega = self.sample()?;
        self.step_with(batch, epoch, &omega)
    }

    /// One iteration over a given `Ω`.
    pub fn step_with(&mut self, batch: &Batch, epoch: usize, omega: &[ArchDescriptor]) -> Result<StepRecord> {
        validate_omega(self.student.space(), omega)?;
        let step = self.steps;
        let lr = lr_schedule(epoch, &self.cfg);
        let accumulated = self.accumulate(batch, omega).map_err(as_divergence(step))?;
        let mut losses: Vec<ArchLoss> = omega
            .iter()
            .map(|a| ArchLoss {
                width: a.width,
                depth: a.depth,
                loss: accumulated.iter().find(|(b, _)| b == a).map_or(f64::NAN, |x| x.1),
            })
            .collect();
        if let Some(bad) = losses.iter().find(|l| !l.loss.is_finite()) {
            return Err(DstError::Divergence { step, loss: bad.loss });
        }
        self.opt
            .update(&mut self.student.params, &self.grads, lr)
            .map_err(as_divergence(step))?;
        self.steps += 1;
        losses.shrink_to_fit();
        Ok(StepRecord { step, epoch, lr, losses })
    }

    /// Zeroes the buffers, then sums every architecture's gradient into
    /// them; returns the per-architecture losses in processing order.
    pub fn accumulate(&mut self, batch: &Batch, omega: &[ArchDescriptor]) -> Result<Vec<(ArchDescriptor, f64)>> {
        self.grads.zero();
        let mut order: Vec<&ArchDescriptor> = omega.iter().collect();
        let mut target = match self.cfg.strategy {
            Strategy::KdFixedTeacher => {
                let arch = self.teacher.space().largest();
                Some(self.teacher.logits(batch, arch)?)
            }
            Strategy::InplaceDistill => {
                // the dynamic teacher must run first
                let largest = self.student.space().largest();
                order.sort_by_key(|a| *a != largest);
                None
            }
            Strategy::GroundTruth => None,
        };
        let mut out = Vec::with_capacity(order.len());
        for arch in order {
            let mut g = Graph::new();
            let vars = self.student.forward(&mut g, batch, arch)?;
            let loss = match &target {
                Some(t) => kd_loss(&mut g, vars.logits, t, self.cfg.kd_kind)?,
                None => g.cross_entropy(vars.logits, &batch.labels)?,
            };
            if self.cfg.strategy == Strategy::InplaceDistill && target.is_none() {
                target = Some(g.value(vars.logits).clone());
            }
            let ng = g.backward(loss)?;
            g.accumulate(&ng, &mut self.grads);
            out.push((arch.clone(), g.value(loss).data()[0]));
        }
        Ok(out)
    }
}

/// Distillation over `data` for `cfg.epochs` epochs (or `cfg.max_steps`).
pub fn train_dst(
    trainer: &mut DstTrainer<'_>,
    data: &[Sample],
    mut log: impl FnMut(&StepRecord),
) -> Result<TrainReport> {
    let start = std::time::Instant::now();
    let before = trainer.teacher.params.checksum();
    let cfg = trainer.cfg.clone();
    let mut report = TrainReport {
        teacher_checksum_before: Some(before),
        ..TrainReport::default()
    };
    'epochs: for epoch in 1..=cfg.epochs {
        for batch in epoch_batches(data, cfg.batch_size, cfg.seed, epoch)? {
            if cfg.max_steps.is_some_and(|m| trainer.steps() >= m) {
                break 'epochs;
            }
            let rec = trainer.step(&batch, epoch)?;
            report.final_loss = rec.losses.iter().map(|l| l.loss).sum::<f64>() / rec.losses.len() as f64;
            log(&rec);
        }
    }
    report.steps = trainer.steps();
    report.updates = trainer.updates();
    report.teacher_checksum_after = Some(trainer.teacher.params.checksum());
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
