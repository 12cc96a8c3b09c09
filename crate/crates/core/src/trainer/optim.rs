use crate::backbone::ParamStore;
use crate::error::{DstError, Result};
use crate::numerics::GradStore;

use super::TrainConfig;

/// Learning rate for 1-based `epoch`: linear warmup to `base_lr`, flat
/// until `decay_after`, then multiplied by `decay_factor` every
/// `decay_every` epochs.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let e = epoch.max(1);
    if e <= cfg.warmup_epochs {
        return cfg.base_lr * e as f64 / cfg.warmup_epochs as f64;
    }
    if e <= cfg.decay_after {
        return cfg.base_lr;
    }
    let drops = (e - cfg.decay_after - 1) / cfg.decay_every.max(1) + 1;
    cfg.base_lr * cfg.decay_factor.powi(drops as i32)
}

/// Adam with bias correction; one moment pair per master parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn from_config(params: &ParamStore, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter. Nothing is written if any
    /// new value would be non-finite.
    pub fn update(&mut self, params: &mut ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(DstError::Config(format!(
                "{} gradient buffers for {} moment buffers",
                grads.len(),
                self.m.len()
            )));
        }
        let t = self.t + 1;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let mut next: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = Vec::with_capacity(self.m.len());
        for (id, g) in grads.iter().enumerate() {
            let p = params.get(id).data();
            let (m0, v0) = (&self.m[id], &self.v[id]);
            let mut m = Vec::with_capacity(g.len());
            let mut v = Vec::with_capacity(g.len());
            let mut out = Vec::with_capacity(g.len());
            for i in 0..g.len() {
                let mi = self.beta1 * m0[i] + (1.0 - self.beta1) * g[i];
                let vi = self.beta2 * v0[i] + (1.0 - self.beta2) * g[i] * g[i];
                let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                let pi = p[i] - step;
                if !pi.is_finite() {
                    return Err(DstError::NonFinite("optimizer update"));
                }
                m.push(mi);
                v.push(vi);
                out.push(pi);
            }
            next.push((m, v, out));
        }
        for (id, (m, v, p)) in next.into_iter().enumerate() {
            self.m[id] = m;
            self.v[id] = v;
            params.tensor_mut(id).data_mut().copy_from_slice(&p);
        }
        self.t = t;
        Ok(())
    }
}
