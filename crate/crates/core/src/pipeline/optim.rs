//! Warmup-cosine learning-rate schedule and AdamW with global-norm clipping.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;

/// Optimizer and loop settings for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub min_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Overrides the step count implied by `epochs`.
    pub steps: Option<usize>,
    /// Loss weight of answer tokens relative to other tokens.
    pub answer_weight: f32,
    pub stage: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_frac: 0.1,
            min_lr_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            batch: 8,
            epochs: 2,
            steps: None,
            answer_weight: 1.0,
            stage: String::new(),
        }
    }
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: "stage1".into(),
            ..Self::default()
        }
    }

    pub fn stage2() -> Self {
        Self {
            peak_lr: 5e-4,
            stage: "stage2".into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{}: {m}", self.stage)));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("warmup_frac and min_lr_ratio must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("betas must lie in [0, 1) and eps be positive");
        }
        if self.batch == 0 || (self.epochs == 0 && self.steps.is_none()) {
            return bad("batch and epochs must be positive");
        }
        let finite = [self.eps, self.grad_clip, self.weight_decay, self.answer_weight as f64]
            .iter()
            .all(|x| x.is_finite());
        if !finite || self.grad_clip <= 0.0 || self.weight_decay < 0.0 || self.answer_weight < 0.0 {
            return bad("grad_clip must be positive, weight_decay and answer_weight finite and non-negative");
        }
        Ok(())
    }

    /// Optimizer steps for `n_samples` training sequences.
    pub fn total_steps(&self, n_samples: usize) -> usize {
        self.steps
            .unwrap_or_else(|| (self.epochs * n_samples).div_ceil(self.batch))
            .max(1)
    }
}

/// Linear warmup from 0 to `peak_lr` over the first `warmup_frac` of the
/// steps, then cosine decay to `min_lr_ratio·peak_lr` at `total`.
pub fn lr_schedule(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.peak_lr;
    let total = total.max(1) as f64;
    let step = (step as f64).min(total);
    let warm = cfg.warmup_frac * total;
    if step < warm {
        return peak * step / warm;
    }
    let span = total - warm;
    let progress = if span > 0.0 { (step - warm) / span } else { 1.0 };
    let floor = cfg.min_lr_ratio * peak;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Moments for one parameter.
#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Decoupled-weight-decay Adam with bias correction. State is keyed by
/// parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    state: HashMap<String, Moments>,
    pub t: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clips `grads` to global norm `cfg.grad_clip`, then updates the named
    /// parameters of `params` in place.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[(String, Vec<f32>)],
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<StepStats> {
        let mut sq = 0.0f64;
        for (name, g) in grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGrad { name: name.clone() });
            }
            sq += g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        }
        let grad_norm = sq.sqrt();
        let clipped = grad_norm > cfg.grad_clip;
        let scale = if clipped { cfg.grad_clip / grad_norm } else { 1.0 };
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::ConfigMismatch(format!("optimizer got unknown parameter {name}")))?;
            if p.numel() != g.len() {
                return Err(Error::Shape(format!("{name}: {} grads for {} values", g.len(), p.numel())));
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (((x, &gi), m), v) in p.data_mut().iter_mut().zip(g).zip(&mut st.m).zip(&mut st.v) {
                let gi = gi as f64 * scale;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                let upd = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
                let xd = *x as f64;
                *x = (xd - lr * cfg.weight_decay * xd - lr * upd) as f32;
            }
        }
        Ok(StepStats { grad_norm, clipped })
    }
}
