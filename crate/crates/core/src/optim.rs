//! Training hyperparameters, learning-rate schedule, routing schedule and AdamW.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{Model, Param, ParamMut};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_steps: u64,
    /// `None` means one full pass per epoch times `epochs`.
    pub total_steps: Option<u64>,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// First epoch (counting from 1) routed with k = 2.
    pub switch_epoch: u32,
    /// Fixes k for the whole run, overriding `switch_epoch`.
    pub top_k_only: Option<usize>,
    pub epochs: u32,
    pub noise_sigma: f64,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 3e-4,
            warmup_steps: 4000,
            total_steps: None,
            betas: (0.9, 0.95),
            adam_eps: 1e-8,
            weight_decay: 0.1,
            alpha: 0.4,
            beta: 0.6,
            gamma: 0.0,
            switch_epoch: 6,
            top_k_only: None,
            epochs: 10,
            noise_sigma: 0.0,
            seed: 0,
            grad_clip: Some(1.0),
            batch_size: 128,
            seq_len: 256,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return bad("lr_peak must be positive");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be positive");
        }
        if let Some(total) = self.total_steps {
            if self.warmup_steps > total {
                return bad("warmup_steps must not exceed total_steps");
            }
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.alpha >= 0.0 && self.beta >= 0.0 && self.gamma >= 0.0)
        {
            return bad("weight_decay, alpha, beta and gamma must be nonnegative");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.switch_epoch == 0 || self.switch_epoch > self.epochs + 1 {
            return bad("switch_epoch must lie in [1, epochs + 1]");
        }
        if self.top_k_only == Some(0) {
            return bad("top_k_only must be positive");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be nonnegative");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive when set");
            }
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive");
        }
        Ok(())
    }
}

/// Linear warmup to `lr_peak`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig, total_steps: u64) -> f64 {
    let warmup = cfg.warmup_steps.min(total_steps);
    if step < warmup {
        return cfg.lr_peak * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return cfg.lr_peak;
    }
    let progress = ((step - warmup) as f64 / (total_steps - warmup) as f64).min(1.0);
    cfg.lr_peak * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

/// Experts per token during `epoch` (counting from 1).
pub fn progressive_k(epoch: u32, cfg: &TrainConfig) -> usize {
    match cfg.top_k_only {
        Some(k) => k,
        None if epoch < cfg.switch_epoch => 1,
        None => 2,
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Model, max_norm: f64) -> f64 {
    let norm = global_norm(&grads.params());
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in grads.params_mut() {
            p.data.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

pub fn global_norm(params: &[Param<'_>]) -> f64 {
    libm::sqrt(
        params
            .iter()
            .flat_map(|p| p.data.iter())
            .map(|g| g * g)
            .sum(),
    )
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|p| alloc::vec![0.0; p.data.len()])
            .collect();
        Self {
            betas: cfg.betas,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update with learning rate `lr`.
    ///
    /// Decayed parameters first shrink by `lr · weight_decay · p`.
    pub fn update(
        &mut self,
        params: Vec<ParamMut<'_>>,
        grads: Vec<Param<'_>>,
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} arrays, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - libm::pow(b1, self.step as f64);
        let c2 = 1.0 - libm::pow(b2, self.step as f64);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.data.len() != g.data.len() || p.data.len() != self.m[i].len() {
                return Err(Error::DimensionMismatch {
                    context: "optimizer state",
                    expected: self.m[i].len(),
                    actual: p.data.len(),
                });
            }
            let shrink = if p.decay {
                1.0 - lr * self.weight_decay
            } else {
                1.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p.data[j] = p.data[j] * shrink - lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};

    fn cfg(warmup: u64) -> TrainConfig {
        TrainConfig {
            lr_peak: 1e-3,
            warmup_steps: warmup,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg(100);
        assert_eq!(lr_at(0, &c, 1000), 0.0);
        assert_eq!(lr_at(100, &c, 1000), 1e-3);
        assert!(lr_at(1000, &c, 1000).abs() < 1e-18);
        assert!((lr_at(50, &c, 1000) - 5e-4).abs() < 1e-15);
        assert!((lr_at(550, &c, 1000) - 5e-4).abs() < 1e-12);
        // continuous at the boundary
        assert!((lr_at(99, &c, 1000) - lr_at(101, &c, 1000)).abs() < 2e-5);
        let defaults = TrainConfig::default();
        assert_eq!(lr_at(4000, &defaults, 100_000), 3e-4);
    }

    #[test]
    fn progressive_schedule() {
        let defaults = TrainConfig::default();
        assert_eq!(progressive_k(3, &defaults), 1);
        assert_eq!(progressive_k(5, &defaults), 1);
        assert_eq!(progressive_k(6, &defaults), 2);
        assert_eq!(progressive_k(10, &defaults), 2);
        let immediate = TrainConfig {
            switch_epoch: 1,
            ..defaults.clone()
        };
        assert_eq!(progressive_k(1, &immediate), 2);
        let fixed = TrainConfig {
            top_k_only: Some(1),
            ..defaults
        };
        assert_eq!(progressive_k(9, &fixed), 1);
        let mut last = 0;
        for e in 1..=10 {
            let k = progressive_k(e, &TrainConfig::default());
            assert!(k >= last);
            last = k;
        }
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            switch_epoch: 12,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            warmup_steps: 10,
            total_steps: Some(5),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn decay_is_decoupled_and_selective() {
        let mut model = Model::build(
            ModelConfig {
                vocab_size: 32,
                ..ModelConfig::toy(Variant::Sra)
            },
            0,
        )
        .unwrap();
        for p in model.params_mut() {
            if p.name.contains("b_") || p.name.contains("beta") {
                p.data.iter_mut().for_each(|x| *x = 0.5);
            }
        }
        let before = model.clone();
        let grads = model.zeros_like();
        let c = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&model, &c);
        let lr = 0.01;
        opt.update(model.params_mut(), grads.params(), lr).unwrap();
        for (a, b) in before.params().iter().zip(model.params()) {
            for (x, y) in a.data.iter().zip(b.data) {
                let expect = if a.decay { x * (1.0 - lr * 0.1) } else { *x };
                assert_eq!(*y, expect, "{}", a.name);
            }
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut model = Model::build(
            ModelConfig {
                vocab_size: 32,
                ..ModelConfig::toy(Variant::Dense)
            },
            0,
        )
        .unwrap();
        let mut grads = model.zeros_like();
        grads.ln_final.beta[0] = 3.0;
        grads.ln_final.beta[1] = -0.2;
        let c = TrainConfig::default();
        let mut opt = AdamW::new(&model, &c);
        opt.update(model.params_mut(), grads.params(), 0.01)
            .unwrap();
        assert!((model.ln_final.beta[0] + 0.01).abs() < 1e-9);
        assert!((model.ln_final.beta[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn clipping() {
        let model = Model::build(
            ModelConfig {
                vocab_size: 32,
                ..ModelConfig::toy(Variant::Dense)
            },
            0,
        )
        .unwrap();
        let mut g = model.zeros_like();
        g.ln_final.gamma[0] = 3.0;
        g.ln_final.gamma[1] = 4.0;
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g.params()) - 1.0).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 2.0), 1.0);
        assert!((g.ln_final.gamma[0] - 0.6).abs() < 1e-12);
    }
}
