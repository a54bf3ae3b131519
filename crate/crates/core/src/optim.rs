//! AdamW with decoupled weight decay, global-norm clipping and a linear
//! warmup/decay schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Grads, ParamStore};
use crate::scalar::Scalar;

/// Optimization hyperparameters of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub warmup_steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub dropout: f64,
    /// Dev evaluation interval in updates; 0 evaluates only at the end.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch_size: 16,
            grad_accum: 1,
            warmup_steps: 30,
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-6,
            clip_norm: 1.0,
            dropout: 0.1,
            eval_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn full_scale(steps: usize, batch_size: usize, grad_accum: usize, warmup_steps: usize, lr: f64, weight_decay: f64) -> Self {
        TrainConfig {
            steps,
            batch_size,
            grad_accum,
            warmup_steps,
            lr,
            weight_decay,
            eval_every: 500,
            ..TrainConfig::default()
        }
    }

    /// Code-sequence encoder MLM pre-training.
    pub fn code_pretrain_full() -> Self {
        Self::full_scale(200_000, 64, 4, 4000, 7e-4, 0.01)
    }

    /// Long-document text encoder MLM pre-training.
    pub fn text_pretrain_full() -> Self {
        Self::full_scale(7000, 64, 16, 1000, 5e-4, 0.01)
    }

    /// Joint contrastive pre-training at 4096 tokens.
    pub fn contrastive_4k_full() -> Self {
        Self::full_scale(10_000, 64, 16, 1000, 1e-4, 0.1)
    }

    /// Joint contrastive pre-training after lengthening to 8192 tokens.
    pub fn contrastive_8k_full() -> Self {
        Self::full_scale(10_000, 32, 32, 1000, 7.5e-5, 0.1)
    }

    /// Code-description contrastive fine-tune.
    pub fn description_full() -> Self {
        Self::full_scale(250, 1024, 1, 50, 1e-4, 0.1)
    }

    /// Prompt fine-tuning on a 50-label task.
    pub fn prompt_top50_full() -> Self {
        Self::full_scale(1500, 64, 1, 200, 2.5e-5, 0.01)
    }

    /// Prompt fine-tuning on a rare 50-label task.
    pub fn prompt_rare50_full() -> Self {
        Self::full_scale(500, 48, 1, 200, 2.5e-5, 0.1)
    }

    /// Prompt fine-tuning over the full label space.
    pub fn prompt_full_labels_full() -> Self {
        Self::full_scale(10_000, 192, 1, 2000, 5e-5, 0.01)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return bad("steps, batch_size and grad_accum must be positive".into());
        }
        if self.warmup_steps > self.steps {
            return bad(format!("warmup_steps {} exceeds steps {}", self.warmup_steps, self.steps));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return bad("adam_eps and clip_norm must be positive, weight_decay nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LinearSchedule {
        LinearSchedule {
            peak: self.lr,
            warmup: self.warmup_steps,
            total: self.steps,
        }
    }
}

/// Linear warmup to `peak` over `warmup` updates, then linear decay to 0 at
/// `total`. Updates are numbered from 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LinearSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            self.peak * (step as f64 / self.warmup as f64)
        } else if step >= self.total {
            0.0
        } else {
            self.peak * ((self.total - step) as f64 / (self.total - self.warmup) as f64)
        }
    }
}

pub fn grad_norm<T: Scalar>(grads: &Grads<T>) -> f64 {
    grads.values().flat_map(|g| g.iter()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        grads.values_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    t: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub grad_norm: f64,
    pub lr: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn reset(&mut self) {
        self.t = 0;
        self.m.clear();
        self.v.clear();
    }

    /// Clips `grads`, then applies one AdamW update at learning rate `lr`.
    /// Weight decay applies to parameters of rank 2 or more.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &mut Grads<T>, lr: f64) -> Result<StepStats> {
        let norm = clip_grad_norm(grads, self.clip_norm);
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient" });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (ob1, ob2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            let decay = if p.rank() >= 2 { T::lit(lr * self.weight_decay) } else { T::zero() };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let step = T::lit(lr / bc1);
            let denom_c = T::lit(bc2.sqrt());
            let eps = T::lit(self.eps);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                *w -= decay * *w;
                *w -= step * *mi / ((*vi).sqrt() / denom_c + eps);
            }
        }
        Ok(StepStats { grad_norm: norm, lr })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_landmarks() {
        let s = LinearSchedule {
            peak: 1e-4,
            warmup: 100,
            total: 1000,
        };
        assert_eq!(s.lr(100), 1e-4);
        assert_eq!(s.lr(1000), 0.0);
        assert!((s.lr(50) - 5e-5).abs() < 1e-18);
        assert!((s.lr(550) - 5e-5).abs() < 1e-18);
        let no_warmup = LinearSchedule { warmup: 0, ..s };
        assert_eq!(no_warmup.lr(0), 1e-4);
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut g: Grads<f64> = BTreeMap::new();
        g.insert("a".into(), vec![6.0, 0.0]);
        g.insert("b".into(), vec![0.0, 8.0]);
        let before = clip_grad_norm(&mut g, 1.0);
        assert!((before - 10.0).abs() < 1e-12);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = g.clone();
        clip_grad_norm(&mut small, 5.0);
        assert_eq!(small, g);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            clip_norm: 1e9,
            ..TrainConfig::default()
        };
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::from_vec(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(&cfg);
        let mut g: Grads<f64> = BTreeMap::from([("w".to_string(), vec![0.5, -2.0])]);
        opt.step(&mut p, &mut g, 0.1).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-5);
        assert!((w[1] + 0.9).abs() < 1e-5);
    }

    #[test]
    fn decay_applies_to_matrices_only() {
        let cfg = TrainConfig {
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut p = ParamStore::<f64>::new();
        p.insert("m", Tensor::full(&[1, 1], 2.0)).unwrap();
        p.insert("b", Tensor::full(&[1], 2.0)).unwrap();
        let mut opt = AdamW::new(&cfg);
        let mut g: Grads<f64> = BTreeMap::from([("m".to_string(), vec![0.0]), ("b".to_string(), vec![0.0])]);
        opt.step(&mut p, &mut g, 0.1).unwrap();
        assert!((p.get("m").unwrap().data()[0] - 1.9).abs() < 1e-12);
        assert_eq!(p.get("b").unwrap().data()[0], 2.0);
    }

    #[test]
    fn presets_validate() {
        for c in [
            TrainConfig::code_pretrain_full(),
            TrainConfig::text_pretrain_full(),
            TrainConfig::contrastive_4k_full(),
            TrainConfig::contrastive_8k_full(),
            TrainConfig::description_full(),
            TrainConfig::prompt_top50_full(),
            TrainConfig::prompt_rare50_full(),
            TrainConfig::prompt_full_labels_full(),
            TrainConfig::default(),
        ] {
            c.validate().unwrap();
            assert_eq!(c.adam_eps, 1e-6);
            assert_eq!(c.clip_norm, 1.0);
        }
        assert_eq!(TrainConfig::description_full().steps, 250);
        assert_eq!(TrainConfig::prompt_top50_full().lr, 2.5e-5);
        assert_eq!(TrainConfig::prompt_top50_full().warmup_steps, 200);
    }
}
