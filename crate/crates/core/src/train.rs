//! Shared update loop: epoch-shuffled batches, gradient accumulation,
//! scheduled AdamW updates and best-dev snapshotting.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{accumulate_grads, Grads, ParamStore};
use crate::optim::{AdamW, TrainConfig};
use crate::rng::{stream, streams, StreamRng};

/// Draws batches of indices without replacement, reshuffling each epoch.
pub struct BatchSampler {
    n: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    rng: StreamRng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        BatchSampler {
            n,
            batch: batch.min(n),
            order: Vec::new(),
            pos: n,
            rng: stream(seed, streams::SAMPLING),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.n {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Fixed evaluation chunks: consecutive full batches, or one chunk holding
/// everything when there are fewer items than a batch.
pub fn eval_chunks(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    if n <= batch {
        return if n == 0 { Vec::new() } else { std::iter::once(0..n).collect() };
    }
    (0..n / batch).map(|c| c * batch..(c + 1) * batch).collect()
}

/// One logged update. `components` are averaged over accumulation steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub components: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub logs: Vec<StepLog>,
    /// `(step, dev score)`; lower is better.
    pub dev: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_dev: f64,
}

/// Gradients and loss components of one micro-batch; `None` skips it.
pub type MicroResult = Result<Option<(Grads<f32>, Vec<f64>)>>;

/// Runs `tc.steps` updates. `micro(params, batch, counter)` computes one
/// micro-batch, `constrain` runs after each update and `eval` returns a dev
/// score to minimize. The parameters with the best dev score are restored at
/// the end.
pub fn run(
    params: &mut ParamStore<f32>,
    tc: &TrainConfig,
    n_train: usize,
    mut micro: impl FnMut(&ParamStore<f32>, &[usize], u64) -> MicroResult,
    mut constrain: impl FnMut(&mut ParamStore<f32>),
    mut eval: impl FnMut(&ParamStore<f32>) -> Result<f64>,
) -> Result<Outcome> {
    tc.validate()?;
    if n_train == 0 {
        return Err(Error::Train("empty training set".into()));
    }
    let mut sampler = BatchSampler::new(n_train, tc.batch_size, tc.seed);
    let mut opt = AdamW::new(tc);
    let sched = tc.schedule();
    let mut out = Outcome {
        best_dev: f64::INFINITY,
        ..Outcome::default()
    };
    let mut best = params.clone();
    let mut counter = 0u64;
    for step in 1..=tc.steps {
        let mut acc: Grads<f32> = Grads::new();
        let mut sums: Vec<f64> = Vec::new();
        let mut used = 0usize;
        for _ in 0..tc.grad_accum {
            let batch = sampler.next_batch();
            counter += 1;
            let Some((g, comps)) = micro(params, &batch, counter)? else {
                continue;
            };
            if comps.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite { op: "loss" });
            }
            sums.resize(comps.len(), 0.0);
            sums.iter_mut().zip(&comps).for_each(|(s, c)| *s += c);
            accumulate_grads(&mut acc, g);
            used += 1;
        }
        let lr = sched.lr(step);
        let mut norm = 0.0;
        if used > 0 {
            let inv = 1.0 / used as f32;
            acc.values_mut().flat_map(|v| v.iter_mut()).for_each(|x| *x *= inv);
            norm = opt.step(params, &mut acc, lr)?.grad_norm;
            constrain(params);
            sums.iter_mut().for_each(|s| *s /= used as f64);
        }
        out.logs.push(StepLog {
            step,
            lr,
            grad_norm: norm,
            components: sums,
        });
        let due = tc.eval_every > 0 && step % tc.eval_every == 0;
        if due || step == tc.steps {
            let score = eval(params)?;
            if !score.is_finite() {
                return Err(Error::NonFinite { op: "dev evaluation" });
            }
            log::info!("step {step}: dev {score:.5}");
            out.dev.push((step, score));
            if score < out.best_dev {
                out.best_dev = score;
                out.best_step = step;
                best = params.clone();
            }
        }
    }
    *params = best;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 4, 3);
        let mut seen: Vec<usize> = s.next_batch();
        seen.extend(s.next_batch());
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
        assert_eq!(BatchSampler::new(3, 8, 0).next_batch().len(), 3);
    }

    #[test]
    fn chunks() {
        assert_eq!(eval_chunks(35, 16), vec![0..16, 16..32]);
        assert_eq!(eval_chunks(5, 16), vec![0..5]);
        assert!(eval_chunks(0, 16).is_empty());
    }

    #[test]
    fn minimizes_quadratic_and_keeps_best() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(vec![2], vec![3.0f32, -2.0]).unwrap()).unwrap();
        let tc = TrainConfig {
            steps: 200,
            warmup_steps: 10,
            lr: 0.1,
            eval_every: 10,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let out = run(
            &mut p,
            &tc,
            4,
            |p, _, _| {
                let w = p.get("w")?.data().to_vec();
                let loss = w.iter().map(|x| (x * x) as f64).sum::<f64>();
                let mut g = Grads::new();
                g.insert("w".to_string(), w.iter().map(|x| 2.0 * x).collect());
                Ok(Some((g, vec![loss])))
            },
            |_| {},
            |p| Ok(p.get("w")?.data().iter().map(|x| (x * x) as f64).sum()),
        )
        .unwrap();
        assert_eq!(out.logs.len(), 200);
        assert!(out.best_dev < 1e-2);
        let end: f64 = p.get("w").unwrap().data().iter().map(|x| (x * x) as f64).sum();
        assert_eq!(end, out.best_dev);
    }
}
