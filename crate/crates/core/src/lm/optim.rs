//! AdamW, learning-rate schedules, gradient clipping and the shared
//! minibatch training loop.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::params::{Params, Scalar};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-5, weight_decay: 0.0 }
    }
}

/// Optimisation settings for supervised and reward-model training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Learning rate at the final step as a fraction of the peak.
    pub final_lr_ratio: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// When set, run exactly this many steps, cycling through epochs.
    pub max_steps: Option<usize>,
    pub adam: AdamConfig,
    /// Global-norm clip; non-positive disables clipping.
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Reward-model defaults: one epoch, 1e-5 peak decaying to 1e-6, 3%
    /// warmup, batch 512.
    pub fn reward_defaults() -> Self {
        Self {
            learning_rate: 1e-5,
            final_lr_ratio: 0.1,
            warmup_fraction: 0.03,
            epochs: 1,
            batch_size: 512,
            max_steps: None,
            adam: AdamConfig::default(),
            grad_clip_norm: 1.0,
            seed: 0,
        }
    }

    /// Desk-scale supervised finetuning defaults.
    pub fn sft_defaults() -> Self {
        Self {
            learning_rate: 1e-3,
            final_lr_ratio: 0.1,
            warmup_fraction: 0.03,
            epochs: 1,
            batch_size: 16,
            max_steps: None,
            adam: AdamConfig::default(),
            grad_clip_norm: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup fraction must be in [0, 1], got {}", self.warmup_fraction)));
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return Err(Error::Config(format!("final lr ratio must be in [0, 1], got {}", self.final_lr_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, n: usize) -> usize {
        let per_epoch = n.div_ceil(self.batch_size.min(n).max(1));
        self.max_steps.unwrap_or(per_epoch * self.epochs)
    }
}

/// Linear warmup followed by either a linear decay to `peak * final_ratio`
/// or a constant plateau.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// `None` holds the peak after warmup.
    pub final_ratio: Option<f64>,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_fraction: f64, total_steps: usize, final_ratio: Option<f64>) -> Self {
        let warmup_steps = (warmup_fraction * total_steps as f64).floor() as usize;
        Self { peak, warmup_steps, total_steps, final_ratio }
    }

    /// Learning rate for 0-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.final_ratio {
            None => self.peak,
            Some(ratio) => {
                let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
                let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
                self.peak * (1.0 - (1.0 - ratio) * progress)
            }
        }
    }
}

/// Global L2 norm of one or more gradient buffers, in f64.
pub fn global_norm<S: Scalar>(grads: &[&[S]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| {
            let v = x.f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Scale gradients down so their joint norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut [&mut [S]], max_norm: f64) -> f64 {
    let norm = {
        let views: Vec<&[S]> = grads.iter().map(|g| &**g).collect();
        global_norm(&views)
    };
    if max_norm > 0.0 && norm > max_norm {
        let scale = S::of(max_norm / (norm + 1e-6));
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Self { config, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = c.eps as f32;
        let decay = (1.0 - lr * c.weight_decay) as f32;
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p = *p * decay - step * *m / (v.sqrt() / bc2_sqrt + eps);
        }
    }
}

/// Per-example `(loss, gradient)` contributions reduced in input order, so
/// the result does not depend on how the work was scheduled.
pub fn reduce_in_order<S: Scalar>(parts: Vec<(f64, Vec<S>)>, n: usize) -> (f64, Vec<S>) {
    let mut loss = 0.0;
    let mut grad = vec![S::zero(); n];
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    (loss, grad)
}

/// Map `f` over examples in parallel and reduce in input order.
pub fn par_loss_grad<T, S, F>(items: &[T], n_params: usize, f: F) -> Result<(f64, Vec<S>)>
where
    T: Sync,
    S: Scalar,
    F: Fn(&T, &mut [S]) -> Result<f64> + Sync,
{
    let parts: Result<Vec<(f64, Vec<S>)>> = items
        .par_iter()
        .map(|item| {
            let mut g = vec![S::zero(); n_params];
            let l = f(item, &mut g)?;
            Ok((l, g))
        })
        .collect();
    Ok(reduce_in_order(parts?, n_params))
}

/// What a training step reports back to the caller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Shuffled-minibatch training loop shared by SFT, reward-model and DPO
/// training. `loss_grad` returns the batch loss and its gradient; the loop
/// clips, steps AdamW and reports.
pub fn train_loop<T, F, R>(
    params: &mut Params<f32>,
    data: &[T],
    cfg: &TrainConfig,
    schedule: LrSchedule,
    mut loss_grad: F,
    mut report: R,
) -> Result<()>
where
    F: FnMut(&Params<f32>, &[&T]) -> Result<(f64, Vec<f32>)>,
    R: FnMut(&StepReport, &Params<f32>) -> Result<()>,
{
    let n = data.len();
    let batch = cfg.batch_size.min(n).max(1);
    let per_epoch = n.div_ceil(batch);
    let total = schedule.total_steps;
    let mut opt = AdamW::new(cfg.adam, params.data.len());
    let mut order: Vec<usize> = Vec::new();
    for step in 0..total {
        let epoch = step / per_epoch;
        let within = step % per_epoch;
        if within == 0 {
            order = (0..n).collect();
            order.shuffle(&mut seed::rng_for(cfg.seed, &[seed::stream::SHUFFLE, epoch as u64]));
        }
        let idx = &order[within * batch..((within + 1) * batch).min(n)];
        let items: Vec<&T> = idx.iter().map(|&i| &data[i]).collect();
        let (loss, mut grad) = loss_grad(params, &items)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite loss or gradient at step {step} (loss {loss})")));
        }
        let grad_norm = clip_global_norm(&mut [grad.as_mut_slice()], cfg.grad_clip_norm);
        let lr = schedule.lr(step);
        opt.step(&mut params.data, &grad, lr);
        params.version += 1;
        report(&StepReport { step, epoch, loss, lr, grad_norm }, params)?;
    }
    Ok(())
}
