//! PPO for language models: rollout, token-level KL shaping with the EOS
//! trick, GAE, batch-level advantage whitening, clipped policy and value
//! losses optimized jointly, and the per-minibatch forward mode for large
//! prompt batches.

pub mod gae;
pub mod losses;
pub mod rollout;
pub mod trainer;
pub mod value;

pub use gae::{compute_gae, whiten};
pub use losses::{ppo_policy_loss, ppo_policy_loss_and_grad, ppo_value_loss, ppo_value_loss_and_grad};
pub use rollout::{rollout, shape_token_rewards, terminal_reward, Episode, RolloutBatch};
pub use trainer::{episode_loss_and_grad, EpisodeLoss, train_ppo, train_ppo_observed, MinibatchInfo, NoObserver, PpoMetrics, PpoObserver};
pub use value::{value_backward, value_trace, ValueTrace};

use crate::error::{Error, Result};
use crate::lm::optim::AdamConfig;
use crate::lm::Params;

/// Same layout as a reward model; starts as an exact copy of one.
pub type ValueModelParams = Params<f32>;

/// How log-probabilities and values entering the losses are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch mode when one minibatch covers the whole rollout batch,
    /// minibatch mode otherwise.
    Auto,
    /// Rollout-time log-probabilities and values, advantages whitened over
    /// the whole batch.
    Batch,
    /// Fresh forward passes on each minibatch's first visit; shaping, GAE
    /// and whitening happen within the minibatch.
    Minibatch,
}

impl ForwardMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ForwardMode::Auto => "auto",
            ForwardMode::Batch => "batch",
            ForwardMode::Minibatch => "minibatch",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "auto" => Some(ForwardMode::Auto),
            "batch" => Some(ForwardMode::Batch),
            "minibatch" => Some(ForwardMode::Minibatch),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    /// `B`: prompts per batch.
    pub batch_prompts: usize,
    /// `r`: rollouts per prompt.
    pub rollouts_per_prompt: usize,
    /// `b`: episodes per minibatch update.
    pub minibatch: usize,
    /// `g`: gradient-accumulation slices per minibatch.
    pub grad_accum: usize,
    /// `E`: passes over the prompt pool.
    pub epochs: usize,
    /// `e`: optimisation passes over each rollout batch.
    pub inner_epochs: usize,
    /// `L_p`
    pub max_prompt_len: usize,
    /// `L_c`
    pub max_len: usize,
    pub tau: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lam: f64,
    pub eps_clip: f64,
    pub alpha: f64,
    /// `η`, held after warmup.
    pub eta: f64,
    pub warmup_fraction: f64,
    pub adam: AdamConfig,
    pub grad_clip_norm: f64,
    pub trunc_penalty: f64,
    pub seed: u64,
    pub forward_mode: ForwardMode,
    /// Stop after this many rollout batches.
    pub max_steps: Option<usize>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            batch_prompts: 64,
            rollouts_per_prompt: 1,
            minibatch: 64,
            grad_accum: 1,
            epochs: 1,
            inner_epochs: 1,
            max_prompt_len: 1024,
            max_len: 1024,
            tau: 0.7,
            beta: 0.05,
            gamma: 1.0,
            lam: 0.95,
            eps_clip: 0.2,
            alpha: 0.1,
            eta: 1e-6,
            warmup_fraction: 0.1,
            adam: AdamConfig::default(),
            grad_clip_norm: 1.0,
            trunc_penalty: -10.0,
            seed: 0,
            forward_mode: ForwardMode::Auto,
            max_steps: None,
        }
    }
}

impl PpoConfig {
    /// Episodes produced per rollout batch, `B · r`.
    pub fn episodes_per_batch(&self) -> usize {
        self.batch_prompts * self.rollouts_per_prompt
    }

    pub fn resolved_mode(&self) -> ForwardMode {
        match self.forward_mode {
            ForwardMode::Auto if self.minibatch >= self.episodes_per_batch() => ForwardMode::Batch,
            ForwardMode::Auto => ForwardMode::Minibatch,
            m => m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("B", self.batch_prompts),
            ("r", self.rollouts_per_prompt),
            ("b", self.minibatch),
            ("g", self.grad_accum),
            ("E", self.epochs),
            ("e", self.inner_epochs),
            ("L_p", self.max_prompt_len),
            ("L_c", self.max_len),
        ] {
            if v == 0 {
                return cfg(format!("{name} must be >= 1"));
            }
        }
        if self.minibatch > self.episodes_per_batch() {
            return cfg(format!(
                "b = {} exceeds the {} episodes of a rollout batch (B·r)",
                self.minibatch,
                self.episodes_per_batch()
            ));
        }
        if self.grad_accum > self.minibatch {
            return cfg(format!("g = {} exceeds b = {}", self.grad_accum, self.minibatch));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return cfg(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return cfg(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lam) {
            return cfg(format!("gamma and lam must lie in [0, 1], got {} and {}", self.gamma, self.lam));
        }
        if !(self.eps_clip > 0.0 && self.eps_clip.is_finite()) {
            return cfg(format!("eps_clip must be positive, got {}", self.eps_clip));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return cfg(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return cfg(format!("eta must be positive, got {}", self.eta));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return cfg(format!("warmup must be in [0, 1], got {}", self.warmup_fraction));
        }
        if !self.trunc_penalty.is_finite() {
            return cfg("trunc_penalty must be finite".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_hyperparameter_table() {
        let c = PpoConfig::default();
        assert_eq!((c.batch_prompts, c.rollouts_per_prompt, c.minibatch, c.grad_accum), (64, 1, 64, 1));
        assert_eq!((c.epochs, c.inner_epochs), (1, 1));
        assert_eq!((c.max_prompt_len, c.max_len), (1024, 1024));
        assert_eq!((c.tau, c.beta, c.gamma, c.lam), (0.7, 0.05, 1.0, 0.95));
        assert_eq!((c.eps_clip, c.alpha, c.eta, c.warmup_fraction), (0.2, 0.1, 1e-6, 0.1));
        assert_eq!((c.adam.beta1, c.adam.beta2, c.adam.eps, c.adam.weight_decay), (0.9, 0.95, 1e-5, 0.0));
        assert_eq!((c.grad_clip_norm, c.trunc_penalty), (1.0, -10.0));
        assert_eq!(c.resolved_mode(), ForwardMode::Batch);
        c.validate().unwrap();
    }

    #[test]
    fn large_batch_mode() {
        let c = PpoConfig { batch_prompts: 512, ..PpoConfig::default() };
        c.validate().unwrap();
        assert_eq!(c.resolved_mode(), ForwardMode::Minibatch);
    }

    #[test]
    fn degenerate_minibatch_rejected() {
        let c = PpoConfig { batch_prompts: 4, minibatch: 8, ..PpoConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = PpoConfig { batch_prompts: 4, rollouts_per_prompt: 2, minibatch: 8, ..PpoConfig::default() };
        c.validate().unwrap();
    }
}
