//! The PPO training loop.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::gae::{compute_gae, whiten};
use super::losses::{ppo_policy_loss_and_grad, ppo_value_loss_and_grad};
use super::rollout::{rollout, shape_token_rewards, terminal_reward, Episode};
use super::value::{value_backward, value_trace};
use super::{ForwardMode, PpoConfig, ValueModelParams};
use crate::error::{Error, Result};
use crate::lm::optim::{clip_global_norm, AdamW, LrSchedule};
use crate::lm::{eval_response, response_backward, ModelKind, Params, PolicyParams, Scalar};
use crate::pref_data::PromptPool;
use crate::reward::{score, RewardModelParams};
use crate::seed;

/// One row of the training log, written once per rollout batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoMetrics {
    pub step: usize,
    /// Mean over the batch's minibatch updates.
    pub policy_loss: f64,
    pub value_loss: f64,
    pub mean_terminal_reward: f64,
    /// Mean per-episode sum of `log π − log π_ref` at the sampled tokens.
    pub mean_kl: f64,
    pub fraction_truncated: f64,
    pub mean_continuation_length: f64,
}

impl PpoMetrics {
    pub const COLUMNS: [&'static str; 7] = [
        "step",
        "policy_loss",
        "value_loss",
        "mean_terminal_reward",
        "mean_kl",
        "fraction_truncated",
        "mean_continuation_length",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.step as f64,
            self.policy_loss,
            self.value_loss,
            self.mean_terminal_reward,
            self.mean_kl,
            self.fraction_truncated,
            self.mean_continuation_length,
        ]
    }
}

/// Reported after every minibatch update.
#[derive(Debug, Clone, PartialEq)]
pub struct MinibatchInfo {
    pub step: usize,
    pub inner_epoch: usize,
    pub index: usize,
    pub episodes: Vec<usize>,
    /// Log-probabilities and values came from a forward pass made at the
    /// start of this minibatch.
    pub fresh_forward: bool,
    /// `max_t |log π_new(y_t) − log π_old(y_t)|` before the update, i.e.
    /// how far `ν_t` is from 1.
    pub max_log_ratio: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub trait PpoObserver {
    /// Called once per batch after all updates, with every episode's
    /// rewards, advantages and returns filled in.
    fn on_rollout(&mut self, _step: usize, _episodes: &[Episode]) -> Result<()> {
        Ok(())
    }
    fn on_minibatch(&mut self, _info: &MinibatchInfo) -> Result<()> {
        Ok(())
    }
    fn on_step(&mut self, _metrics: &PpoMetrics, _policy: &PolicyParams, _value: &ValueModelParams) -> Result<()> {
        Ok(())
    }
    fn on_epoch(&mut self, _epoch: usize, _policy: &PolicyParams, _value: &ValueModelParams) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl PpoObserver for NoObserver {}

/// Per-episode terms of one minibatch loss.
#[derive(Debug, Clone, Copy, Default)]
pub struct EpisodeLoss {
    pub policy: f64,
    pub value: f64,
    pub max_log_ratio: f64,
}

/// Adds episode `ep`'s share of `L_π + α·L_V` to the gradients, where both
/// losses are means over all `total_tokens` tokens of the minibatch.
#[allow(clippy::too_many_arguments)]
pub fn episode_loss_and_grad<S: Scalar>(
    policy: &Params<S>,
    value: &Params<S>,
    ep: &Episode,
    total_tokens: usize,
    eps_clip: f64,
    alpha: f64,
    grad_policy: &mut [S],
    grad_value: &mut [S],
) -> Result<EpisodeLoss> {
    let weight = ep.len() as f64 / total_tokens as f64;
    let ev = eval_response(policy, &ep.prompt, &ep.continuation)?;
    let new: Vec<f64> = ev.logprobs.iter().map(|x| x.f64()).collect();
    let max_log_ratio = new.iter().zip(&ep.rollout_logprobs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let (pl, pg) = ppo_policy_loss_and_grad(&new, &ep.rollout_logprobs, &ep.advantages, eps_clip)?;
    let dlogp: Vec<S> = pg.iter().map(|g| S::of(g * weight)).collect();
    response_backward(policy, &ev, &dlogp, None, grad_policy);

    let vt = value_trace(value, &ep.prompt, &ep.continuation)?;
    let v_new: Vec<f64> = vt.values.iter().map(|x| x.f64()).collect();
    let (vl, vg) = ppo_value_loss_and_grad(&v_new, &ep.values, &ep.returns, eps_clip)?;
    let dv: Vec<S> = vg.iter().map(|g| S::of(g * weight * alpha)).collect();
    value_backward(value, &vt, &dv, grad_value);
    Ok(EpisodeLoss { policy: pl * weight, value: vl * weight, max_log_ratio })
}

/// Fill in shaped rewards, advantages and returns from the episode's
/// log-probabilities and values; advantages are whitened jointly over
/// `episodes`.
fn assign_advantages(episodes: &mut [&mut Episode], config: &PpoConfig) -> Result<()> {
    let mut pooled = Vec::new();
    for ep in episodes.iter_mut() {
        ep.terminal_reward = terminal_reward(ep.rm_score, ep.truncated, config.trunc_penalty);
        ep.shaped_rewards = shape_token_rewards(&ep.rollout_logprobs, &ep.ref_logprobs, ep.terminal_reward, config.beta)?;
        let (adv, ret) = compute_gae(&ep.shaped_rewards, &ep.values, config.gamma, config.lam)?;
        pooled.extend_from_slice(&adv);
        ep.advantages = adv;
        ep.returns = ret;
    }
    let white = whiten(&pooled, true);
    let mut at = 0;
    for ep in episodes.iter_mut() {
        let n = ep.advantages.len();
        ep.advantages.copy_from_slice(&white[at..at + n]);
        at += n;
    }
    Ok(())
}

fn finite_or(what: &str, step: usize, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::Numerical(format!("non-finite {what} at batch {step} (entry {i}: {})", xs[i]))),
        None => Ok(()),
    }
}

pub fn train_ppo(
    config: &PpoConfig,
    policy_init: &PolicyParams,
    reference: &PolicyParams,
    reward: &RewardModelParams,
    prompts: &PromptPool,
) -> Result<(PolicyParams, ValueModelParams)> {
    train_ppo_observed(config, policy_init, reference, reward, prompts, &mut NoObserver)
}

/// Runs `E` passes over the prompt pool in batches of `B` prompts.
///
/// The reference and reward models are only read. The value model starts
/// as a copy of the reward model and is optimized alongside the policy
/// with its own AdamW state; both follow the same learning-rate schedule
/// and share one gradient-norm clip.
pub fn train_ppo_observed(
    config: &PpoConfig,
    policy_init: &PolicyParams,
    reference: &PolicyParams,
    reward: &RewardModelParams,
    prompts: &PromptPool,
    observer: &mut dyn PpoObserver,
) -> Result<(PolicyParams, ValueModelParams)> {
    config.validate()?;
    if prompts.prompts.is_empty() {
        return Err(Error::Config("train_ppo needs a non-empty prompt pool".into()));
    }
    if reward.kind != ModelKind::Reward {
        return Err(Error::Shape(format!("expected a reward model, got a {} model", reward.kind.as_str())));
    }
    policy_init.check_compatible(reference)?;
    let tokens: Vec<Vec<u32>> = prompts.prompts.iter().map(|p| crate::pref_data::prompt_tokens(&p.prompt)).collect();

    let mode = config.resolved_mode();
    let n = tokens.len();
    let per_epoch = n.div_ceil(config.batch_prompts);
    let total_batches = config.max_steps.map_or(per_epoch * config.epochs, |m| m.min(per_epoch * config.epochs));
    let batch_len = |within: usize| config.batch_prompts.min(n - within * config.batch_prompts);
    let total_updates: usize = (0..total_batches)
        .map(|s| config.inner_epochs * (batch_len(s % per_epoch) * config.rollouts_per_prompt).div_ceil(config.minibatch))
        .sum();
    let schedule = LrSchedule::new(config.eta, config.warmup_fraction, total_updates, None);

    let mut policy = policy_init.clone();
    let mut value = reward.with_kind(ModelKind::Value);
    value.version = 0;
    let np = policy.data.len();
    let nv = value.data.len();
    let mut opt_policy = AdamW::new(config.adam, np);
    let mut opt_value = AdamW::new(config.adam, nv);
    let mut update = 0usize;
    let mut order: Vec<usize> = Vec::new();

    for step in 0..total_batches {
        let epoch = step / per_epoch;
        let within = step % per_epoch;
        if within == 0 {
            order = (0..n).collect();
            order.shuffle(&mut seed::rng_for(config.seed, &[seed::stream::SHUFFLE, epoch as u64]));
        }
        let start = within * config.batch_prompts;
        let batch_prompts: Vec<Vec<u32>> =
            order[start..start + batch_len(within)].iter().map(|&i| tokens[i].clone()).collect();

        let mut episodes = rollout(&policy, &batch_prompts, config, step)?.episodes;
        episodes.par_iter_mut().try_for_each(|ep| -> Result<()> {
            if !ep.truncated {
                ep.rm_score = score(reward, &ep.prompt, &ep.continuation)?;
            }
            let ev = eval_response(reference, &ep.prompt, &ep.continuation)?;
            ep.ref_logprobs = ev.logprobs.iter().map(|&x| x as f64).collect();
            if mode == ForwardMode::Batch {
                ep.values = value_trace(&value, &ep.prompt, &ep.continuation)?.values.iter().map(|&x| x as f64).collect();
            }
            Ok(())
        })?;
        if mode == ForwardMode::Batch {
            let mut all: Vec<&mut Episode> = episodes.iter_mut().collect();
            assign_advantages(&mut all, config)?;
        }

        let mut loss_sums = (0.0, 0.0);
        let mut n_updates = 0usize;
        for inner in 0..config.inner_epochs {
            let mut perm: Vec<usize> = (0..episodes.len()).collect();
            perm.shuffle(&mut seed::rng_for(config.seed, &[seed::stream::MINIBATCH, step as u64, inner as u64]));
            for (index, chunk) in perm.chunks(config.minibatch).enumerate() {
                let mut idx = chunk.to_vec();
                idx.sort_unstable();
                let fresh = mode == ForwardMode::Minibatch && inner == 0;
                if fresh {
                    let (p, v) = (&policy, &value);
                    let mut picked: Vec<&mut Episode> = episodes
                        .iter_mut()
                        .enumerate()
                        .filter(|(i, _)| idx.binary_search(i).is_ok())
                        .map(|(_, e)| e)
                        .collect();
                    picked.par_iter_mut().try_for_each(|ep| -> Result<()> {
                        let ev = eval_response(p, &ep.prompt, &ep.continuation)?;
                        ep.rollout_logprobs = ev.logprobs.iter().map(|&x| x as f64).collect();
                        ep.values = value_trace(v, &ep.prompt, &ep.continuation)?.values.iter().map(|&x| x as f64).collect();
                        Ok(())
                    })?;
                    assign_advantages(&mut picked, config)?;
                }

                let total_tokens: usize = idx.iter().map(|&i| episodes[i].len()).sum();
                let mut grad = vec![0f32; np + nv];
                let mut stats = EpisodeLoss::default();
                let slice = idx.len().div_ceil(config.grad_accum);
                for part in idx.chunks(slice) {
                    let (p, v) = (&policy, &value);
                    let results: Vec<(EpisodeLoss, Vec<f32>)> = part
                        .par_iter()
                        .map(|&i| {
                            let mut g = vec![0f32; np + nv];
                            let (gp, gv) = g.split_at_mut(np);
                            let l = episode_loss_and_grad(
                                p,
                                v,
                                &episodes[i],
                                total_tokens,
                                config.eps_clip,
                                config.alpha,
                                gp,
                                gv,
                            )?;
                            Ok((l, g))
                        })
                        .collect::<Result<_>>()?;
                    for (l, g) in results {
                        stats.policy += l.policy;
                        stats.value += l.value;
                        stats.max_log_ratio = stats.max_log_ratio.max(l.max_log_ratio);
                        for (a, b) in grad.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                }
                let joint = stats.policy + config.alpha * stats.value;
                if !joint.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite PPO loss or gradient at batch {step}, inner epoch {inner}, minibatch {index} \
                         (policy loss {}, value loss {}, max |log ν| {})",
                        stats.policy, stats.value, stats.max_log_ratio
                    )));
                }
                if fresh && stats.max_log_ratio != 0.0 {
                    return Err(Error::Numerical(format!(
                        "fresh minibatch forward disagrees with the update forward (max |log ν| = {})",
                        stats.max_log_ratio
                    )));
                }
                let grad_norm = clip_global_norm(&mut [grad.as_mut_slice()], config.grad_clip_norm);
                let lr = schedule.lr(update);
                let (gp, gv) = grad.split_at(np);
                opt_policy.step(&mut policy.data, gp, lr);
                opt_value.step(&mut value.data, gv, lr);
                policy.version += 1;
                value.version += 1;
                update += 1;
                loss_sums.0 += stats.policy;
                loss_sums.1 += stats.value;
                n_updates += 1;
                observer.on_minibatch(&MinibatchInfo {
                    step,
                    inner_epoch: inner,
                    index,
                    episodes: idx,
                    fresh_forward: fresh,
                    max_log_ratio: stats.max_log_ratio,
                    policy_loss: stats.policy,
                    value_loss: stats.value,
                    grad_norm,
                    lr,
                })?;
            }
        }

        observer.on_rollout(step, &episodes)?;
        let m = episodes.len() as f64;
        let metrics = PpoMetrics {
            step,
            policy_loss: loss_sums.0 / n_updates as f64,
            value_loss: loss_sums.1 / n_updates as f64,
            mean_terminal_reward: episodes.iter().map(|e| e.terminal_reward).sum::<f64>() / m,
            mean_kl: episodes.iter().map(Episode::kl).sum::<f64>() / m,
            fraction_truncated: episodes.iter().filter(|e| e.truncated).count() as f64 / m,
            mean_continuation_length: episodes.iter().map(|e| e.len() as f64).sum::<f64>() / m,
        };
        finite_or("metrics", step, &metrics.values())?;
        observer.on_step(&metrics, &policy, &value)?;
        if within + 1 == per_epoch || step + 1 == total_batches {
            observer.on_epoch(epoch, &policy, &value)?;
        }
    }
    Ok((policy, value))
}
