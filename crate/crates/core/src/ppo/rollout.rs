//! Online sampling from the policy and token-level reward shaping.

use rayon::prelude::*;

use super::PpoConfig;
use crate::error::{Error, Result};
use crate::lm::{sample, PolicyParams};
use crate::seed;

/// One prompt and one sampled continuation; every action is a token.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub prompt: Vec<u32>,
    /// Sampled tokens, ending in EOS unless truncated.
    pub continuation: Vec<u32>,
    pub truncated: bool,
    /// Policy log-probabilities captured while sampling.
    pub rollout_logprobs: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
    pub values: Vec<f64>,
    pub shaped_rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Reward-model score of the continuation (unused when truncated).
    pub rm_score: f64,
    /// What the last token actually receives on top of its KL term.
    pub terminal_reward: f64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.continuation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.continuation.is_empty()
    }

    /// Sampled-token KL estimate summed over the episode.
    pub fn kl(&self) -> f64 {
        self.rollout_logprobs.iter().zip(&self.ref_logprobs).map(|(p, r)| p - r).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub step: usize,
    /// Prompt-major: the `r` rollouts of prompt 0, then prompt 1, ...
    pub episodes: Vec<Episode>,
}

/// Sample `r` continuations for each prompt at temperature `tau`.
///
/// Episode `(i, k)` draws from its own stream derived from
/// `(seed, step, i, k)`, so results do not depend on worker scheduling.
pub fn rollout(policy: &PolicyParams, prompts: &[Vec<u32>], config: &PpoConfig, step: usize) -> Result<RolloutBatch> {
    if prompts.is_empty() {
        return Err(Error::Config("rollout needs at least one prompt".into()));
    }
    if let Some(p) = prompts.iter().find(|p| p.len() > config.max_prompt_len) {
        return Err(Error::Length { len: p.len(), limit: config.max_prompt_len, what: "prompt".into() });
    }
    let r = config.rollouts_per_prompt.max(1);
    let jobs: Vec<(usize, usize)> = (0..prompts.len()).flat_map(|i| (0..r).map(move |k| (i, k))).collect();
    let episodes = jobs
        .par_iter()
        .map(|&(i, k)| {
            let s = seed::derive(config.seed, &[seed::stream::ROLLOUT, step as u64, i as u64, k as u64]);
            let out = sample(policy, &prompts[i], config.tau, config.max_len, s)?;
            Ok(Episode {
                prompt: prompts[i].clone(),
                rollout_logprobs: out.logprobs.iter().map(|&x| x as f64).collect(),
                continuation: out.continuation,
                truncated: out.truncated,
                ref_logprobs: Vec::new(),
                values: Vec::new(),
                shaped_rewards: Vec::new(),
                advantages: Vec::new(),
                returns: Vec::new(),
                rm_score: 0.0,
                terminal_reward: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutBatch { step, episodes })
}

/// The reward the last token receives besides its KL term: the RM score
/// for EOS-terminated episodes, `trunc_penalty` in its place otherwise.
pub fn terminal_reward(rm_score: f64, truncated: bool, trunc_penalty: f64) -> f64 {
    if truncated {
        trunc_penalty
    } else {
        rm_score
    }
}

/// `r_t = −β (log π(y_t) − log π_ref(y_t))`, with `terminal` added to the
/// final token.
pub fn shape_token_rewards(policy_logprobs: &[f64], ref_logprobs: &[f64], terminal: f64, beta: f64) -> Result<Vec<f64>> {
    if policy_logprobs.is_empty() || policy_logprobs.len() != ref_logprobs.len() {
        return Err(Error::Shape(format!(
            "reward shaping needs equal non-empty arrays, got {} and {}",
            policy_logprobs.len(),
            ref_logprobs.len()
        )));
    }
    let mut r: Vec<f64> = policy_logprobs.iter().zip(ref_logprobs).map(|(p, q)| -beta * (p - q)).collect();
    *r.last_mut().expect("non-empty") += terminal;
    Ok(r)
}
