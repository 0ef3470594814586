//! Synthetic oracle environments and evaluation protocols: best-of-N
//! selection and exact KL to the reference policy.

pub mod toy;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{decode_continuation, eval_response, sample, PolicyParams, Scalar, EOS};
use crate::pref_data::PreferencePair;
use crate::reward::{score, RewardModelParams};
use crate::seed;

/// Ground-truth reward standing in for human judgement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleTask {
    /// Fraction of non-EOS continuation tokens equal to `target`, plus 0.1
    /// when the continuation ends in EOS, capped at 1.
    TargetDensity { target: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleReward {
    pub value: f64,
    /// Set when the continuation was empty and the value defaulted to 0.
    pub empty: bool,
}

impl OracleTask {
    pub fn target_density(target: u8) -> Self {
        OracleTask::TargetDensity { target: u32::from(target) }
    }

    pub fn id(&self) -> String {
        match self {
            OracleTask::TargetDensity { target } => format!("target-density:{target}"),
        }
    }

    pub fn parse(id: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown oracle task `{id}` (expected target-density:<byte>)"));
        let arg = id.strip_prefix("target-density:").ok_or_else(bad)?;
        let target: u8 = arg.parse().map_err(|_| bad())?;
        Ok(Self::target_density(target))
    }

    pub fn evaluate(&self, _prompt: &[u32], continuation: &[u32]) -> OracleReward {
        match *self {
            OracleTask::TargetDensity { target } => {
                let end = continuation.iter().position(|&t| t == EOS);
                let body = &continuation[..end.unwrap_or(continuation.len())];
                if body.is_empty() && end.is_none() {
                    return OracleReward { value: 0.0, empty: true };
                }
                let density = if body.is_empty() {
                    0.0
                } else {
                    body.iter().filter(|&&t| t == target).count() as f64 / body.len() as f64
                };
                let bonus = if end.is_some() { 0.1 } else { 0.0 };
                OracleReward { value: (density + bonus).min(1.0), empty: false }
            }
        }
    }
}

pub fn oracle_reward(task: &OracleTask, prompt: &[u32], continuation: &[u32]) -> f64 {
    task.evaluate(prompt, continuation).value
}

/// Anything that scores a continuation of a prompt.
pub trait Scorer: Sync {
    fn score(&self, prompt: &[u32], continuation: &[u32]) -> Result<f64>;
}

impl Scorer for OracleTask {
    fn score(&self, prompt: &[u32], continuation: &[u32]) -> Result<f64> {
        Ok(oracle_reward(self, prompt, continuation))
    }
}

/// Scores with a trained reward model.
pub struct RewardScorer<'a>(pub &'a RewardModelParams);

impl Scorer for RewardScorer<'_> {
    fn score(&self, prompt: &[u32], continuation: &[u32]) -> Result<f64> {
        score(self.0, prompt, continuation)
    }
}

/// Sampling seed of candidate `j` for prompt `i`.
pub fn candidate_seed(seed: u64, prompt_index: usize, j: usize) -> u64 {
    seed::derive(seed, &[seed::stream::EVAL, prompt_index as u64, j as u64])
}

fn pair_text(continuation: &[u32], truncated: bool) -> Option<String> {
    if truncated || continuation.iter().any(|&t| t > 255 && t != EOS) {
        return None;
    }
    String::from_utf8(decode_continuation(continuation).ok()?).ok()
}

/// Label pairs of policy samples with the oracle.
///
/// Prompts are visited cyclically; each visit draws two continuations at
/// temperature 1 and keeps the pair unless the oracle ties them. Samples
/// that are truncated or not valid text are discarded, since a pair can
/// only hold EOS-terminated text. Stops after `n_pairs` pairs or
/// `50 · n_pairs` attempts, whichever comes first.
pub fn make_synthetic_preferences(
    task: &OracleTask,
    sampler: &PolicyParams,
    prompts: &[String],
    n_pairs: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    if n_pairs == 0 || prompts.is_empty() {
        return Err(Error::Config("need n_pairs >= 1 and at least one prompt".into()));
    }
    let mut out = Vec::with_capacity(n_pairs);
    let mut attempt = 0usize;
    let chunk = n_pairs.max(16);
    while out.len() < n_pairs && attempt < 50 * n_pairs {
        let ids: Vec<usize> = (attempt..attempt + chunk).collect();
        attempt += chunk;
        let drawn: Vec<Option<PreferencePair>> = ids
            .par_iter()
            .map(|&a| {
                let text = &prompts[a % prompts.len()];
                let prompt = crate::lm::encode(text.as_bytes());
                let mut cands = Vec::with_capacity(2);
                for k in 0..2u64 {
                    let s = seed::derive(seed, &[seed::stream::DATA, a as u64, k]);
                    let smp = sample(sampler, &prompt, 1.0, max_len, s)?;
                    match pair_text(&smp.continuation, smp.truncated) {
                        Some(t) => cands.push((oracle_reward(task, &prompt, &smp.continuation), t)),
                        None => return Ok(None),
                    }
                }
                let (ra, ta) = cands[0].clone();
                let (rb, tb) = cands[1].clone();
                Ok(if ra > rb {
                    Some(PreferencePair::from_text(text, &ta, &tb))
                } else if rb > ra {
                    Some(PreferencePair::from_text(text, &tb, &ta))
                } else {
                    None
                })
            })
            .collect::<Result<_>>()?;
        out.extend(drawn.into_iter().flatten());
    }
    out.truncate(n_pairs);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub continuation: Vec<u32>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestOfN {
    pub selected: Vec<u32>,
    pub score: f64,
    pub index: usize,
    /// Every candidate in sampling order, when auditing was requested.
    pub candidates: Option<Vec<Candidate>>,
}

/// Index of the highest score; ties go to the lowest index.
pub fn select_best(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Per prompt, draw `n` continuations at `temperature` and keep the
/// highest-scoring one. Candidate `j` of prompt `i` uses
/// [`candidate_seed`], so the first `m` candidates are shared by any run
/// with `n ≥ m`.
#[allow(clippy::too_many_arguments)]
pub fn best_of_n(
    policy: &PolicyParams,
    scorer: &dyn Scorer,
    prompts: &[Vec<u32>],
    n: usize,
    temperature: f64,
    max_len: usize,
    seed: u64,
    audit: bool,
) -> Result<Vec<BestOfN>> {
    if n == 0 {
        return Err(Error::Config("best-of-n needs n >= 1".into()));
    }
    prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let mut cands = Vec::with_capacity(n);
            for j in 0..n {
                let s = sample(policy, prompt, temperature, max_len, candidate_seed(seed, i, j))?;
                let sc = scorer.score(prompt, &s.continuation)?;
                cands.push(Candidate { continuation: s.continuation, score: sc });
            }
            let scores: Vec<f64> = cands.iter().map(|c| c.score).collect();
            let index = select_best(&scores);
            Ok(BestOfN {
                selected: cands[index].continuation.clone(),
                score: cands[index].score,
                index,
                candidates: audit.then_some(cands),
            })
        })
        .collect()
}

pub const BON_DEFAULT_N: usize = 16;
pub const BON_DEFAULT_TEMPERATURE: f64 = 0.7;

/// One line of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonRecord {
    pub prompt: String,
    pub selected: String,
    pub score: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<CandidateRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub continuation: String,
    pub score: f64,
}

fn show(tokens: &[u32]) -> String {
    let mut bytes = Vec::new();
    let mut s = String::new();
    for &t in tokens {
        if t < 256 {
            bytes.push(t as u8);
        } else {
            s.push_str(&String::from_utf8_lossy(&bytes));
            bytes.clear();
            s.push_str(if t == EOS { "<eos>" } else { "<bos>" });
        }
    }
    s.push_str(&String::from_utf8_lossy(&bytes));
    s
}

pub fn bon_records(prompts: &[Vec<u32>], results: &[BestOfN], n: usize) -> Vec<BonRecord> {
    prompts
        .iter()
        .zip(results)
        .map(|(p, r)| BonRecord {
            prompt: show(p),
            selected: show(&r.selected),
            score: r.score,
            n,
            candidates: r.candidates.as_ref().map(|cs| {
                cs.iter().map(|c| CandidateRecord { continuation: show(&c.continuation), score: c.score }).collect()
            }),
        })
        .collect()
}

/// Exact `KL(π(·|prefix) || π_ref(·|prefix))` at every continuation
/// position, computed in f64 from the two models' log-probabilities.
pub fn episode_kl<S: Scalar>(
    policy: &crate::lm::Params<S>,
    reference: &crate::lm::Params<S>,
    prompt: &[u32],
    continuation: &[u32],
) -> Result<Vec<f64>> {
    let p = eval_response(policy, prompt, continuation)?;
    let q = eval_response(reference, prompt, continuation)?;
    Ok((0..continuation.len())
        .map(|t| {
            let row = p.row_for(t);
            let kl: f64 = p
                .log_row(row)
                .iter()
                .zip(q.log_row(row))
                .map(|(&a, &b)| {
                    let a = a.f64();
                    a.exp() * (a - b.f64())
                })
                .sum();
            kl.max(0.0)
        })
        .collect())
}

/// Sample one continuation per prompt from `policy` (temperature 1) and
/// average the per-episode sum of exact per-position KL to `reference`.
pub fn mean_kl_to_ref(
    policy: &PolicyParams,
    reference: &PolicyParams,
    prompts: &[Vec<u32>],
    max_len: usize,
    seed: u64,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Config("mean_kl_to_ref needs at least one prompt".into()));
    }
    policy.check_compatible(reference)?;
    let per: Vec<f64> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let s = sample(policy, prompt, 1.0, max_len, candidate_seed(seed, i, 0))?;
            Ok(episode_kl(policy, reference, prompt, &s.continuation)?.iter().sum())
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Mean oracle reward of one sample per prompt at `temperature`.
pub fn mean_oracle_reward(
    task: &OracleTask,
    policy: &PolicyParams,
    prompts: &[Vec<u32>],
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<f64> {
    let r = best_of_n(policy, task, prompts, 1, temperature, max_len, seed, false)?;
    Ok(r.iter().map(|b| b.score).sum::<f64>() / r.len().max(1) as f64)
}
