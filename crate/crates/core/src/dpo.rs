//! Direct Preference Optimization against a frozen reference policy.
//!
//! Sequence log-likelihoods are sums of response-token log-probabilities
//! (EOS appended, prompt tokens excluded). The partition function cancels
//! inside the margin and is never represented.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lm::optim::{par_loss_grad, train_loop, AdamConfig, LrSchedule, StepReport, TrainConfig};
use crate::lm::{eval_response, response_backward, Params, Scalar};
use crate::math::{log_sigmoid, sigmoid};
use crate::pref_data::PreferencePair;
use crate::reward::response_tokens;

#[derive(Debug, Clone, PartialEq)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub grad_clip_norm: f64,
}

impl Default for DpoConfig {
    /// β = 0.01, lr 5e-7, 3 epochs, 10% warmup then linear decay to zero.
    fn default() -> Self {
        Self {
            beta: 0.01,
            learning_rate: 5e-7,
            epochs: 3,
            warmup_fraction: 0.1,
            batch_size: 32,
            seed: 0,
            adam: AdamConfig::default(),
            grad_clip_norm: 1.0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        self.train_config().validate()
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            final_lr_ratio: 0.0,
            warmup_fraction: self.warmup_fraction,
            epochs: self.epochs,
            batch_size: self.batch_size,
            max_steps: None,
            adam: self.adam,
            grad_clip_norm: self.grad_clip_norm,
            seed: self.seed,
        }
    }
}

fn check_pair_models<S: Scalar>(policy: &Params<S>, reference: &Params<S>) -> Result<()> {
    policy.check_compatible(reference)
}

/// `log π(y | x)` summed over the response tokens of `text` (EOS included).
pub fn sequence_logprob<S: Scalar>(params: &Params<S>, prompt: &[u32], text: &str) -> Result<f64> {
    Ok(eval_response(params, prompt, &response_tokens(text))?.sum_logprob().f64())
}

/// Reference log-likelihoods of `(chosen, rejected)`.
pub fn reference_logprobs<S: Scalar>(reference: &Params<S>, pair: &PreferencePair) -> Result<(f64, f64)> {
    let prompt = pair.prompt_tokens();
    Ok((sequence_logprob(reference, &prompt, &pair.chosen)?, sequence_logprob(reference, &prompt, &pair.rejected)?))
}

/// `β·log[π(y_c|x)/π_ref(y_c|x)] − β·log[π(y_r|x)/π_ref(y_r|x)]`.
pub fn implicit_reward_margin<S: Scalar>(
    policy: &Params<S>,
    reference: &Params<S>,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64> {
    check_pair_models(policy, reference)?;
    let (ref_c, ref_r) = reference_logprobs(reference, pair)?;
    let (pol_c, pol_r) = reference_logprobs(policy, pair)?;
    Ok(beta * (pol_c - ref_c) - beta * (pol_r - ref_r))
}

/// Per-pair loss `−log σ(m)`, accumulating `scale · ∂loss/∂θ` into `grad`.
fn pair_loss_grad<S: Scalar>(
    policy: &Params<S>,
    pair: &PreferencePair,
    (ref_c, ref_r): (f64, f64),
    beta: f64,
    scale: f64,
    grad: &mut [S],
) -> Result<f64> {
    let prompt = pair.prompt_tokens();
    let chosen = eval_response(policy, &prompt, &response_tokens(&pair.chosen))?;
    let rejected = eval_response(policy, &prompt, &response_tokens(&pair.rejected))?;
    let margin = beta * (chosen.sum_logprob().f64() - ref_c) - beta * (rejected.sum_logprob().f64() - ref_r);
    let dm = -sigmoid(-margin) * scale;
    let gc = S::of(dm * beta);
    response_backward(policy, &chosen, &vec![gc; chosen.response.len()], None, grad);
    response_backward(policy, &rejected, &vec![-gc; rejected.response.len()], None, grad);
    Ok(-log_sigmoid(margin))
}

/// DPO loss averaged over the batch and its gradient with respect to the
/// policy. The reference only contributes constants.
pub fn dpo_loss_and_grad<S: Scalar>(
    policy: &Params<S>,
    reference: &Params<S>,
    batch: &[&PreferencePair],
    beta: f64,
) -> Result<(f64, Vec<S>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty DPO batch".into()));
    }
    check_pair_models(policy, reference)?;
    let n = batch.len() as f64;
    par_loss_grad(batch, policy.data.len(), |pair, grad| {
        let refs = reference_logprobs(reference, pair)?;
        Ok(pair_loss_grad(policy, pair, refs, beta, 1.0 / n, grad)? / n)
    })
}

/// Per-pair losses `−log σ(m_i)`.
pub fn dpo_pair_losses<S: Scalar>(
    policy: &Params<S>,
    reference: &Params<S>,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<Vec<f64>> {
    pairs
        .par_iter()
        .map(|p| implicit_reward_margin(policy, reference, p, beta).map(|m| -log_sigmoid(m)))
        .collect()
}

pub fn train_dpo(
    config: &DpoConfig,
    policy_init: &Params<f32>,
    reference: &Params<f32>,
    data: &[PreferencePair],
) -> Result<Params<f32>> {
    train_dpo_observed(config, policy_init, reference, data, |_, _| Ok(()))
}

/// Reference log-likelihoods are computed once up front; the reference
/// parameters are only ever read.
pub fn train_dpo_observed<R>(
    config: &DpoConfig,
    policy_init: &Params<f32>,
    reference: &Params<f32>,
    data: &[PreferencePair],
    report: R,
) -> Result<Params<f32>>
where
    R: FnMut(&StepReport, &Params<f32>) -> Result<()>,
{
    if data.is_empty() {
        return Err(Error::Config("train_dpo needs at least one preference pair".into()));
    }
    config.validate()?;
    check_pair_models(policy_init, reference)?;
    let refs: Vec<(f64, f64)> = data.par_iter().map(|p| reference_logprobs(reference, p)).collect::<Result<_>>()?;
    let indexed: Vec<usize> = (0..data.len()).collect();
    let tc = config.train_config();
    let total = tc.total_steps(data.len());
    let schedule = LrSchedule::new(tc.learning_rate, tc.warmup_fraction, total, Some(0.0));
    let beta = config.beta;
    let mut policy = policy_init.clone();
    train_loop(
        &mut policy,
        &indexed,
        &tc,
        schedule,
        |p, batch| {
            let n = batch.len() as f64;
            par_loss_grad(batch, p.data.len(), |&&i, grad| {
                Ok(pair_loss_grad(p, &data[i], refs[i], beta, 1.0 / n, grad)? / n)
            })
        },
        report,
    )?;
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{ModelConfig, ModelKind};

    fn models() -> (Params<f64>, Params<f64>) {
        let cfg = ModelConfig::new(8, 1, 2, 16).unwrap();
        let reference = Params::<f64>::init(cfg, ModelKind::Policy, 1).unwrap();
        let mut policy = reference.clone();
        for (i, x) in policy.data.iter_mut().enumerate() {
            *x += 0.05 * (((i * 31) % 7) as f64 - 3.0) / 3.0;
        }
        (policy, reference)
    }

    fn pairs() -> Vec<PreferencePair> {
        vec![
            PreferencePair::from_text("ab", "aa", "b"),
            PreferencePair::from_text("c", "x", "yz"),
            PreferencePair::from_text("d", "aaa", "ccc"),
        ]
    }

    #[test]
    fn identical_models_give_ln2_for_any_beta() {
        let (_, reference) = models();
        let data = pairs();
        let refs: Vec<&PreferencePair> = data.iter().collect();
        for beta in [0.01, 0.1, 1.0, 25.0] {
            let (loss, grad) = dpo_loss_and_grad(&reference, &reference, &refs, beta).unwrap();
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
            assert!(grad.iter().any(|&g| g != 0.0));
            assert_eq!(implicit_reward_margin(&reference, &reference, &data[0], beta).unwrap(), 0.0);
        }
    }

    #[test]
    fn swapping_negates_margin() {
        let (policy, reference) = models();
        for p in pairs() {
            let m = implicit_reward_margin(&policy, &reference, &p, 0.5).unwrap();
            let swapped = PreferencePair::from_text(&p.prompt[0].content, &p.rejected, &p.chosen);
            let ms = implicit_reward_margin(&policy, &reference, &swapped, 0.5).unwrap();
            assert!((m + ms).abs() < 1e-12);
            let l = dpo_pair_losses(&policy, &reference, std::slice::from_ref(&p), 0.5).unwrap()[0];
            let ls = dpo_pair_losses(&policy, &reference, &[swapped], 0.5).unwrap()[0];
            assert!((l + log_sigmoid(m)).abs() < 1e-12);
            assert!((ls + log_sigmoid(-m)).abs() < 1e-12);
            assert!(l > 0.0 && ls > 0.0);
        }
    }

    #[test]
    fn batch_loss_is_mean_of_pair_losses() {
        let (policy, reference) = models();
        let data = pairs();
        let refs: Vec<&PreferencePair> = data.iter().collect();
        let (loss, _) = dpo_loss_and_grad(&policy, &reference, &refs, 0.3).unwrap();
        let per = dpo_pair_losses(&policy, &reference, &data, 0.3).unwrap();
        assert!((loss - per.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        // Each pair's loss is unaffected by the rest of the batch.
        let solo = dpo_pair_losses(&policy, &reference, &data[1..2], 0.3).unwrap();
        assert_eq!(solo[0], per[1]);
    }

    #[test]
    fn mismatched_configs_are_shape_errors() {
        let (policy, _) = models();
        let other = Params::<f64>::init(ModelConfig::new(8, 2, 2, 16).unwrap(), ModelKind::Policy, 1).unwrap();
        let data = pairs();
        assert!(matches!(dpo_loss_and_grad(&policy, &other, &[&data[0]], 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn defaults_follow_recipe() {
        let c = DpoConfig::default();
        assert_eq!((c.beta, c.learning_rate, c.epochs, c.warmup_fraction), (0.01, 5e-7, 3, 0.1));
    }

    #[test]
    fn training_leaves_reference_untouched() {
        let cfg = ModelConfig::new(8, 1, 2, 16).unwrap();
        let reference = Params::<f32>::init(cfg, ModelKind::Policy, 1).unwrap();
        let snapshot = reference.clone();
        let config = DpoConfig { learning_rate: 1e-3, epochs: 1, batch_size: 2, ..DpoConfig::default() };
        let out = train_dpo(&config, &reference, &reference, &pairs()).unwrap();
        assert_eq!(reference, snapshot);
        assert_ne!(out.data, reference.data);
        assert!(matches!(train_dpo(&config, &reference, &reference, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn small_step_decreases_loss() {
        let cfg = ModelConfig::new(8, 1, 2, 16).unwrap();
        let reference = Params::<f32>::init(cfg, ModelKind::Policy, 1).unwrap();
        let data = pairs();
        let refs: Vec<&PreferencePair> = data.iter().collect();
        let (l0, g) = dpo_loss_and_grad(&reference, &reference, &refs, 0.1).unwrap();
        let mut stepped = reference.clone();
        for (p, gi) in stepped.data.iter_mut().zip(&g) {
            *p -= 1e-2 * gi;
        }
        let (l1, _) = dpo_loss_and_grad(&stepped, &reference, &refs, 0.1).unwrap();
        assert!(l1 < l0, "{l1} !< {l0}");
    }
}
