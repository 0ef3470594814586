//! Clipped PPO policy loss and clipped value loss, each with its gradient
//! with respect to the quantity the model produces (log-probabilities and
//! values respectively).

use crate::error::{Error, Result};

fn same_len(what: &str, lens: &[usize]) -> Result<()> {
    if lens.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Shape(format!("{what}: array lengths differ {lens:?}")));
    }
    if lens.first() == Some(&0) {
        return Err(Error::Shape(format!("{what}: empty arrays")));
    }
    Ok(())
}

/// `−mean_t min(ν_t A_t, clip(ν_t, 1−ε, 1+ε) A_t)` with
/// `ν_t = exp(new_t − old_t)`, and `∂loss/∂new_t`.
pub fn ppo_policy_loss_and_grad(
    new_logprobs: &[f64],
    old_logprobs: &[f64],
    advantages: &[f64],
    eps_clip: f64,
) -> Result<(f64, Vec<f64>)> {
    same_len("policy loss", &[new_logprobs.len(), old_logprobs.len(), advantages.len()])?;
    let n = new_logprobs.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(new_logprobs.len());
    for ((&new, &old), &a) in new_logprobs.iter().zip(old_logprobs).zip(advantages) {
        let ratio = (new - old).exp();
        let unclipped = ratio * a;
        let clipped = ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip) * a;
        if unclipped <= clipped {
            loss -= unclipped;
            grad.push(-unclipped / n);
        } else {
            // Only reachable with the ratio outside the clip range: flat.
            loss -= clipped;
            grad.push(0.0);
        }
    }
    Ok((loss / n, grad))
}

pub fn ppo_policy_loss(new_logprobs: &[f64], old_logprobs: &[f64], advantages: &[f64], eps_clip: f64) -> Result<f64> {
    Ok(ppo_policy_loss_and_grad(new_logprobs, old_logprobs, advantages, eps_clip)?.0)
}

/// `mean_t ½ max((V_t − G_t)², (clip(V_t, V^old_t − ε, V^old_t + ε) − G_t)²)`
/// and `∂loss/∂V_t`.
pub fn ppo_value_loss_and_grad(
    values_new: &[f64],
    values_rollout: &[f64],
    returns: &[f64],
    eps_clip: f64,
) -> Result<(f64, Vec<f64>)> {
    same_len("value loss", &[values_new.len(), values_rollout.len(), returns.len()])?;
    let n = values_new.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(values_new.len());
    for ((&v, &old), &g) in values_new.iter().zip(values_rollout).zip(returns) {
        let lo = old - eps_clip;
        let hi = old + eps_clip;
        let vc = v.clamp(lo, hi);
        let unclipped = (v - g) * (v - g);
        let clipped = (vc - g) * (vc - g);
        if unclipped >= clipped {
            loss += 0.5 * unclipped;
            grad.push((v - g) / n);
        } else {
            loss += 0.5 * clipped;
            let inside = v > lo && v < hi;
            grad.push(if inside { (vc - g) / n } else { 0.0 });
        }
    }
    Ok((loss / n, grad))
}

pub fn ppo_value_loss(values_new: &[f64], values_rollout: &[f64], returns: &[f64], eps_clip: f64) -> Result<f64> {
    Ok(ppo_value_loss_and_grad(values_new, values_rollout, returns, eps_clip)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_ratio_gives_negative_mean_advantage() {
        let lp = [-1.0, -2.0, -0.5];
        let adv = [0.5, -1.5, 2.0];
        let loss = ppo_policy_loss(&lp, &lp, &adv, 0.2).unwrap();
        assert!((loss + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn clip_arithmetic() {
        let loss = ppo_policy_loss(&[2f64.ln()], &[0.0], &[1.0], 0.2).unwrap();
        assert!((loss + 1.2).abs() < 1e-12);
        // Negative advantage with a small ratio is clipped from below.
        let loss = ppo_policy_loss(&[0.5f64.ln()], &[0.0], &[-1.0], 0.2).unwrap();
        assert!((loss - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clipped_tokens_have_zero_gradient() {
        let (_, g) = ppo_policy_loss_and_grad(&[2f64.ln(), 0.0], &[0.0, 0.0], &[1.0, 1.0], 0.2).unwrap();
        assert_eq!(g[0], 0.0);
        assert!((g[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn value_loss_examples() {
        let v = [0.3, -1.0, 2.0];
        assert_eq!(ppo_value_loss(&v, &v, &v, 0.2).unwrap(), 0.0);
        let g = [0.35, -0.9, 2.1];
        let inside = ppo_value_loss(&v, &[0.31, -1.05, 2.05], &g, 0.2).unwrap();
        let plain = v.iter().zip(&g).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum::<f64>() / 3.0;
        assert!((inside - plain).abs() < 1e-15);
    }

    #[test]
    fn value_clip_takes_the_larger_error() {
        // V moved from 0 to 1 but the clip holds it at 0.2; target 1.5.
        let (loss, grad) = ppo_value_loss_and_grad(&[1.0], &[0.0], &[1.5], 0.2).unwrap();
        assert!((loss - 0.5 * 1.3 * 1.3).abs() < 1e-12);
        assert_eq!(grad[0], 0.0);
    }

    #[test]
    fn shape_mismatch() {
        assert!(ppo_policy_loss(&[0.0], &[0.0, 1.0], &[1.0], 0.2).is_err());
        assert!(ppo_value_loss(&[0.0], &[0.0], &[], 0.2).is_err());
    }
}
