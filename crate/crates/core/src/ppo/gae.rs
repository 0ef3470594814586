use crate::error::{Error, Result};

/// Generalized advantage estimation by backward recursion.
///
/// `δ_t = r_t + γ V_{t+1} − V_t` with `V` past the episode end taken as 0,
/// `A_t = δ_t + γλ A_{t+1}`, and returns `G_t = A_t + V_t`.
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lam: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.is_empty() || rewards.len() != values.len() {
        return Err(Error::Shape(format!(
            "GAE needs equal non-empty arrays, got {} rewards and {} values",
            rewards.len(),
            values.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lam * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Standardize jointly: optionally subtract the mean, then divide by the
/// population standard deviation plus 1e-8.
pub fn whiten(values: &[f64], shift_mean: bool) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    values
        .iter()
        .map(|&v| if shift_mean { (v - mean) / denom } else { v / denom })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn suffix_sums_with_zero_values() {
        let (a, g) = compute_gae(&[0.0, 1.0], &[0.0, 0.0], 1.0, 1.0).unwrap();
        assert_eq!(a, vec![1.0, 1.0]);
        assert_eq!(g, vec![1.0, 1.0]);
    }

    #[test]
    fn single_step() {
        let (a, g) = compute_gae(&[2.5], &[0.75], 0.9, 0.95).unwrap();
        assert_eq!(a, vec![1.75]);
        assert_eq!(g, vec![2.5]);
    }

    #[test]
    fn shape_errors() {
        assert!(compute_gae(&[], &[], 1.0, 1.0).is_err());
        assert!(compute_gae(&[1.0], &[1.0, 2.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn whiten_examples() {
        let w = whiten(&[1.0, 3.0], true);
        assert!((w[0] + 1.0).abs() < 1e-7 && (w[1] - 1.0).abs() < 1e-7);
        assert!(whiten(&[4.0; 5], true).iter().all(|x| x.abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn whiten_moments(xs in proptest::collection::vec(-100.0f64..100.0, 2..64)) {
            let spread = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let w = whiten(&xs, true);
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((sd - 1.0).abs() < 1e-6);
        }

        #[test]
        fn whiten_affine_invariant(
            xs in proptest::collection::vec(-10.0f64..10.0, 2..32),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let spread = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-2);
            let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            for (u, v) in whiten(&xs, true).iter().zip(whiten(&ys, true)) {
                prop_assert!((u - v).abs() < 1e-5);
            }
        }

        #[test]
        fn lambda_one_gamma_one_is_return_minus_value(
            rv in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..10),
        ) {
            let (r, v): (Vec<f64>, Vec<f64>) = rv.into_iter().unzip();
            let (a, g) = compute_gae(&r, &v, 1.0, 1.0).unwrap();
            for t in 0..r.len() {
                let suffix: f64 = r[t..].iter().sum();
                prop_assert!((a[t] - (suffix - v[t])).abs() < 1e-9);
                prop_assert!((g[t] - suffix).abs() < 1e-9);
            }
        }
    }
}
