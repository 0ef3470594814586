//! Central finite differences in 64-bit arithmetic: the oracle for every
//! analytic gradient in the crate.

use super::params::Params;
use crate::error::{Error, Result};

/// `(f(p + ε e_i) − f(p − ε e_i)) / 2ε` for every coordinate `i`.
pub fn finite_diff_gradient<F>(mut loss_fn: F, point: &[f64], epsilon: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let up = loss_fn(&x);
        x[i] = orig - epsilon;
        let down = loss_fn(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss when perturbing coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * epsilon));
    }
    Ok(grad)
}

/// Finite differences over every parameter of a model.
pub fn finite_diff_params<F>(mut loss_fn: F, params: &Params<f64>, epsilon: f64) -> Result<Vec<f64>>
where
    F: FnMut(&Params<f64>) -> f64,
{
    let mut scratch = params.clone();
    finite_diff_gradient(
        |x| {
            scratch.data.copy_from_slice(x);
            loss_fn(&scratch)
        },
        &params.data,
        epsilon,
    )
}

/// `max_i |a_i − n_i| / max(max_i |n_i|, max_i |a_i|)`: the largest
/// coordinate error relative to the gradient's scale. Zero when both
/// vectors vanish.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_gradient(|x| x[0] * x[0], &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = finite_diff_gradient(|_| 4.2, &[1.0, -2.0, 0.5], 1e-3).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_is_an_error() {
        let r = finite_diff_gradient(|x| if x[0] > 1.0 { f64::NAN } else { x[0] }, &[1.0], 1e-3);
        assert!(matches!(r, Err(Error::Numerical(_))));
        assert!(finite_diff_gradient(|x| x[0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn relative_error_scale() {
        assert_eq!(max_relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((max_relative_error(&[1.0, 2.0], &[1.0, 2.002]) - 0.002 / 2.002).abs() < 1e-12);
    }
}
