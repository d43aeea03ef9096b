//! Central finite differences, the gradient oracle for everything analytic
//! in this crate.

use super::LabError;

/// Central-difference gradient of `objective` at `theta`:
/// `(f(θ + h·e_j) - f(θ - h·e_j)) / (2h)` per coordinate.
pub fn finite_difference_gradient<F>(
    mut objective: F,
    theta: &[f64],
    h: f64,
) -> Result<Vec<f64>, LabError>
where
    F: FnMut(&[f64]) -> Result<f64, LabError>,
{
    if !(h > 0.0) {
        return Err(LabError::BadStep(h));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        probe[j] = theta[j] + h;
        let up = objective(&probe)?;
        probe[j] = theta[j] - h;
        let down = objective(&probe)?;
        probe[j] = theta[j];
        if !up.is_finite() || !down.is_finite() {
            return Err(LabError::NonFiniteObjective);
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Max-norm error between two gradients relative to the larger of their
/// max-norms (floored so that two near-zero gradients compare as equal).
pub fn relative_gradient_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let max_abs = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
    diff / max_abs(analytic).max(max_abs(numeric)).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let grad = finite_difference_gradient(|t| Ok(t[0] * t[0]), &[3.0], 1e-6).unwrap();
        assert!((grad[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let grad =
            finite_difference_gradient(|_| Ok(42.0), &[1.0, -2.0, 0.5], 1e-6).unwrap();
        assert_eq!(grad, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn nonpositive_step_is_an_error() {
        assert!(matches!(
            finite_difference_gradient(|t| Ok(t[0]), &[1.0], 0.0),
            Err(LabError::BadStep(_))
        ));
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let res = finite_difference_gradient(|t| Ok(1.0 / (t[0] - 1.0)), &[1.0], 1e-9);
        assert!(matches!(res, Err(LabError::NonFiniteObjective)));
    }

    #[test]
    fn relative_error_metric() {
        assert!(relative_gradient_error(&[1.0, 2.0], &[1.0, 2.0]) == 0.0);
        let e = relative_gradient_error(&[1.0, 0.0], &[1.0, 0.1]);
        assert!((e - 0.1).abs() < 1e-12);
    }
}
