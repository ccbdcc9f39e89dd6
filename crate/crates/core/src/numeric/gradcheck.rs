use crate::error::{Error, Result};

/// Step used by [`finite_diff_check`] callers unless they have a reason to
/// deviate.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares `analytic` against central differences of `loss` at `params`.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1e-8, |numeric_i|)`.
pub fn finite_diff_check<F>(mut loss: F, params: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(Error::domain(format!(
            "{} parameters but {} analytic gradients",
            params.len(),
            analytic.len()
        )));
    }
    let numeric = numeric_gradient(&mut loss, params, h)?;
    Ok(max_relative_error(analytic, &numeric))
}

/// Central-difference gradient of `loss` at `params`.
pub fn numeric_gradient<F>(mut loss: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = loss(&x);
        if !plus.is_finite() {
            return Err(Error::NonFiniteLoss {
                coordinate: i,
                side: "+h",
            });
        }
        x[i] = orig - h;
        let minus = loss(&x);
        if !minus.is_finite() {
            return Err(Error::NonFiniteLoss {
                coordinate: i,
                side: "-h",
            });
        }
        x[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_sq_norm(x: &[f64]) -> f64 {
        0.5 * x.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn quadratic_is_exact() {
        let x = [0.3, -1.2, 2.0, 0.7];
        let err = finite_diff_check(half_sq_norm, &x, &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn zero_gradient_is_detected() {
        let x = [0.3, -1.2, 2.0, 0.7];
        let err = finite_diff_check(half_sq_norm, &x, &[0.0; 4], DEFAULT_STEP).unwrap();
        assert!((err - 1.0).abs() < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_loss_names_coordinate() {
        let f = |x: &[f64]| if x[1] > 0.5 { f64::NAN } else { x[0] };
        let err = finite_diff_check(f, &[0.0, 0.5 - 1e-6], &[1.0, 0.0], DEFAULT_STEP).unwrap_err();
        assert!(matches!(
            err,
            Error::NonFiniteLoss {
                coordinate: 1,
                side: "+h"
            }
        ));
    }
}
