//! Central finite-difference verification of analytic gradients.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error per parameter, in input order.
    pub per_param: Vec<f64>,
    pub max_relative_error: f64,
    /// `(parameter index, entry index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares `analytic` gradients of `f` at `params` against central differences.
///
/// `f` must be deterministic; it is evaluated twice at the unperturbed point
/// and rejected if the two values differ.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[Tensor],
    analytic: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters but {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    for (p, g) in params.iter().zip(analytic) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "finite_diff_check",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    let first = f(params)?;
    let second = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_err = 0.0;
    let mut worst = None;
    for pi in 0..params.len() {
        let mut local_max = 0.0f64;
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + step;
            let up = f(&work)?;
            work[pi].data_mut()[ei] = orig - step;
            let down = f(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(analytic[pi].data()[ei], numeric);
            local_max = local_max.max(err);
            if err > max_err || worst.is_none() {
                max_err = max_err.max(err);
                worst = Some((pi, ei));
            }
        }
        per_param.push(local_max);
    }
    Ok(GradCheckReport {
        per_param,
        max_relative_error: max_err,
        worst,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let f = |p: &[Tensor]| Ok(p[0].item() * p[0].item());
        let report = finite_diff_check(f, &[x], &[Tensor::scalar(6.0)], 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let f = |_: &[Tensor]| Ok(4.2);
        let report = finite_diff_check(f, &[x], &[Tensor::zeros(vec![3])], 1e-5, 1e-12).unwrap();
        assert_eq!(report.max_relative_error, 0.0);
    }

    #[test]
    fn rejects_non_deterministic_function() {
        let mut calls = 0.0;
        let f = |_: &[Tensor]| {
            calls += 1.0;
            Ok(calls)
        };
        let err = finite_diff_check(f, &[Tensor::scalar(1.0)], &[Tensor::scalar(0.0)], 1e-5, 1e-4);
        assert!(matches!(err, Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn rejects_bad_step() {
        let f = |_: &[Tensor]| Ok(0.0);
        assert!(finite_diff_check(f, &[Tensor::scalar(1.0)], &[Tensor::scalar(0.0)], 0.0, 1e-4).is_err());
    }

    #[test]
    fn detects_wrong_gradient() {
        let f = |p: &[Tensor]| {
            let mut tape = Tape::new();
            let x = tape.constant(p[0].clone());
            let s = tape.mul(x, x)?;
            let s = tape.sum(s);
            Ok(tape.value(s).item())
        };
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let wrong = Tensor::new(vec![2], vec![2.0, 5.0]).unwrap();
        let report = finite_diff_check(f, &[x], &[wrong], 1e-5, 1e-4).unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst, Some((0, 1)));
    }
}
