use crate::error::{MixcoError, Result};

use super::Tensor;

/// Worst coordinate found by [`finite_difference_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    pub analytic_value: f64,
    pub numeric_value: f64,
    /// Coordinates whose analytic and numeric derivatives both sit below the
    /// resolution of the central difference; they are not compared.
    pub unresolved: usize,
}

impl GradCheckReport {
    /// Keeps whichever of the two reports has the larger error.
    pub fn worst(self, other: GradCheckReport) -> GradCheckReport {
        let unresolved = self.unresolved + other.unresolved;
        let mut out = if other.max_relative_error > self.max_relative_error {
            other
        } else {
            self
        };
        out.unresolved = unresolved;
        out
    }
}

/// Resolution threshold of the difference quotient, in units of
/// `f64::EPSILON · |f| / step`.
pub const RESOLUTION: f64 = 1e5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Compares the analytic gradient of `f` at `point` with central differences.
///
/// `f` returns the value and the analytic gradient; the gradient is only read
/// from the call at `point` itself. Each coordinate `i` is probed at
/// `point ± step·e_i`. A coordinate is only compared when either derivative
/// exceeds `RESOLUTION · ε · |f| / step`; below that, rounding in `f` alone
/// can push the relative error past 1e-5.
pub fn finite_difference_check<F>(mut f: F, point: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(step > 0.0) {
        return Err(MixcoError::config(format!("step must be positive, got {step}")));
    }
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(MixcoError::domain("function is non-finite at the base point"));
    }
    point.check_same_shape(&analytic, "finite_difference_check")?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_coordinate: 0,
        analytic_value: analytic.data().first().copied().unwrap_or(0.0),
        numeric_value: 0.0,
        unresolved: 0,
    };
    let mut compared = false;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x = point.data()[i];
        probe.data_mut()[i] = x + step;
        let plus = f(&probe)?.0;
        probe.data_mut()[i] = x - step;
        let minus = f(&probe)?.0;
        probe.data_mut()[i] = x;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(MixcoError::domain(format!(
                "function is non-finite when probing coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        let floor = RESOLUTION * f64::EPSILON * plus.abs().max(minus.abs()) / step;
        if a.abs().max(numeric.abs()) <= floor {
            report.unresolved += 1;
            continue;
        }
        let err = relative_error(a, numeric);
        if !compared || err > report.max_relative_error {
            compared = true;
            report = GradCheckReport {
                max_relative_error: err,
                worst_coordinate: i,
                analytic_value: a,
                numeric_value: numeric,
                unresolved: report.unresolved,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let point = Tensor::vector(vec![1.0, 2.0]);
        let report = finite_difference_check(
            |x| {
                let v = x.data().iter().map(|a| a * a).sum();
                Ok((v, x.scale(2.0)))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-8, "{report:?}");
    }

    #[test]
    fn flat_coordinates_are_not_compared() {
        // The second coordinate has no influence on f.
        let point = Tensor::vector(vec![3.0, 1.0]);
        let report = finite_difference_check(
            |x| Ok((x.data()[0] * x.data()[0], Tensor::vector(vec![2.0 * x.data()[0], 1e-17]))),
            &point,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.unresolved, 1);
        assert!(report.max_relative_error < 1e-8);
    }

    #[test]
    fn missing_gradient_is_still_caught() {
        let point = Tensor::vector(vec![3.0]);
        let report =
            finite_difference_check(|x| Ok((x.data()[0] * x.data()[0], Tensor::vector(vec![0.0]))), &point, 1e-5)
                .unwrap();
        assert_eq!(report.max_relative_error, 1.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        let point = Tensor::vector(vec![1.0, 2.0]);
        let report =
            finite_difference_check(|x| Ok((x.data()[0] * x.data()[1], x.clone())), &point, 1e-5)
                .unwrap();
        assert!(report.max_relative_error > 0.1);
    }

    #[test]
    fn non_finite_probe_is_domain_error() {
        let point = Tensor::vector(vec![0.0]);
        let res = finite_difference_check(
            |x| {
                let v = x.data()[0];
                let value = if v == 0.0 { 0.0 } else { f64::INFINITY };
                Ok((value, Tensor::vector(vec![0.0])))
            },
            &point,
            1e-5,
        );
        assert!(matches!(res, Err(MixcoError::Domain(_))));
    }
}
