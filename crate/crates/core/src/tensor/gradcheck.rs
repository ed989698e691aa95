//! Central-difference gradient verification.

use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is (numerically) zero are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic` against central differences of `f` at `point`.
///
/// `coords` restricts the check to a subset of coordinates; `None` checks all.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport> {
    if analytic.len() != point.len() {
        return Err(Error::Check(format!(
            "{} analytic components for a {}-dimensional point",
            analytic.len(),
            point.len()
        )));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &i in coords {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = f(&x);
        x[i] = orig - eps;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Check(format!("non-finite function value at coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.checked == 1 {
            report.max_rel_err = err;
            report.worst_coord = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact() {
        // f(x) = x^T A x with symmetric A; grad = 2 A x
        let a = [[2.0, 0.5, -1.0], [0.5, 3.0, 0.25], [-1.0, 0.25, 1.5]];
        let f = |x: &[f64]| {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += x[i] * a[i][j] * x[j];
                }
            }
            s
        };
        let p = [0.7, -1.3, 2.1];
        let grad: Vec<f64> = (0..3).map(|i| 2.0 * (0..3).map(|j| a[i][j] * p[j]).sum::<f64>()).collect();
        let r = grad_check(f, &p, &grad, 1e-5, None).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let r = grad_check(|x| x[0] * x[0], &[1.0], &[3.0], 1e-5, None).unwrap();
        assert!(r.max_rel_err > 0.3);
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let r = grad_check(|x| (x[0]).ln(), &[0.0], &[1.0], 1e-5, None);
        assert!(matches!(r, Err(Error::Check(_))));
    }
}
