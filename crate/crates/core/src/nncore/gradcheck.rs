//! Central finite-difference verification of analytic gradients.

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-coordinate relative error.
    pub max_rel_err: f64,
    /// Coordinate where it occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords: usize,
    pub passed: bool,
}

/// Compares `analytic` against `(f(θ+ε·eᵢ) − f(θ−ε·eᵢ)) / 2ε` for every coordinate.
///
/// Relative error is `|a − n| / max(|a|, |n|, floor)`; the floor keeps coordinates whose
/// true gradient is zero from dividing by rounding noise.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    eps: f64,
    tol: f64,
    floor: f64,
) -> GradCheckReport {
    assert_eq!(theta.len(), analytic.len(), "one analytic value per coordinate");
    let mut x = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords: theta.len(),
        passed: true,
    };
    for i in 0..theta.len() {
        x[i] = theta[i] + eps;
        let up = f(&x);
        x[i] = theta[i] - eps;
        let down = f(&x);
        x[i] = theta[i];
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if !(rel <= report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.passed = report.max_rel_err < tol;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_matches_exactly() {
        let c = [0.5, -2.0, 3.25];
        let f = |x: &[f64]| x.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        let r = grad_check(f, &[1.0, 2.0, -1.0], &c, 1e-3, 1e-7, 1e-12);
        assert!(r.passed && r.max_rel_err < 1e-7, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let f = |x: &[f64]| x[0] * x[0] + x[1].sin();
        let theta = [0.7, 0.3];
        let good = [1.4, 0.3f64.cos()];
        assert!(grad_check(f, &theta, &good, 1e-4, 1e-6, 1e-8).passed);
        let bad = [1.4 * 1.01, 0.3f64.cos()];
        let r = grad_check(f, &theta, &bad, 1e-4, 1e-3, 1e-8);
        assert!(!r.passed);
        assert_eq!(r.worst_index, 0);
    }

    #[test]
    fn nan_gradient_is_never_accepted() {
        let r = grad_check(|x: &[f64]| x[0], &[1.0], &[f64::NAN], 1e-3, 1e-3, 1e-8);
        assert!(!r.passed);
    }
}
