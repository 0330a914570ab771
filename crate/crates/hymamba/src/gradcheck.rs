//! Central finite-difference gradient checking.
//!
//! The checker perturbs raw parameter values, re-runs a closure that builds
//! the loss from scratch, and compares the numeric slope against a provided
//! analytic gradient. It never touches the tape internals, so it stays an
//! independent oracle for the reverse pass.

/// Relative error between analytic and numeric values with a denominator
/// floor.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Report for one checked tensor.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl CheckReport {
    pub fn ok(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Check `analytic` against central differences of `f` around `values`.
///
/// `f` must be a pure function of the values slice. `h` is the step
/// (1e-5 for the standard suite), `floor` the denominator floor (1e-8).
pub fn check_grad(
    values: &[f64],
    analytic: &[f64],
    h: f64,
    floor: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> CheckReport {
    assert_eq!(values.len(), analytic.len(), "gradient length mismatch");
    let mut buf = values.to_vec();
    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for i in 0..values.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let up = f(&buf);
        buf[i] = orig - h;
        let down = f(&buf);
        buf[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let e = rel_err(analytic[i], numeric, floor);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    report
}

/// Like [`check_grad`] but only at the listed indices; used for large
/// tensors where probing every entry is wasteful.
pub fn check_grad_at(
    values: &[f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
    floor: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> CheckReport {
    let mut buf = values.to_vec();
    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for &i in indices {
        let orig = buf[i];
        buf[i] = orig + h;
        let up = f(&buf);
        buf[i] = orig - h;
        let down = f(&buf);
        buf[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let e = rel_err(analytic[i], numeric, floor);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let values = [3.0, -2.0, 0.5];
        let analytic = [3.0, -2.0, 0.5]; // d/dx 0.5*sum(x^2) = x
        let r = check_grad(&values, &analytic, 1e-5, 1e-8, |v| {
            0.5 * v.iter().map(|x| x * x).sum::<f64>()
        });
        assert!(r.ok(1e-6), "{r:?}");
    }

    #[test]
    fn wrong_gradient_fails() {
        let values = [1.0];
        let analytic = [2.5];
        let r = check_grad(&values, &analytic, 1e-5, 1e-8, |v| v[0] * v[0]);
        assert!(!r.ok(1e-4));
    }
}
