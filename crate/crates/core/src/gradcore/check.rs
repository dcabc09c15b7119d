//! Central finite-difference verification of analytic gradients.

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
    /// Coordinates where the function was non-finite at a perturbed point.
    pub skipped: Vec<usize>,
    pub checked: usize,
}

/// Step used by [`finite_diff_check`].
pub const FD_STEP: f64 = 1e-4;

/// Relative error with a small absolute floor so vanishing gradients do not
/// divide by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Compares `analytic` against central differences of `f` at `point`.
///
/// Only the coordinates listed in `coords` are perturbed (all when `None`).
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    coords: Option<&[usize]>,
) -> FdReport {
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut x = point.to_vec();
    let mut report = FdReport::default();
    for &i in coords {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let up = f(&x);
        x[i] = orig - FD_STEP;
        let down = f(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            report.skipped.push(i);
            continue;
        }
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if report.worst_coordinate.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coordinate = Some(i);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_one_is_tight() {
        let r = finite_diff_check(|t| t[0] * t[0], &[1.0], &[2.0], None);
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let r = finite_diff_check(|_| 4.2, &[0.3, -1.0], &[0.0, 0.0], None);
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn non_finite_coordinates_are_skipped() {
        let r = finite_diff_check(
            |t| if t[1] >= 0.0 { t[0] } else { f64::NAN },
            &[1.0, 0.0],
            &[1.0, 0.0],
            None,
        );
        assert_eq!(r.skipped, vec![1]);
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let r = finite_diff_check(|t| t[0] * t[0], &[1.0], &[3.0], None);
        assert!(r.max_rel_error > 0.3);
    }
}
