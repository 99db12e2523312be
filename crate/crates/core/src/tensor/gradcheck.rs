//! Central finite-difference gradient verification.

use super::SeededRng;

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub epsilon: f64,
    /// Coordinates probed; all of them when the point is smaller.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coords: 64,
            seed: 0,
        }
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Max relative error between `analytic` and central differences of `f` at `point`.
///
/// `f` must be a pure function of its argument.
pub fn finite_diff_check(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], analytic: &[f64], opts: FdOptions) -> f64 {
    assert_eq!(point.len(), analytic.len(), "gradient length must match point");
    let coords: Vec<usize> = if point.len() <= opts.max_coords {
        (0..point.len()).collect()
    } else {
        let mut perm = SeededRng::new(opts.seed, "finite-diff").permutation(point.len());
        perm.truncate(opts.max_coords);
        perm
    };
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in coords {
        let orig = x[i];
        x[i] = orig + opts.epsilon;
        let up = f(&x);
        x[i] = orig - opts.epsilon;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * opts.epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_passes() {
        let x = [0.3, -1.2, 2.0];
        let grad: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let err = finite_diff_check(|p| p.iter().map(|v| v * v).sum(), &x, &grad, FdOptions::default());
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let x = [0.3, -1.2, 2.0];
        let mut grad: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        grad[1] *= 1.5;
        let err = finite_diff_check(|p| p.iter().map(|v| v * v).sum(), &x, &grad, FdOptions::default());
        assert!(err > 1e-4);
    }

    #[test]
    fn sampling_is_bounded_and_deterministic() {
        let x = vec![1.0; 500];
        let grad = vec![1.0; 500];
        let mut calls = 0;
        finite_diff_check(
            |p| {
                calls += 1;
                p.iter().sum()
            },
            &x,
            &grad,
            FdOptions {
                max_coords: 10,
                ..Default::default()
            },
        );
        assert_eq!(calls, 20);
    }
}
