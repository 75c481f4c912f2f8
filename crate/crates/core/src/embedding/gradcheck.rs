//! Central finite differences, used to verify the hand-written gradients.

/// Step used when callers have no better choice.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Central-difference estimate of `∇f(x)`, one coordinate at a time.
pub fn finite_diff_gradient<F>(f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-2;

/// `|a - b| / max(|a|, |b|, floor)` with floor [`RELATIVE_ERROR_FLOOR`].
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Largest [`relative_error`] over paired coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm() {
        let g = finite_diff_gradient(|x| x.iter().map(|v| v * v).sum(), &[1.0, 0.0], DEFAULT_EPSILON);
        assert!((g[0] - 2.0).abs() < 1e-6);
        assert!(g[1].abs() < 1e-6);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = finite_diff_gradient(|_| 3.5, &[0.2, -4.0, 7.0], DEFAULT_EPSILON);
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-9, 0.0) - 1e-7).abs() < 1e-20);
    }
}
