//! Central finite differences, used as the independent oracle for the tape.
//! Nothing here touches [`super::GradTape`].

use super::Matrix;

/// Step used by every gradient check in the crate.
pub const FD_STEP: f64 = 1e-6;

/// Gradients at or below this magnitude are compared absolutely: the
/// relative error uses `max(|analytic|, |numeric|, GRAD_FLOOR)` as its
/// denominator, since central differences carry roughly `1e-10` of rounding
/// noise at `h = 1e-6`.
pub const GRAD_FLOOR: f64 = 1e-3;

/// Numerical gradient of `f` at `x` by central differences, one entry at a
/// time.
pub fn central_difference(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for idx in 0..x.len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[idx] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[idx] = orig;
        out.data_mut()[idx] = (plus - minus) / (2.0 * h);
    }
    out
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
    (analytic - numeric).abs() / denom
}

pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_has_exact_central_difference() {
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5]]);
        let g = central_difference(&x, FD_STEP, |m| m.data().iter().map(|v| v * v).sum());
        let expect = x.map(|v| 2.0 * v);
        assert!(max_relative_error(&expect, &g) < 1e-8);
    }

    #[test]
    fn relative_error_uses_floor_for_tiny_values() {
        assert!(relative_error(1e-12, 2e-12) < 1e-8);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
