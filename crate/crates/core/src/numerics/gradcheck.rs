//! Central finite differences, independent of the tape.

use super::Matrix;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Gradient magnitudes below this are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every entry of `at`.
pub fn central_difference<E>(
    mut f: impl FnMut(&Matrix) -> Result<f64, E>,
    at: &Matrix,
    step: f64,
) -> Result<Matrix, E> {
    let mut probe = at.clone();
    let mut out = Matrix::zeros(at.rows(), at.cols());
    for i in 0..at.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + step;
        let plus = f(&probe)?;
        probe.as_mut_slice()[i] = orig - step;
        let minus = f(&probe)?;
        probe.as_mut_slice()[i] = orig;
        out.as_mut_slice()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(out)
}

/// Largest entrywise `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}
