//! Central finite-difference oracle, independent of the reverse pass.

use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_floored(a, b, 1e-8)
}

pub fn relative_error_floored(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(floor)
}

/// Denominator floor matched to what a central difference can resolve.
///
/// A difference quotient of a loss with magnitude `|f|` is quantized in
/// steps of about `eps·|f| / h` (2e-11 for `|f| ≈ 1`, `h = 1e-5`), so entries
/// smaller than ~1e-6 cannot be checked to 1e-4 relative accuracy. The floor
/// is 1e5 quanta: entries above it get a purely relative check, entries below
/// it an absolute one of ten quanta.
pub fn resolution_floor(loss: f64, h: f64) -> f64 {
    (1e5 * f64::EPSILON * loss.abs().max(1.0) / h).max(1e-8)
}

/// Numerical gradient of `f` with respect to every entry of every input.
pub fn central_difference(inputs: &[Tensor], h: f64, mut f: impl FnMut(&[Tensor]) -> f64) -> Vec<Tensor> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[t].shape());
        for i in 0..inputs[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let plus = f(&work);
            work[t].data_mut()[i] = orig - h;
            let minus = f(&work);
            work[t].data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

/// Largest relative error between two gradient sets.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    max_relative_error_floored(analytic, numeric, 1e-8)
}

pub fn max_relative_error_floored(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(a, b)| relative_error_floored(*a, *b, floor))
        .fold(0.0, f64::max)
}
