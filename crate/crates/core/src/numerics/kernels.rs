//! Thin wrappers over `matrixmultiply::dgemm` for row-major buffers.

/// `c (+)= op(a) · op(b)` where `op(a)` is `m × k` and `op(b)` is `k × n`.
///
/// With `trans_a` the buffer `a` holds a `k × m` matrix; with `trans_b` the
/// buffer `b` holds an `n × k` matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm(a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices have the lengths asserted above and the strides
    // describe in-bounds row-major layouts of those lengths.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// `y = x · w` for a single row `x` (len `k`) against row-major `w` (`k × n`).
pub fn vecmat(x: &[f64], w: &[f64], n: usize, y: &mut [f64]) {
    gemm(x, false, w, false, y, 1, x.len(), n, false);
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
