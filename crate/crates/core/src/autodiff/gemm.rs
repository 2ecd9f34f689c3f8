//! Dense f64 matrix multiply on row-major slices.
//!
//! All heavy lifting is delegated to `matrixmultiply::dgemm` (single
//! threaded, so repeated runs on one machine are bit-identical). This is
//! the only unsafe call site in the crate; the wrapper re-establishes the
//! slice-length preconditions the raw pointer API gives up.

/// C[m×n] = alpha·op(A)·op(B) + beta·C.
///
/// `op(A)` is A as stored (`[m×k]`, row-major) when `ta` is false, or the
/// transpose of an `[k×m]`-stored A when `ta` is true; likewise `op(B)` is
/// `[k×n]` as stored or the transpose of an `[n×k]` buffer. Transposition
/// is expressed through strides, so no copies are made.
pub fn dgemm(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: A has {} elems, want {}×{}", a.len(), m, k);
    assert_eq!(b.len(), k * n, "gemm: B has {} elems, want {}×{}", b.len(), k, n);
    assert_eq!(c.len(), m * n, "gemm: C has {} elems, want {}×{}", c.len(), m, n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
