/// `c = alpha * a·b + beta * c` for strided row/column layouts.
///
/// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`; every stride is in elements.
/// Slices must cover the highest addressed element.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, c: usize, rs: usize, cs: usize| (r - 1) * rs + (c - 1) * cs;
    assert!(k == 0 || last(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || last(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
