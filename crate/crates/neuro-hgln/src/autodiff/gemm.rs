//! Dense f64 matrix kernels backing the tape's matmul ops.
//!
//! The inner product kernel is `matrixmultiply::dgemm` (runtime-dispatched
//! SIMD). Large products are split into contiguous row blocks of the output,
//! one per worker; each block is an independent dgemm call, so the
//! floating-point evaluation order of every output element is identical no
//! matter how many threads run. Results are bit-deterministic by construction.

use std::sync::atomic::{AtomicUsize, Ordering};

static WORKERS: AtomicUsize = AtomicUsize::new(1);

/// Cap worker parallelism for the matrix kernels. 1 (the default) is fully
/// serial. Values above 1 split row blocks across rayon workers; outputs are
/// bit-identical either way.
pub fn set_threads(n: usize) {
    WORKERS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    WORKERS.load(Ordering::Relaxed)
}

/// Whether an operand is used as stored or transposed.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// `c = alpha * op(a) @ op(b) + beta * c` on row-major slices.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`, `c` is `m x n`. When `ta` is
/// [`Trans::Yes`] the slice `a` holds the `k x m` matrix whose transpose is
/// used (and symmetrically for `b`).
pub fn gemm(
    ta: Trans,
    tb: Trans,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // Row-major strides of the logical m x k / k x n operands.
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };

    let workers = threads();
    if workers <= 1 || m * k * n < 1 << 16 || m < workers {
        dgemm_block(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c);
        return;
    }

    // Split output rows into one contiguous block per worker.
    let rows_per = m.div_ceil(workers);
    use rayon::prelude::*;
    c.par_chunks_mut(rows_per * n)
        .enumerate()
        .for_each(|(blk, c_blk)| {
            let i0 = blk * rows_per;
            let rows = c_blk.len() / n;
            // Row i of op(A) starts at offset i * rsa in `a` for both layouts.
            let a_off = i0 * rsa as usize;
            dgemm_block(
                rows,
                k,
                n,
                alpha,
                &a[a_off..],
                rsa,
                csa,
                b,
                rsb,
                csb,
                beta,
                c_blk,
            );
        });
}

#[allow(unsafe_code)]
fn dgemm_block(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    // Bounds: the largest index touched in `a` is (m-1)*rsa + (k-1)*csa, in
    // `b` it is (k-1)*rsb + (n-1)*csb; both are within the slices checked by
    // the caller. `c` is exactly m*n and row-major.
    debug_assert!(m == 0 || k == 0 || (((m - 1) as isize * rsa + (k - 1) as isize * csa) as usize) < a.len());
    debug_assert!(k == 0 || n == 0 || (((k - 1) as isize * rsb + (n - 1) as isize * csb) as usize) < b.len());
    debug_assert_eq!(c.len(), m * n);
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
