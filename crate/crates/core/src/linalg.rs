//! Dense products with a fixed block decomposition.
//!
//! Each output block is computed by one sequential faer call, and blocks are
//! distributed over the ambient rayon pool. The arithmetic of a block never
//! depends on how many workers run, so results are bit-identical for any
//! thread count.

use dyn_stack::{MemBuffer, MemStack};
use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatMut, MatRef, Par};
use rayon::prelude::*;

const COL_BLOCK: usize = 64;
const ROW_BLOCK: usize = 512;

/// `AᵀA` for a tall `A`.
pub fn gram(a: MatRef<'_, f64>) -> Mat<f64> {
    let n = a.ncols();
    let starts: Vec<usize> = (0..n).step_by(COL_BLOCK).collect();
    let blocks: Vec<Mat<f64>> = starts
        .par_iter()
        .map(|&j0| {
            let w = COL_BLOCK.min(n - j0);
            let mut out = Mat::<f64>::zeros(n, w);
            matmul(
                out.as_mut(),
                Accum::Replace,
                a.transpose(),
                a.subcols(j0, w),
                1.0,
                Par::Seq,
            );
            out
        })
        .collect();
    let mut g = Mat::<f64>::zeros(n, n);
    for (&j0, block) in starts.iter().zip(&blocks) {
        g.as_mut().subcols_mut(j0, block.ncols()).copy_from(block);
    }
    // exact symmetry
    for j in 0..n {
        for i in (j + 1)..n {
            let v = g[(i, j)];
            g[(j, i)] = v;
        }
    }
    g
}

/// `A·B`, blocked over rows of `A`.
pub fn mul(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    assert_eq!(a.ncols(), b.nrows());
    let m = a.nrows();
    let starts: Vec<usize> = (0..m).step_by(ROW_BLOCK).collect();
    let blocks: Vec<Mat<f64>> = starts
        .par_iter()
        .map(|&i0| {
            let h = ROW_BLOCK.min(m - i0);
            let mut out = Mat::<f64>::zeros(h, b.ncols());
            matmul(out.as_mut(), Accum::Replace, a.subrows(i0, h), b, 1.0, Par::Seq);
            out
        })
        .collect();
    let mut c = Mat::<f64>::zeros(m, b.ncols());
    for (&i0, block) in starts.iter().zip(&blocks) {
        c.as_mut().subrows_mut(i0, block.nrows()).copy_from(block);
    }
    c
}

/// Sequential `dst = Aᵀ·B`.
pub fn tmul_seq(dst: MatMut<'_, f64>, a: MatRef<'_, f64>, b: MatRef<'_, f64>) {
    matmul(dst, Accum::Replace, a.transpose(), b, 1.0, Par::Seq);
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
pub fn symmetric_eigen(a: MatRef<'_, f64>) -> Option<(Vec<f64>, Mat<f64>)> {
    use faer::linalg::evd;
    let n = a.nrows();
    let mut s = faer::diag::Diag::<f64>::zeros(n);
    let mut u = Mat::<f64>::zeros(n, n);
    let par = Par::Seq;
    let mut mem = MemBuffer::new(evd::self_adjoint_evd_scratch::<f64>(
        n,
        evd::ComputeEigenvectors::Yes,
        par,
        Default::default(),
    ));
    evd::self_adjoint_evd(
        a,
        s.as_mut(),
        Some(u.as_mut()),
        par,
        MemStack::new(&mut mem),
        Default::default(),
    )
    .ok()?;
    let vals = s.column_vector().iter().copied().collect();
    Some((vals, u))
}

/// Solves `A x = b` in place for symmetric positive definite `A`.
/// Returns `false` when the Cholesky factorization breaks down.
pub fn cholesky_solve(a: &Mat<f64>, b: &mut [f64]) -> bool {
    use faer::linalg::cholesky::llt;
    let n = a.nrows();
    let mut l = a.clone();
    let mut mem = MemBuffer::new(llt::factor::cholesky_in_place_scratch::<f64>(
        n,
        Par::Seq,
        Default::default(),
    ));
    if llt::factor::cholesky_in_place(
        l.as_mut(),
        Default::default(),
        Par::Seq,
        MemStack::new(&mut mem),
        Default::default(),
    )
    .is_err()
    {
        return false;
    }
    let mut rhs = MatMut::from_column_major_slice_mut(b, n, 1);
    let mut mem = MemBuffer::new(llt::solve::solve_in_place_scratch::<f64>(n, 1, Par::Seq));
    llt::solve::solve_in_place(l.as_ref(), rhs.as_mut(), Par::Seq, MemStack::new(&mut mem));
    b.iter().all(|x| x.is_finite())
}
