//! Small dense linear-algebra helpers shared by the filter and transport code.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Jitter ladder tried, in order, when a Cholesky factorization fails.
pub const JITTER_LADDER: [f64; 3] = [1e-12, 1e-9, 1e-6];

/// Returns `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute asymmetry `max |m_ij - m_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Checks that `m` is square, symmetric within `sym_tol` and has no eigenvalue below `-eig_tol`.
pub fn check_psd(m: &DMatrix<f64>, sym_tol: f64, eig_tol: f64, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::NotPsd(format!(
            "{what} is {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPsd(format!("{what} has non-finite entries")));
    }
    let asym = asymmetry(m);
    if asym > sym_tol {
        return Err(Error::NotPsd(format!("{what} asymmetric by {asym:e}")));
    }
    if m.nrows() == 0 {
        return Ok(());
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let min = eig.eigenvalues.min();
    if min < -eig_tol {
        return Err(Error::NotPsd(format!("{what} has eigenvalue {min:e}")));
    }
    Ok(())
}

/// Cholesky factorization with an escalating diagonal jitter.
///
/// Returns the lower factor and the jitter that was actually added (0 when none was needed).
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c.l(), 0.0));
    }
    let n = m.nrows();
    let scale = (m.trace() / n.max(1) as f64).abs().max(1.0);
    for &j in JITTER_LADDER.iter() {
        let shifted = m + DMatrix::<f64>::identity(n, n) * (j * scale);
        if let Some(c) = Cholesky::<f64, Dyn>::new(shifted) {
            return Ok((c.l(), j * scale));
        }
    }
    Err(Error::Cholesky {
        max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] * scale,
    })
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues are clamped to zero.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// A factor `L` (not necessarily triangular) with `L Lᵀ = m` for symmetric PSD `m`.
///
/// Handles singular matrices such as `Q = 0`, which a Cholesky factorization rejects.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let is_diag = (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0));
    if is_diag {
        return DMatrix::from_diagonal(&m.diagonal().map(|v| v.max(0.0).sqrt()));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d)
}

/// Matrix exponential by a Taylor series truncated after `order` terms beyond the identity.
pub fn expm_taylor(a: &DMatrix<f64>, order: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let mut sum = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..=order {
        term = (&term * a) / k as f64;
        sum += &term;
    }
    sum
}
