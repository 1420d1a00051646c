//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{PcpcaError, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn cholesky(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(a.clone())
        .ok_or_else(|| PcpcaError::Numeric("matrix is not positive definite".into()))
}

pub fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Q factor of a thin QR with the signs chosen so R has a non-negative
/// diagonal; the result has orthonormal columns spanning those of `w`.
pub fn orthonormalize(w: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = w.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..q.ncols().min(r.nrows()) {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn projector(basis: &DMatrix<f64>) -> DMatrix<f64> {
    basis * basis.transpose()
}

/// Frobenius distance between orthogonal projectors onto span(a), span(b).
pub fn projector_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let pa = projector(&orthonormalize(a));
    let pb = projector(&orthonormalize(b));
    (pa - pb).norm()
}

/// Symmetric square root of a PSD matrix; negative eigenvalues from float
/// noise are treated as zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((a + a.transpose()) * 0.5);
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Σ = W Wᵀ + σ² I.
pub fn model_covariance(w: &DMatrix<f64>, sigma2: f64) -> DMatrix<f64> {
    let d = w.nrows();
    w * w.transpose() + DMatrix::identity(d, d) * sigma2
}
