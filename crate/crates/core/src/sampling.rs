//! Seeded random matrices and seed derivation shared by the simulators.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Child seed for (base, stream, index), mixed with splitmix64 so nearby
/// inputs give unrelated streams.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

pub fn random_symmetric<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DMatrix<f64> {
    let a = gaussian_matrix(rng, dim, dim);
    (&a + a.transpose()) * 0.5
}

/// B Bᵀ / dim for a Gaussian B: symmetric PSD, full rank almost surely.
pub fn random_psd<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DMatrix<f64> {
    let b = gaussian_matrix(rng, dim, dim);
    &b * b.transpose() / dim as f64
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with the
/// sign of R's diagonal folded into Q).
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DMatrix<f64> {
    crate::linalg::orthonormalize(&gaussian_matrix(rng, dim, dim))
}

/// Draws rows i.i.d. from N(mean, cov). `cov` must be PSD.
pub fn mvn_rows<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> DMatrix<f64> {
    let root = crate::linalg::psd_sqrt(cov);
    let z = gaussian_matrix(rng, count, mean.len());
    let mut x = z * root.transpose();
    for mut row in x.row_iter_mut() {
        row += mean.transpose();
    }
    x
}
