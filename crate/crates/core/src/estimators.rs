//! Closed-form PCA / PPCA / CPCA / PCPCA estimators, the relative
//! log-likelihood, latent projections, generation and held-out scoring.
//!
//! User-facing code speaks in the sample-size adjusted weight γ′ = γ m / n;
//! everything in this module that talks about `gamma` means the raw weight
//! on the background scatter Σ y yᵀ. Use [`convert_gamma`] at the boundary.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ContrastivePair, DataMatrix};
use crate::error::{PcpcaError, Result};
use crate::linalg::{chol_log_det, cholesky, model_covariance, orthonormalize, projector, LN_2PI};
use crate::sampling::gaussian_matrix;
use crate::spectral::{differential_covariance, eig_desc, scatter, Scaling, SymMatrix};

/// γ within this distance below n/m is treated as the (excluded) boundary.
pub const GAMMA_BOUNDARY_TOL: f64 = 1e-12;
/// Slightly negative entries of Λ_d/(n−γm) − σ²I down to this value are clamped to zero.
pub const LOADING_CLAMP_TOL: f64 = 1e-10;

/// Fitted PCPCA parameters. `w` is D × d with columns ordered by decreasing
/// norm (the rotation R is fixed to the identity).
#[derive(Debug, Clone, PartialEq)]
pub struct PcpcaModel {
    w: DMatrix<f64>,
    sigma2: f64,
    feature_mean: DVector<f64>,
    gamma: f64,
    n: usize,
    m: usize,
}

impl PcpcaModel {
    pub fn new(
        w: DMatrix<f64>,
        sigma2: f64,
        feature_mean: DVector<f64>,
        gamma: f64,
        n: usize,
        m: usize,
    ) -> Result<Self> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(PcpcaError::arg(format!("sigma2 must be positive, got {sigma2}")));
        }
        if feature_mean.len() != w.nrows() {
            return Err(PcpcaError::arg("feature mean length does not match W"));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(PcpcaError::Numeric("W has non-finite entries".into()));
        }
        if !(gamma >= 0.0) {
            return Err(PcpcaError::arg("gamma must be non-negative"));
        }
        Ok(PcpcaModel {
            w,
            sigma2,
            feature_mean,
            gamma,
            n,
            m,
        })
    }

    /// A model with the same γ, sizes and mean but different (W, σ²).
    pub fn with_params(&self, w: DMatrix<f64>, sigma2: f64) -> Result<Self> {
        Self::new(w, sigma2, self.feature_mean.clone(), self.gamma, self.n, self.m)
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn feature_mean(&self) -> &DVector<f64> {
        &self.feature_mean
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// γ′ = γ m / n, or 0 when there was no background.
    pub fn gamma_prime(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.gamma * self.m as f64 / self.n as f64
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w.ncols()
    }

    /// A = W Wᵀ + σ² I.
    pub fn covariance(&self) -> DMatrix<f64> {
        model_covariance(&self.w, self.sigma2)
    }
}

/// A d-dimensional subspace of ℝᴰ given by an orthonormal basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    basis: DMatrix<f64>,
}

pub const ORTHONORMAL_TOL: f64 = 1e-8;

impl Subspace {
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        let d = basis.ncols();
        let err = (basis.transpose() * &basis - DMatrix::identity(d, d)).amax();
        if err > ORTHONORMAL_TOL {
            return Err(PcpcaError::arg(format!(
                "basis is not orthonormal (max deviation {err:.3e})"
            )));
        }
        Ok(Subspace { basis })
    }

    pub fn spanned_by(w: &DMatrix<f64>) -> Self {
        Subspace {
            basis: orthonormalize(w),
        }
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn projector(&self) -> DMatrix<f64> {
        projector(&self.basis)
    }

    /// ‖P_self − P_other‖_F.
    pub fn distance(&self, other: &Subspace) -> f64 {
        (self.projector() - other.projector()).norm()
    }
}

/// γ = γ′ n / m.
pub fn convert_gamma(gamma_prime: f64, n: usize, m: usize) -> Result<f64> {
    check_sizes(gamma_prime, n, m)?;
    Ok(gamma_prime * n as f64 / m as f64)
}

/// γ′ = γ m / n.
pub fn gamma_prime_from_raw(gamma: f64, n: usize, m: usize) -> Result<f64> {
    check_sizes(gamma, n, m)?;
    Ok(gamma * m as f64 / n as f64)
}

fn check_sizes(g: f64, n: usize, m: usize) -> Result<()> {
    if !(g >= 0.0) || !g.is_finite() {
        return Err(PcpcaError::arg(format!("gamma must be finite and non-negative, got {g}")));
    }
    if n == 0 || m == 0 {
        return Err(PcpcaError::arg("sample sizes must be at least 1"));
    }
    Ok(())
}

/// Maximum relative-likelihood estimate from a sums-mode differential
/// scatter matrix C = Σ x xᵀ − γ Σ y yᵀ.
pub fn fit_from_scatter(
    c: &SymMatrix,
    n: usize,
    m: usize,
    d: usize,
    gamma: f64,
    feature_mean: DVector<f64>,
) -> Result<PcpcaModel> {
    let dim = c.dim();
    if d == 0 || d >= dim {
        return Err(PcpcaError::arg(format!(
            "latent dimension d = {d} must satisfy 1 <= d < D = {dim}"
        )));
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(PcpcaError::arg(format!("gamma must be finite and non-negative, got {gamma}")));
    }
    if m > 0 && gamma >= n as f64 / m as f64 - GAMMA_BOUNDARY_TOL {
        return Err(PcpcaError::InfeasibleGamma {
            gamma,
            constraint: format!(
                "n - gamma*m > 0 requires gamma < n/m = {} (gamma' < 1)",
                n as f64 / m as f64
            ),
        });
    }
    let kappa = n as f64 - gamma * m as f64;
    let spec = eig_desc(c)?;
    let tail = spec.tail_sum(d);
    if !(tail > 0.0) {
        return Err(PcpcaError::InfeasibleGamma {
            gamma,
            constraint: format!(
                "sigma2 > 0 requires the trailing eigenvalue sum of C to be positive, got {tail:.6e}"
            ),
        });
    }
    let sigma2 = tail / (kappa * (dim - d) as f64);
    let mut scales = DVector::zeros(d);
    for k in 0..d {
        let v = spec.values()[k] / kappa - sigma2;
        if v < -LOADING_CLAMP_TOL {
            return Err(PcpcaError::RankDeficient(format!(
                "loading {k} has negative variance {v:.3e}"
            )));
        }
        scales[k] = v.max(0.0).sqrt();
    }
    let w = spec.leading_vectors(d) * DMatrix::from_diagonal(&scales);
    PcpcaModel::new(w, sigma2, feature_mean, gamma, n, m)
}

/// Closed-form PCPCA fit on a centered, fully observed pair.
pub fn fit_pcpca(pair: &ContrastivePair, d: usize, gamma: f64) -> Result<PcpcaModel> {
    if !pair.is_fully_observed() {
        return Err(PcpcaError::arg(
            "closed-form fit needs fully observed data; use fit_missing",
        ));
    }
    let c = differential_covariance(pair, gamma, Scaling::Sums)?;
    fit_from_scatter(
        &c,
        pair.n(),
        pair.m(),
        d,
        gamma,
        pair.foreground().feature_mean().clone(),
    )
}

/// PPCA maximum-likelihood fit: PCPCA with no background.
pub fn fit_ppca(x: &DataMatrix, d: usize) -> Result<PcpcaModel> {
    fit_pcpca(&ContrastivePair::foreground_only(x.clone())?, d, 0.0)
}

/// Top-d eigenvectors of C_X − γ′ C_Y.
pub fn fit_cpca(pair: &ContrastivePair, d: usize, gamma_prime: f64) -> Result<Subspace> {
    let dim = pair.dim();
    if d == 0 || d > dim {
        return Err(PcpcaError::arg(format!("d = {d} outside 1..={dim}")));
    }
    let c = differential_covariance(pair, gamma_prime, Scaling::Means)?;
    let spec = eig_desc(&c)?;
    if spec.values()[d - 1] <= 0.0 {
        log::warn!(
            "CPCA at gamma' = {gamma_prime}: eigenvalue {} of C is {:.4e} (not positive)",
            d,
            spec.values()[d - 1]
        );
    }
    Subspace::new(spec.leading_vectors(d))
}

/// PCA: CPCA with γ′ = 0.
pub fn fit_pca(x: &DataMatrix, d: usize) -> Result<Subspace> {
    fit_cpca(&ContrastivePair::foreground_only(x.clone())?, d, 0.0)
}

/// −(n−γm)/2 (D ln 2π + ln|A|) − ½ tr(A⁻¹ C) for sums-mode C.
pub fn relative_log_likelihood_scatter(
    w: &DMatrix<f64>,
    sigma2: f64,
    c: &SymMatrix,
    n: usize,
    m: usize,
    gamma: f64,
) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(PcpcaError::arg("sigma2 must be positive"));
    }
    let dim = w.nrows();
    let a = model_covariance(w, sigma2);
    let chol = cholesky(&a)?;
    let kappa = n as f64 - gamma * m as f64;
    let trace = chol.solve(c.as_matrix()).trace();
    Ok(-0.5 * kappa * (dim as f64 * LN_2PI + chol_log_det(&chol)) - 0.5 * trace)
}

/// log p(X | W, σ²) − γ log p(Y | W, σ²) under x, y ~ N(0, W Wᵀ + σ² I).
pub fn relative_log_likelihood(model: &PcpcaModel, pair: &ContrastivePair, gamma: f64) -> Result<f64> {
    if pair.dim() != model.dim() {
        return Err(PcpcaError::arg("model and data dimensions differ"));
    }
    if !pair.is_fully_observed() {
        return Err(PcpcaError::arg(
            "relative likelihood needs fully observed data; use missing::masked_objective",
        ));
    }
    let c = differential_covariance(pair, gamma, Scaling::Sums)?;
    relative_log_likelihood_scatter(model.w(), model.sigma2(), &c, pair.n(), pair.m(), gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// E[z | x] = (WᵀW + σ²I)⁻¹ Wᵀ x.
    #[default]
    PosteriorMean,
    /// Uᵀ x with U an orthonormal basis of span(W).
    Orthonormal,
}

/// Latent coordinates (n × d) of centered, fully observed data.
pub fn project(model: &PcpcaModel, x: &DataMatrix, mode: ProjectionMode) -> Result<DMatrix<f64>> {
    if x.n_features() != model.dim() {
        return Err(PcpcaError::arg(format!(
            "data have {} features, model expects {}",
            x.n_features(),
            model.dim()
        )));
    }
    if !x.is_centered() {
        return Err(PcpcaError::NotCentered);
    }
    let values = x.dense()?;
    let w = model.w();
    match mode {
        ProjectionMode::PosteriorMean => {
            let d = model.latent_dim();
            let m = w.transpose() * w + DMatrix::identity(d, d) * model.sigma2();
            let chol = cholesky(&m)?;
            // rows z_iᵀ = x_iᵀ W M⁻¹, M symmetric
            Ok(chol.solve(&(w.transpose() * values.transpose())).transpose())
        }
        ProjectionMode::Orthonormal => Ok(values * orthonormalize(w)),
    }
}

/// x̂ = W z + μ (+ ε when `noise` is given) for each row z of `latents`.
pub fn generate_from_latents(
    model: &PcpcaModel,
    latents: &DMatrix<f64>,
    noise: Option<&DMatrix<f64>>,
) -> Result<DataMatrix> {
    let mut x = latents * model.w().transpose();
    if let Some(eps) = noise {
        x += eps * model.sigma2().sqrt();
    }
    for mut row in x.row_iter_mut() {
        row += model.feature_mean().transpose();
    }
    DataMatrix::new(x)
}

/// Draws `count` foreground samples from the fitted model, on the raw
/// (uncentered) scale.
pub fn generate<R: Rng + ?Sized>(
    model: &PcpcaModel,
    count: usize,
    rng: &mut R,
    add_noise: bool,
) -> Result<DataMatrix> {
    if count == 0 {
        return Err(PcpcaError::arg("count must be at least 1"));
    }
    let z = gaussian_matrix(rng, count, model.latent_dim());
    let eps = add_noise.then(|| gaussian_matrix(rng, count, model.dim()));
    generate_from_latents(model, &z, eps.as_ref())
}

/// Σ_i log N(x_i; 0, W Wᵀ + σ² I) for data centered by the model's mean.
/// Samples with missing cells contribute their observed-coordinate marginal.
pub fn heldout_log_likelihood(model: &PcpcaModel, x_test: &DataMatrix) -> Result<f64> {
    if x_test.n_features() != model.dim() {
        return Err(PcpcaError::arg(format!(
            "test data have {} features, model expects {}",
            x_test.n_features(),
            model.dim()
        )));
    }
    if !x_test.is_centered() {
        return Err(PcpcaError::NotCentered);
    }
    if x_test.is_fully_observed() {
        let c = scatter(x_test)?;
        relative_log_likelihood_scatter(model.w(), model.sigma2(), &c, x_test.n_samples(), 0, 0.0)
    } else {
        crate::missing::masked_log_likelihood(model.w(), model.sigma2(), x_test)
    }
}

pub const MODEL_VERSION: &str = "pcpca-model/1";

/// On-disk JSON form of a fitted model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: String,
    /// Row-major D × d loadings.
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    pub sigma2: f64,
    pub feature_mean: Vec<f64>,
    pub d: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub gamma: f64,
    pub gamma_prime: f64,
    pub n: usize,
    pub m: usize,
    pub scaling: Scaling,
    pub project_mode: ProjectionMode,
}

impl ModelFile {
    pub fn from_model(model: &PcpcaModel, project_mode: ProjectionMode) -> Self {
        ModelFile {
            version: MODEL_VERSION.to_string(),
            w: model.w().row_iter().map(|r| r.iter().copied().collect()).collect(),
            sigma2: model.sigma2(),
            feature_mean: model.feature_mean().iter().copied().collect(),
            d: model.latent_dim(),
            dim: model.dim(),
            gamma: model.gamma(),
            gamma_prime: model.gamma_prime(),
            n: model.n(),
            m: model.m(),
            scaling: Scaling::Sums,
            project_mode,
        }
    }

    pub fn to_model(&self) -> Result<PcpcaModel> {
        if self.version != MODEL_VERSION {
            return Err(PcpcaError::Config(format!(
                "unsupported model version {:?}, expected {MODEL_VERSION:?}",
                self.version
            )));
        }
        if self.w.len() != self.dim || self.w.iter().any(|r| r.len() != self.d) {
            return Err(PcpcaError::Config("W does not have shape D x d".into()));
        }
        let w = DMatrix::from_fn(self.dim, self.d, |i, k| self.w[i][k]);
        PcpcaModel::new(
            w,
            self.sigma2,
            DVector::from_vec(self.feature_mean.clone()),
            self.gamma,
            self.n,
            self.m,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{gaussian_matrix, random_orthogonal, rng};
    use rand::SeedableRng;

    fn centered(x: DMatrix<f64>) -> DataMatrix {
        DataMatrix::new(x).unwrap().center().unwrap()
    }

    fn random_pair(seed: u64, n: usize, m: usize, dim: usize) -> ContrastivePair {
        let mut r = rng(seed);
        let mix = gaussian_matrix(&mut r, dim, dim);
        let x = gaussian_matrix(&mut r, n, dim) * &mix;
        let y = gaussian_matrix(&mut r, m, dim);
        ContrastivePair::new(centered(x), centered(y)).unwrap()
    }

    /// log N(x; 0, A) summed over rows, via explicit inverse and LU determinant.
    fn density_oracle(a: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
        let inv = a.clone().try_inverse().unwrap();
        let det = a.determinant();
        let dim = a.nrows() as f64;
        x.row_iter()
            .map(|r| {
                let q = (r * &inv * r.transpose())[(0, 0)];
                -0.5 * (dim * (2.0 * std::f64::consts::PI).ln() + det.ln() + q)
            })
            .sum()
    }

    #[test]
    fn theorem_hand_example_gamma_zero() {
        let n = 3.0f64;
        let x = DMatrix::from_diagonal(&DVector::from_row_slice(&[
            (5.0 * n).sqrt(),
            (2.0 * n).sqrt(),
            n.sqrt(),
        ]));
        let pair = ContrastivePair::foreground_only(DataMatrix::from_centered(x).unwrap()).unwrap();
        let model = fit_pcpca(&pair, 1, 0.0).unwrap();
        assert!((model.sigma2() - 1.5).abs() < 1e-12);
        let w = model.w();
        assert!((w[(0, 0)].abs() - 3.5f64.sqrt()).abs() < 1e-12);
        assert!(w[(1, 0)].abs() < 1e-12 && w[(2, 0)].abs() < 1e-12);
    }

    #[test]
    fn gamma_zero_matches_ppca_reference() {
        for seed in 0..10 {
            let pair = random_pair(seed, 40, 30, 5);
            let x = pair.foreground().values().clone();
            let model = fit_pcpca(&pair, 2, 0.0).unwrap();
            // reference PPCA MLE from the SVD of X / √n
            let svd = (&x / (40f64).sqrt()).svd(false, true);
            let mut sv: Vec<(f64, usize)> = svd.singular_values.iter().map(|s| s * s).zip(0..).collect();
            sv.sort_by(|a, b| b.0.total_cmp(&a.0));
            let s2 = sv[2..].iter().map(|p| p.0).sum::<f64>() / 3.0;
            let vt = svd.v_t.unwrap();
            let mut wref = DMatrix::zeros(5, 2);
            for (j, &(lam, idx)) in sv[..2].iter().enumerate() {
                let col = vt.row(idx).transpose() * (lam - s2).sqrt();
                wref.set_column(j, &col);
            }
            let a = model.w() * model.w().transpose();
            let b = &wref * wref.transpose();
            assert!((a - b).norm() <= 1e-8);
            assert!((model.sigma2() - s2).abs() <= 1e-10);
        }
    }

    #[test]
    fn infeasible_gamma_errors() {
        let pair = random_pair(1, 20, 20, 4);
        assert!(matches!(fit_pcpca(&pair, 2, 1.0), Err(PcpcaError::InfeasibleGamma { .. })));
        assert!(matches!(fit_pcpca(&pair, 2, 1.5), Err(PcpcaError::InfeasibleGamma { .. })));
        assert!(fit_pcpca(&pair, 2, 0.5).is_ok());
        // foreground of rank 1 in D = 3 leaves a zero tail at γ = 0
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
        let y = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, -1.0, 0.0]);
        let pair = ContrastivePair::new(
            DataMatrix::from_centered(x).unwrap(),
            DataMatrix::from_centered(y).unwrap(),
        )
        .unwrap();
        assert!(matches!(fit_pcpca(&pair, 1, 0.2), Err(PcpcaError::InfeasibleGamma { .. })));
        assert!(fit_pcpca(&pair, 3, 0.0).is_err());
    }

    #[test]
    fn loadings_have_non_increasing_norms() {
        let pair = random_pair(2, 60, 50, 6);
        let model = fit_pcpca(&pair, 3, convert_gamma(0.5, 60, 50).unwrap()).unwrap();
        let norms: Vec<f64> = model.w().column_iter().map(|c| c.norm()).collect();
        assert!(norms.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn cpca_at_gamma_zero_is_pca() {
        let pair = random_pair(3, 50, 30, 5);
        let v = fit_cpca(&pair, 2, 0.0).unwrap();
        let svd = pair.foreground().values().clone().svd(false, true);
        let vt = svd.v_t.unwrap();
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let top = DMatrix::from_fn(5, 2, |i, j| vt[(order[j], i)]);
        assert!(v.distance(&Subspace::spanned_by(&top)) < 1e-8);
    }

    #[test]
    fn cpca_span_matches_pcpca_span() {
        for seed in 0..10 {
            let pair = random_pair(seed + 100, 50, 40, 6);
            for &gp in &[0.0, 0.3, 0.6, 0.9] {
                let g = convert_gamma(gp, 50, 40).unwrap();
                let Ok(model) = fit_pcpca(&pair, 2, g) else { continue };
                let v = fit_cpca(&pair, 2, gp).unwrap();
                assert!(v.distance(&Subspace::spanned_by(model.w())) <= 1e-6);
            }
        }
    }

    #[test]
    fn geometric_objective_grid_matches_top_eigenvector() {
        for seed in 0..5 {
            let pair = random_pair(seed + 7, 30, 25, 2);
            let gp = 0.8;
            let v = fit_cpca(&pair, 1, gp).unwrap();
            let x = pair.foreground().values();
            let y = pair.background().values();
            let resid = |data: &DMatrix<f64>, u: &DVector<f64>| -> f64 {
                data.row_iter()
                    .map(|r| {
                        let r = r.transpose();
                        (&r - u * u.dot(&r)).norm_squared()
                    })
                    .sum::<f64>()
                    / data.nrows() as f64
            };
            let steps = 100_000;
            let mut best = (f64::INFINITY, 0.0);
            for s in 0..steps {
                let t = std::f64::consts::PI * s as f64 / steps as f64;
                let u = DVector::from_row_slice(&[t.cos(), t.sin()]);
                let loss = resid(x, &u) - gp * resid(y, &u);
                if loss < best.0 {
                    best = (loss, t);
                }
            }
            let b = v.basis();
            let t_eig = b[(1, 0)].atan2(b[(0, 0)]).rem_euclid(std::f64::consts::PI);
            let diff = (t_eig - best.1).abs();
            let diff = diff.min(std::f64::consts::PI - diff);
            assert!(diff <= 1e-3, "angle gap {diff}");
        }
    }

    #[test]
    fn pca_objectives_agree_on_random_directions() {
        let pair = random_pair(9, 80, 10, 4);
        let x = pair.foreground().values();
        let top = fit_pca(pair.foreground(), 1).unwrap().basis().column(0).into_owned();
        let var = |u: &DVector<f64>| (x * u).norm_squared();
        let rec = |u: &DVector<f64>| {
            x.row_iter()
                .map(|r| {
                    let r = r.transpose();
                    (&r - u * u.dot(&r)).norm_squared()
                })
                .sum::<f64>()
        };
        let (v_top, r_top) = (var(&top), rec(&top));
        let mut r = rng(10);
        for _ in 0..100_000 {
            let u = crate::sampling::gaussian_vector(&mut r, 4).normalize();
            assert!(var(&u) <= v_top + 1e-9);
            assert!(rec(&u) >= r_top - 1e-9);
        }
    }

    #[test]
    fn standard_normal_at_origin() {
        let x = DataMatrix::from_centered(DMatrix::zeros(1, 3)).unwrap();
        let model = PcpcaModel::new(DMatrix::zeros(3, 1), 1.0, DVector::zeros(3), 0.0, 1, 0).unwrap();
        let pair = ContrastivePair::foreground_only(x.clone()).unwrap();
        let ll = relative_log_likelihood(&model, &pair, 0.0).unwrap();
        assert!((ll + 1.5 * LN_2PI).abs() < 1e-12);
        let ll2 = heldout_log_likelihood(
            &PcpcaModel::new(DMatrix::zeros(2, 1), 1.0, DVector::zeros(2), 0.0, 1, 0).unwrap(),
            &DataMatrix::from_centered(DMatrix::zeros(1, 2)).unwrap(),
        )
        .unwrap();
        assert!((ll2 + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((ll2 + 1.8379).abs() < 1e-4);
    }

    #[test]
    fn relative_likelihood_matches_density_sums() {
        for seed in 0..10 {
            let pair = random_pair(seed + 20, 15, 12, 4);
            let mut r = rng(seed);
            let w = gaussian_matrix(&mut r, 4, 2);
            let model = PcpcaModel::new(w.clone(), 0.7, DVector::zeros(4), 0.0, 15, 12).unwrap();
            let a = model.covariance();
            let fg = density_oracle(&a, pair.foreground().values());
            let bg = density_oracle(&a, pair.background().values());
            let ll0 = relative_log_likelihood(&model, &pair, 0.0).unwrap();
            assert!((ll0 - fg).abs() <= 1e-9 * fg.abs().max(1.0));
            let ll = relative_log_likelihood(&model, &pair, 0.6).unwrap();
            assert!((ll - (fg - 0.6 * bg)).abs() <= 1e-9 * fg.abs().max(1.0));
            let held = heldout_log_likelihood(&model, pair.foreground()).unwrap();
            assert!((held - ll0).abs() <= 1e-9 * fg.abs().max(1.0));
        }
    }

    #[test]
    fn closed_form_beats_local_perturbations() {
        let pair = random_pair(31, 50, 40, 6);
        let g = convert_gamma(0.5, 50, 40).unwrap();
        let model = fit_pcpca(&pair, 2, g).unwrap();
        let best = relative_log_likelihood(&model, &pair, g).unwrap();
        let mut r = rng(32);
        for _ in 0..100 {
            let e = gaussian_matrix(&mut r, 6, 2);
            let e = &e * (0.1 / e.norm());
            let pert = model.with_params(model.w() + e, model.sigma2()).unwrap();
            assert!(relative_log_likelihood(&pert, &pair, g).unwrap() <= best);
        }
    }

    #[test]
    fn likelihood_depends_on_w_only_through_wwt() {
        let pair = random_pair(40, 30, 30, 5);
        let g = 0.4;
        let mut r = rng(41);
        let w = gaussian_matrix(&mut r, 5, 3);
        let model = PcpcaModel::new(w.clone(), 0.9, DVector::zeros(5), g, 30, 30).unwrap();
        let base = relative_log_likelihood(&model, &pair, g).unwrap();
        let held = heldout_log_likelihood(&model, pair.foreground()).unwrap();
        for _ in 0..50 {
            let rot = random_orthogonal(&mut r, 3);
            let m2 = model.with_params(&w * rot, 0.9).unwrap();
            assert!((relative_log_likelihood(&m2, &pair, g).unwrap() - base).abs() <= 1e-8);
            assert!((heldout_log_likelihood(&m2, pair.foreground()).unwrap() - held).abs() <= 1e-8);
        }
    }

    #[test]
    fn posterior_mean_projection_hand_example() {
        let mut w = DMatrix::zeros(3, 1);
        w[(0, 0)] = 1.0;
        let model = PcpcaModel::new(w.clone(), 1.0, DVector::zeros(3), 0.0, 1, 0).unwrap();
        let x = DataMatrix::from_centered(DMatrix::from_row_slice(1, 3, &[2.0, 0.0, 0.0])).unwrap();
        let z = project(&model, &x, ProjectionMode::PosteriorMean).unwrap();
        assert!((z[(0, 0)] - 1.0).abs() < 1e-12);
        // σ² → 0⁺ with orthonormal W gives Wᵀ x
        let tiny = PcpcaModel::new(w, 1e-12, DVector::zeros(3), 0.0, 1, 0).unwrap();
        let z = project(&tiny, &x, ProjectionMode::PosteriorMean).unwrap();
        assert!((z[(0, 0)] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn orthonormal_projection_of_orthonormal_w() {
        let mut r = rng(5);
        let w = random_orthogonal(&mut r, 4).columns(0, 2).into_owned();
        let model = PcpcaModel::new(w.clone(), 0.3, DVector::zeros(4), 0.0, 1, 0).unwrap();
        let x = gaussian_matrix(&mut r, 6, 4);
        let z = project(&model, &DataMatrix::from_centered(x.clone()).unwrap(), ProjectionMode::Orthonormal).unwrap();
        assert!((z - &x * &w).amax() < 1e-12);
    }

    #[test]
    fn projection_rejects_dimension_mismatch() {
        let model = PcpcaModel::new(DMatrix::zeros(3, 1), 1.0, DVector::zeros(3), 0.0, 1, 0).unwrap();
        let x = DataMatrix::from_centered(DMatrix::zeros(2, 4)).unwrap();
        assert!(project(&model, &x, ProjectionMode::PosteriorMean).is_err());
        assert!(heldout_log_likelihood(&model, &x).is_err());
    }

    #[test]
    fn zero_latent_generates_the_mean() {
        let mean = DVector::from_row_slice(&[1.0, -2.0, 3.0]);
        let model = PcpcaModel::new(DMatrix::from_element(3, 2, 0.5), 1.0, mean.clone(), 0.0, 1, 0).unwrap();
        let x = generate_from_latents(&model, &DMatrix::zeros(1, 2), None).unwrap();
        assert_eq!(x.values().row(0).transpose(), mean);
    }

    #[test]
    fn generated_covariance_matches_model() {
        let mut r = rng(77);
        let w = gaussian_matrix(&mut r, 4, 2);
        let model = PcpcaModel::new(w.clone(), 0.5, DVector::from_element(4, 2.0), 0.0, 1, 0).unwrap();
        for add_noise in [false, true] {
            let mut g = rand_chacha::ChaCha8Rng::seed_from_u64(if add_noise { 1 } else { 2 });
            let x = generate(&model, 100_000, &mut g, add_noise).unwrap();
            let c = x.center().unwrap();
            let cov = c.values().transpose() * c.values() / 100_000.0;
            let target = if add_noise { model.covariance() } else { &w * w.transpose() };
            let rel = (&cov - &target).norm() / target.norm();
            assert!(rel < 0.05, "relative covariance error {rel}");
            assert!((c.feature_mean() - model.feature_mean()).amax() < 0.05);
        }
    }

    #[test]
    fn gamma_conversion() {
        assert_eq!(convert_gamma(0.5, 200, 100).unwrap(), 1.0);
        assert_eq!(convert_gamma(0.3, 50, 50).unwrap(), 0.3);
        assert_eq!(gamma_prime_from_raw(1.0, 200, 100).unwrap(), 0.5);
        assert!(convert_gamma(-0.1, 1, 1).is_err());
        for &(n, m) in &[(10, 7), (3, 30), (100, 100)] {
            for &gp in &[0.0, 0.5, 0.999, 1.0, 1.2] {
                let g = convert_gamma(gp, n, m).unwrap();
                assert_eq!(gp < 1.0, g < n as f64 / m as f64);
            }
        }
    }

    #[test]
    fn model_file_round_trip() {
        let pair = random_pair(50, 20, 20, 4);
        let model = fit_pcpca(&pair, 2, 0.3).unwrap();
        let file = ModelFile::from_model(&model, ProjectionMode::PosteriorMean);
        let text = serde_json::to_string(&file).unwrap();
        assert!(text.contains("\"version\":\"pcpca-model/1\""));
        assert!(text.contains("\"W\":"));
        let back: ModelFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_model().unwrap(), model);
    }
}
