//! Differential covariance matrices, descending symmetric eigendecomposition
//! and the bounds on the contrast weight γ that keep CPCA/PCPCA well defined.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::{ContrastivePair, DataMatrix};
use crate::error::{PcpcaError, Result};

/// How the two scatter matrices are normalized before differencing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    /// Σ x xᵀ − γ Σ y yᵀ (the closed-form estimator's convention).
    #[default]
    Sums,
    /// C_X − γ C_Y with C_X = (1/n) Σ x xᵀ.
    Means,
}

/// A symmetric D × D matrix; symmetrized as (A + Aᵀ)/2 on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(PcpcaError::arg(format!(
                "matrix of shape {:?} is not square",
                a.shape()
            )));
        }
        let sym = (&a + a.transpose()) * 0.5;
        Ok(SymMatrix(sym))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

/// Eigenvalues in descending order with matching orthonormal eigenvectors
/// stored as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    values: DVector<f64>,
    vectors: DMatrix<f64>,
}

impl Spectrum {
    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// First `d` eigenvectors (U_d).
    pub fn leading_vectors(&self, d: usize) -> DMatrix<f64> {
        self.vectors.columns(0, d).into_owned()
    }

    /// Σ_{i>d} λ_i.
    pub fn tail_sum(&self, d: usize) -> f64 {
        self.values.iter().skip(d).sum()
    }
}

pub fn eig_desc(a: &SymMatrix) -> Result<Spectrum> {
    if a.0.iter().any(|v| !v.is_finite()) {
        return Err(PcpcaError::Numeric(
            "eigendecomposition input has non-finite entries".into(),
        ));
    }
    let eig = SymmetricEigen::new(a.0.clone());
    let mut order: Vec<usize> = (0..a.dim()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = eig.eigenvectors.select_columns(&order);
    Ok(Spectrum { values, vectors })
}

/// Σ_i x_i x_iᵀ over the rows of centered data.
///
/// With missing cells each entry is an available-case sum over samples
/// observing both features, rescaled by n / (number of such samples).
pub fn scatter(data: &DataMatrix) -> Result<SymMatrix> {
    if !data.is_centered() {
        return Err(PcpcaError::NotCentered);
    }
    if data.is_fully_observed() {
        let x = data.values();
        return SymMatrix::new(x.transpose() * x);
    }
    let (n, d) = (data.n_samples(), data.n_features());
    let mut s = DMatrix::zeros(d, d);
    for k in 0..d {
        for l in k..d {
            let mut sum = 0.0;
            let mut count = 0usize;
            for i in 0..n {
                if data.is_observed(i, k) && data.is_observed(i, l) {
                    sum += data.values()[(i, k)] * data.values()[(i, l)];
                    count += 1;
                }
            }
            let v = if count == 0 { 0.0 } else { sum * n as f64 / count as f64 };
            s[(k, l)] = v;
            s[(l, k)] = v;
        }
    }
    SymMatrix::new(s)
}

pub fn differential_covariance(
    pair: &ContrastivePair,
    gamma: f64,
    scaling: Scaling,
) -> Result<SymMatrix> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(PcpcaError::arg(format!("gamma must be a finite non-negative number, got {gamma}")));
    }
    if !pair.is_centered() {
        return Err(PcpcaError::NotCentered);
    }
    let sx = scatter(pair.foreground())?.into_matrix();
    let c = if pair.m() == 0 {
        match scaling {
            Scaling::Sums => sx,
            Scaling::Means => sx / pair.n() as f64,
        }
    } else {
        let sy = scatter(pair.background())?.into_matrix();
        match scaling {
            Scaling::Sums => sx - sy * gamma,
            Scaling::Means => sx / pair.n() as f64 - sy * (gamma / pair.m() as f64),
        }
    };
    SymMatrix::new(c)
}

/// Ratio with the conventions 0/0 = 0 and x/0 = +∞ for x > 0.
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// Eigenvalues of a PSD matrix with float noise below zero clamped away.
fn psd_values(s: &Spectrum, what: &str) -> Result<Vec<f64>> {
    let scale = s.values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    s.values
        .iter()
        .map(|&v| {
            if v < -1e-10 * scale {
                Err(PcpcaError::arg(format!(
                    "{what} has negative eigenvalue {v}; covariances must be PSD"
                )))
            } else {
                Ok(v.max(0.0))
            }
        })
        .collect()
}

/// γ below which C_X − γ C_Y is positive definite: μ_D / ρ_1.
pub fn gamma_pd_bound(mu: &Spectrum, rho: &Spectrum) -> Result<f64> {
    let mu = psd_values(mu, "foreground covariance")?;
    let rho = psd_values(rho, "background covariance")?;
    if mu.len() != rho.len() {
        return Err(PcpcaError::arg("spectra have different dimensions"));
    }
    if rho[0] == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(ratio(*mu.last().expect("nonempty"), rho[0]))
}

/// γ below which the first `d` eigenvalues of C_X − γ C_Y are positive:
/// max_k μ_{d+k} / ρ_{1+k} for k = 0..D−d.
pub fn gamma_rank_d_bound(mu: &Spectrum, rho: &Spectrum, d: usize) -> Result<f64> {
    let mu = psd_values(mu, "foreground covariance")?;
    let rho = psd_values(rho, "background covariance")?;
    let dim = mu.len();
    if rho.len() != dim {
        return Err(PcpcaError::arg("spectra have different dimensions"));
    }
    if d == 0 || d > dim {
        return Err(PcpcaError::arg(format!("d = {d} outside 1..={dim}")));
    }
    if rho[0] == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((0..=dim - d)
        .map(|k| ratio(mu[d - 1 + k], rho[k]))
        .fold(0.0, f64::max))
}

/// All γ bounds for a pair, in raw (sums-mode) γ units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaReport {
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub scaling: Scaling,
    #[serde(with = "extended_f64")]
    pub pd_bound: f64,
    #[serde(with = "extended_f64")]
    pub rank_d_bound: f64,
    pub mle_sample_bound: f64,
    pub mle_sufficient_bound: f64,
    pub mle_feasible_sup: f64,
}

impl GammaReport {
    /// Converts a raw-γ bound into γ′ = γ m / n units.
    pub fn in_gamma_prime(&self, gamma: f64) -> f64 {
        gamma * self.m as f64 / self.n as f64
    }
}

/// Relative bisection width for locating the feasibility supremum.
pub const FEASIBLE_SUP_REL_TOL: f64 = 1e-9;

pub fn gamma_mle_report(pair: &ContrastivePair, d: usize) -> Result<GammaReport> {
    if !pair.is_centered() {
        return Err(PcpcaError::NotCentered);
    }
    let dim = pair.dim();
    if d == 0 || d >= dim {
        return Err(PcpcaError::arg(format!(
            "d = {d} must satisfy 1 <= d < D = {dim} for the noise variance to be defined"
        )));
    }
    if pair.m() == 0 {
        return Err(PcpcaError::arg("gamma report needs a background"));
    }
    let (n, m) = (pair.n() as f64, pair.m() as f64);
    let sx = scatter(pair.foreground())?;
    let sy = scatter(pair.background())?;
    let mu = eig_desc(&sx)?;
    let rho = eig_desc(&sy)?;
    let pd_bound = gamma_pd_bound(&mu, &rho)?;
    let rank_d_bound = gamma_rank_d_bound(&mu, &rho, d)?;
    let mle_sample_bound = n / m;

    let mu_v = psd_values(&mu, "foreground covariance")?;
    let rho_v = psd_values(&rho, "background covariance")?;
    let tail_mu: f64 = mu_v.iter().skip(d).sum();
    let sufficient = ratio(tail_mu, (dim - d) as f64 * rho_v[0]);
    let mle_sufficient_bound = sufficient.min(mle_sample_bound);

    let tail_positive = |gamma: f64| -> Result<bool> {
        let c = SymMatrix::new(sx.as_matrix() - sy.as_matrix() * gamma)?;
        Ok(eig_desc(&c)?.tail_sum(d) > 0.0)
    };
    let mle_feasible_sup = if !tail_positive(0.0)? {
        0.0
    } else if tail_positive(mle_sample_bound)? {
        mle_sample_bound
    } else {
        let (mut lo, mut hi) = (0.0, mle_sample_bound);
        while hi - lo > FEASIBLE_SUP_REL_TOL * hi {
            let mid = 0.5 * (lo + hi);
            if tail_positive(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };

    Ok(GammaReport {
        d,
        n: pair.n(),
        m: pair.m(),
        scaling: Scaling::Sums,
        pd_bound,
        rank_d_bound,
        mle_sample_bound,
        mle_sufficient_bound,
        mle_feasible_sup,
    })
}

/// Serializes ±∞ as the strings "inf"/"-inf", which plain JSON numbers
/// cannot carry.
pub(crate) mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad number {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{gaussian_matrix, random_orthogonal, random_psd, random_symmetric, rng};

    fn diag_spectrum(v: &[f64]) -> Spectrum {
        eig_desc(&SymMatrix::new(DMatrix::from_diagonal(&DVector::from_row_slice(v))).unwrap()).unwrap()
    }

    fn centered_pair(x: &[Vec<f64>], y: &[Vec<f64>]) -> ContrastivePair {
        let to = |rows: &[Vec<f64>]| {
            DataMatrix::from_centered(DMatrix::from_fn(rows.len(), rows[0].len(), |i, k| rows[i][k])).unwrap()
        };
        ContrastivePair::new(to(x), to(y)).unwrap()
    }

    #[test]
    fn identity_spectrum() {
        let s = eig_desc(&SymMatrix::new(DMatrix::identity(3, 3)).unwrap()).unwrap();
        assert_eq!(s.values().as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_spectrum_is_sorted_descending() {
        let s = eig_desc(&SymMatrix::new(DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 2.0])).unwrap()).unwrap();
        assert_eq!(s.values().as_slice(), &[2.0, -1.0]);
        assert!((s.vectors()[(1, 0)].abs() - 1.0).abs() < 1e-12);
        assert!((s.vectors()[(0, 1)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_eigenproblem() {
        let s = eig_desc(&SymMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap()).unwrap();
        assert!((s.values()[0] - 3.0).abs() < 1e-12);
        assert!((s.values()[1] - 1.0).abs() < 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let v0 = s.vectors().column(0);
        let v1 = s.vectors().column(1);
        assert!((v0[0].abs() - h).abs() < 1e-12);
        assert!((v0[0] - v0[1]).abs() < 1e-12);
        assert!((v1[0] + v1[1]).abs() < 1e-12 && (v1[0].abs() - h).abs() < 1e-12);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let a = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[f64::NAN, 0.0, 0.0, 1.0])).unwrap();
        assert!(matches!(eig_desc(&a), Err(PcpcaError::Numeric(_))));
    }

    #[test]
    fn eig_desc_invariants_on_random_matrices() {
        let mut r = rng(11);
        for t in 0..1000 {
            let d = 1 + t % 12;
            let a = random_symmetric(&mut r, d);
            let s = eig_desc(&SymMatrix::new(a.clone()).unwrap()).unwrap();
            for w in s.values().as_slice().windows(2) {
                assert!(w[0] >= w[1]);
            }
            let u = s.vectors();
            assert!((u.transpose() * u - DMatrix::identity(d, d)).amax() <= 1e-8);
            let rec = u * DMatrix::from_diagonal(s.values()) * u.transpose();
            assert!((&a - rec).amax() <= 1e-7 * (1.0 + a.amax()));
        }
    }

    #[test]
    fn differential_covariance_gamma_zero_is_scatter() {
        let p = centered_pair(&[vec![1.0, 2.0], vec![-3.0, 0.5]], &[vec![4.0, 4.0]]);
        let c = differential_covariance(&p, 0.0, Scaling::Sums).unwrap();
        let x = p.foreground().values();
        assert_eq!(c.as_matrix(), &(x.transpose() * x));
    }

    #[test]
    fn differential_covariance_hand_example() {
        let p = centered_pair(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 1.0]]);
        let c = differential_covariance(&p, 0.5, Scaling::Sums).unwrap();
        assert_eq!(c.as_matrix(), &DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]));
    }

    #[test]
    fn sums_is_n_times_means_when_sizes_match() {
        let mut r = rng(5);
        for _ in 0..20 {
            let x = gaussian_matrix(&mut r, 7, 3);
            let y = gaussian_matrix(&mut r, 7, 3);
            let p = ContrastivePair::new(
                DataMatrix::from_centered(x).unwrap(),
                DataMatrix::from_centered(y).unwrap(),
            )
            .unwrap();
            let s = differential_covariance(&p, 0.7, Scaling::Sums).unwrap();
            let m = differential_covariance(&p, 0.7, Scaling::Means).unwrap();
            assert!((s.as_matrix() - m.as_matrix() * 7.0).amax() < 1e-12);
        }
    }

    #[test]
    fn uncentered_input_is_rejected() {
        let x = DataMatrix::new(DMatrix::from_element(2, 2, 1.0)).unwrap();
        let p = ContrastivePair::new(x.clone(), x).unwrap();
        assert!(matches!(
            differential_covariance(&p, 0.1, Scaling::Sums),
            Err(PcpcaError::NotCentered)
        ));
    }

    #[test]
    fn pd_bound_examples() {
        let mu = diag_spectrum(&[3.0, 2.0, 1.0]);
        let rho = diag_spectrum(&[2.0, 1.0, 0.5]);
        assert_eq!(gamma_pd_bound(&mu, &rho).unwrap(), 0.5);
        assert_eq!(gamma_pd_bound(&mu, &diag_spectrum(&[0.0, 0.0, 0.0])).unwrap(), f64::INFINITY);
        assert_eq!(gamma_pd_bound(&diag_spectrum(&[3.0, 2.0, 0.0]), &rho).unwrap(), 0.0);
        assert!(gamma_pd_bound(&diag_spectrum(&[3.0, 2.0, -1.0]), &rho).is_err());
    }

    #[test]
    fn rank_d_bound_examples() {
        let mu = diag_spectrum(&[3.0, 2.0, 1.0]);
        let rho = diag_spectrum(&[2.0, 1.0, 0.5]);
        assert_eq!(gamma_rank_d_bound(&mu, &rho, 1).unwrap(), 2.0);
        assert_eq!(gamma_rank_d_bound(&mu, &rho, 2).unwrap(), 1.0);
        assert_eq!(
            gamma_rank_d_bound(&mu, &rho, 3).unwrap(),
            gamma_pd_bound(&mu, &rho).unwrap()
        );
        assert!(gamma_rank_d_bound(&mu, &rho, 0).is_err());
        assert!(gamma_rank_d_bound(&mu, &rho, 4).is_err());
    }

    #[test]
    fn pd_bound_never_exceeds_rank_d_bound() {
        let mut r = rng(21);
        for t in 0..100 {
            let dim = 2 + t % 6;
            let mu = eig_desc(&SymMatrix::new(random_psd(&mut r, dim)).unwrap()).unwrap();
            let rho = eig_desc(&SymMatrix::new(random_psd(&mut r, dim)).unwrap()).unwrap();
            let pd = gamma_pd_bound(&mu, &rho).unwrap();
            for d in 1..dim {
                assert!(pd <= gamma_rank_d_bound(&mu, &rho, d).unwrap());
            }
        }
    }

    #[test]
    fn tightness_construction_breaks_pd_just_above_bound() {
        let mut r = rng(3);
        for _ in 0..20 {
            let dim = 4;
            let u = random_orthogonal(&mut r, dim);
            let mu = DVector::from_row_slice(&[4.0, 3.0, 2.0, 0.7]);
            let rho = DVector::from_row_slice(&[1.5, 1.0, 0.5, 0.2]);
            let cx = &u * DMatrix::from_diagonal(&mu) * u.transpose();
            // background's leading eigenvector is the foreground's last one
            let mut v = u.clone();
            v.swap_columns(0, dim - 1);
            let cy = &v * DMatrix::from_diagonal(&rho) * v.transpose();
            let smu = eig_desc(&SymMatrix::new(cx.clone()).unwrap()).unwrap();
            let srho = eig_desc(&SymMatrix::new(cy.clone()).unwrap()).unwrap();
            let bound = gamma_pd_bound(&smu, &srho).unwrap();
            assert!((bound - 0.7 / 1.5).abs() < 1e-12);
            let c = SymMatrix::new(&cx - &cy * (1.001 * bound)).unwrap();
            assert!(eig_desc(&c).unwrap().values()[dim - 1] < 0.0);
        }
    }

    #[test]
    fn extended_f64_round_trips_infinity() {
        let rep = GammaReport {
            d: 1,
            n: 2,
            m: 2,
            scaling: Scaling::Sums,
            pd_bound: f64::INFINITY,
            rank_d_bound: 2.0,
            mle_sample_bound: 1.0,
            mle_sufficient_bound: 1.0,
            mle_feasible_sup: 1.0,
        };
        let s = serde_json::to_string(&rep).unwrap();
        assert!(s.contains("\"pd_bound\":\"inf\""));
        let back: GammaReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, rep);
    }
}
