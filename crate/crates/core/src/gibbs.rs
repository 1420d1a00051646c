//! Generalized-Bayes layer: empirical and population risks for CPCA and
//! PCPCA, the Gibbs posterior, an adaptive random-walk Metropolis sampler
//! and the divergence-based contraction statistic.
//!
//! Empirical risks keep the 1/(n+m) normalization and all constants, so
//! −(n+m) R_n equals the relative log-likelihood exactly. The Gibbs
//! log-density is −w (n+m) R_n(θ) on the prior support.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::ContrastivePair;
use crate::error::{PcpcaError, Result};
use crate::estimators::{fit_cpca, fit_from_scatter, relative_log_likelihood_scatter};
use crate::linalg::{chol_log_det, cholesky, model_covariance, orthonormalize, LN_2PI};
use crate::spectral::{differential_covariance, eig_desc, scatter, Scaling, SymMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cpca,
    Pcpca,
}

/// A point in parameter space: a PCPCA (W, σ²) or a CPCA subspace basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Theta {
    Pcpca {
        #[serde(with = "row_major")]
        w: DMatrix<f64>,
        sigma2: f64,
    },
    Cpca {
        #[serde(with = "row_major")]
        basis: DMatrix<f64>,
    },
}

impl Theta {
    pub fn kind(&self) -> ModelKind {
        match self {
            Theta::Pcpca { .. } => ModelKind::Pcpca,
            Theta::Cpca { .. } => ModelKind::Cpca,
        }
    }

    /// The loading matrix W or the basis V.
    pub fn loadings(&self) -> &DMatrix<f64> {
        match self {
            Theta::Pcpca { w, .. } => w,
            Theta::Cpca { basis } => basis,
        }
    }
}

fn check_orthonormal(v: &DMatrix<f64>) -> Result<()> {
    let d = v.ncols();
    let err = (v.transpose() * v - DMatrix::identity(d, d)).amax();
    if err > crate::estimators::ORTHONORMAL_TOL {
        return Err(PcpcaError::arg(format!("V is not orthonormal (max deviation {err:.3e})")));
    }
    Ok(())
}

/// (1/(n+m)) [Σ‖x − VVᵀx‖² − γ Σ‖y − VVᵀy‖²].
pub fn empirical_risk_cpca(v: &DMatrix<f64>, pair: &ContrastivePair, gamma: f64) -> Result<f64> {
    check_orthonormal(v)?;
    if v.nrows() != pair.dim() {
        return Err(PcpcaError::arg("basis and data dimensions differ"));
    }
    let c = differential_covariance(pair, gamma, Scaling::Sums)?;
    Ok(cpca_risk_from(v, c.as_matrix()) / (pair.n() + pair.m()) as f64)
}

/// tr(C) − tr(VᵀCV).
fn cpca_risk_from(v: &DMatrix<f64>, c: &DMatrix<f64>) -> f64 {
    c.trace() - (v.transpose() * c * v).trace()
}

/// −relative_log_likelihood / (n+m).
pub fn empirical_risk_pcpca(w: &DMatrix<f64>, sigma2: f64, pair: &ContrastivePair, gamma: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(PcpcaError::arg(format!("sigma2 must be positive, got {sigma2}")));
    }
    if w.nrows() != pair.dim() {
        return Err(PcpcaError::arg("W and data dimensions differ"));
    }
    let c = differential_covariance(pair, gamma, Scaling::Sums)?;
    let ll = relative_log_likelihood_scatter(w, sigma2, &c, pair.n(), pair.m(), gamma)?;
    Ok(-ll / (pair.n() + pair.m()) as f64)
}

/// P = β P_F + (1−β) P_B with zero-mean components of covariance C_F, C_B.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationMixture {
    beta: f64,
    c_f: DMatrix<f64>,
    c_b: DMatrix<f64>,
    gamma: f64,
}

impl PopulationMixture {
    /// β = 1 is accepted as the single-population limit.
    pub fn new(beta: f64, c_f: DMatrix<f64>, c_b: DMatrix<f64>, gamma: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(PcpcaError::arg(format!("beta must lie in (0, 1], got {beta}")));
        }
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(PcpcaError::arg("gamma must be finite and non-negative"));
        }
        if c_f.shape() != c_b.shape() || !c_f.is_square() {
            return Err(PcpcaError::arg("C_F and C_B must be square and of equal size"));
        }
        for (name, c) in [("C_F", &c_f), ("C_B", &c_b)] {
            let s = SymMatrix::new(c.clone())?;
            let spec = eig_desc(&s)?;
            let scale = spec.values().amax().max(1.0);
            if spec.values().iter().any(|&v| v < -1e-10 * scale) {
                return Err(PcpcaError::arg(format!("{name} is not positive semi-definite")));
            }
        }
        let sym = |c: DMatrix<f64>| (&c + c.transpose()) * 0.5;
        Ok(PopulationMixture {
            beta,
            c_f: sym(c_f),
            c_b: sym(c_b),
            gamma,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn dim(&self) -> usize {
        self.c_f.nrows()
    }

    pub fn c_f(&self) -> &DMatrix<f64> {
        &self.c_f
    }

    pub fn c_b(&self) -> &DMatrix<f64> {
        &self.c_b
    }

    /// κ = β − (1−β)γ.
    pub fn kappa(&self) -> f64 {
        self.beta - (1.0 - self.beta) * self.gamma
    }

    /// C = β C_F − (1−β) γ C_B.
    pub fn contrast(&self) -> DMatrix<f64> {
        &self.c_f * self.beta - &self.c_b * ((1.0 - self.beta) * self.gamma)
    }
}

/// κ/2 (D ln 2π + ln|A|) + ½ tr(A⁻¹C).
pub fn population_risk_pcpca(w: &DMatrix<f64>, sigma2: f64, mix: &PopulationMixture) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(PcpcaError::arg("sigma2 must be positive"));
    }
    let a = model_covariance(w, sigma2);
    let chol = cholesky(&a)?;
    let dim = mix.dim() as f64;
    Ok(0.5 * mix.kappa() * (dim * LN_2PI + chol_log_det(&chol)) + 0.5 * chol.solve(&mix.contrast()).trace())
}

/// tr(C) − tr(VᵀCV).
pub fn population_risk_cpca(v: &DMatrix<f64>, mix: &PopulationMixture) -> Result<f64> {
    check_orthonormal(v)?;
    Ok(cpca_risk_from(v, &mix.contrast()))
}

pub fn population_risk(theta: &Theta, mix: &PopulationMixture) -> Result<f64> {
    match theta {
        Theta::Pcpca { w, sigma2 } => population_risk_pcpca(w, *sigma2, mix),
        Theta::Cpca { basis } => population_risk_cpca(basis, mix),
    }
}

/// Minimizer of the PCPCA population risk:
/// σ*² = Σ_{i>d} λ_i / (κ (D−d)), W* = U_d (Λ_d/κ − σ*² I)^{1/2}.
pub fn population_minimizer(mix: &PopulationMixture, d: usize) -> Result<(DMatrix<f64>, f64)> {
    let kappa = mix.kappa();
    if !(kappa > 0.0) {
        return Err(PcpcaError::InfeasibleGamma {
            gamma: mix.gamma(),
            constraint: format!("beta - (1-beta)*gamma must be positive, got {kappa}"),
        });
    }
    // Scaling C by 1/κ turns the population problem into the sums-mode fit
    // with n − γm = 1.
    let c = SymMatrix::new(mix.contrast() / kappa)?;
    let model = fit_from_scatter(&c, 1, 0, d, 0.0, nalgebra::DVector::zeros(mix.dim()))?;
    Ok((model.w().clone(), model.sigma2()))
}

/// Top-d eigenvectors of C.
pub fn population_minimizer_cpca(mix: &PopulationMixture, d: usize) -> Result<DMatrix<f64>> {
    let dim = mix.dim();
    if d == 0 || d > dim {
        return Err(PcpcaError::arg(format!("d = {d} outside 1..={dim}")));
    }
    Ok(eig_desc(&SymMatrix::new(mix.contrast())?)?.leading_vectors(d))
}

/// d(θ; θ*) = √max(R(θ) − R(θ*), 0).
pub fn risk_divergence(theta: &Theta, theta_star: &Theta, mix: &PopulationMixture) -> Result<f64> {
    if theta.kind() != theta_star.kind() {
        return Err(PcpcaError::arg("parameter kinds differ"));
    }
    let gap = population_risk(theta, mix)? - population_risk(theta_star, mix)?;
    Ok(gap.max(0.0).sqrt())
}

/// Uniform prior support: |W_ij| ≤ w_max and σ² ∈ [sigma2_min, sigma2_max].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorBox {
    pub w_max: f64,
    pub sigma2_min: f64,
    pub sigma2_max: f64,
}

impl PriorBox {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_max > 0.0) || !(self.sigma2_min > 0.0) || !(self.sigma2_max > self.sigma2_min) {
            return Err(PcpcaError::Config(
                "prior box needs w_max > 0 and 0 < sigma2_min < sigma2_max".into(),
            ));
        }
        Ok(())
    }

    pub fn contains(&self, w: &DMatrix<f64>, sigma2: f64) -> bool {
        w.iter().all(|v| v.abs() <= self.w_max) && sigma2 >= self.sigma2_min && sigma2 <= self.sigma2_max
    }

    /// |W_ij| ≤ 10 √(λ₁(Σxxᵀ)/n), σ² ∈ [1e-4, 10 tr(Σxxᵀ)/(nD)].
    pub fn default_for(pair: &ContrastivePair) -> Result<Self> {
        let sx = scatter(pair.foreground())?;
        let n = pair.n() as f64;
        let lambda1 = eig_desc(&sx)?.values()[0].max(0.0);
        let tr = sx.trace();
        let b = PriorBox {
            w_max: 10.0 * (lambda1 / n).sqrt(),
            sigma2_min: 1e-4,
            sigma2_max: 10.0 * tr / (n * pair.dim() as f64),
        };
        b.validate()?;
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GibbsConfig {
    /// Tempering w of the Gibbs posterior.
    pub learning_rate_w: f64,
    /// Total iterations including burn-in.
    pub n_samples: usize,
    pub burn_in: usize,
    pub thinning: usize,
    /// Initial random-walk step, relative to each coordinate's scale.
    pub proposal_scale: f64,
    pub target_accept: f64,
    /// `None` selects [`PriorBox::default_for`].
    pub prior_box: Option<PriorBox>,
    pub seed: u64,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            learning_rate_w: 1.0,
            n_samples: 5000,
            burn_in: 1000,
            thinning: 1,
            proposal_scale: 0.1,
            target_accept: 0.3,
            prior_box: None,
            seed: 0,
        }
    }
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate_w > 0.0) {
            return Err(PcpcaError::Config("learning_rate_w must be positive".into()));
        }
        if self.burn_in >= self.n_samples {
            return Err(PcpcaError::Config("burn_in must be smaller than n_samples".into()));
        }
        if self.thinning == 0 {
            return Err(PcpcaError::Config("thinning must be at least 1".into()));
        }
        if !(self.proposal_scale > 0.0) {
            return Err(PcpcaError::Config("proposal_scale must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(PcpcaError::Config("target_accept must lie in (0, 1)".into()));
        }
        if let Some(b) = &self.prior_box {
            b.validate()?;
        }
        Ok(())
    }

    /// Retained draws: ⌈(n_samples − burn_in) / thinning⌉.
    pub fn retained(&self) -> usize {
        (self.n_samples - self.burn_in).div_ceil(self.thinning)
    }
}

/// A log-density over flat parameter vectors, for [`metropolis`].
pub trait Target {
    /// Unnormalized log-density; −∞ outside the support.
    fn log_density(&self, theta: &[f64]) -> f64;

    /// Maps a perturbed vector back onto the parameter space.
    fn retract(&self, theta: Vec<f64>) -> Vec<f64> {
        theta
    }

    /// Whether per-coordinate proposal scales should be learned.
    fn adapt_per_coordinate(&self) -> bool {
        true
    }
}

/// Raw output of [`metropolis`].
#[derive(Debug, Clone, PartialEq)]
pub struct MetropolisRun {
    pub draws: Vec<Vec<f64>>,
    pub log_densities: Vec<f64>,
    pub acceptance_rate: f64,
    pub burn_in_acceptance: f64,
    pub final_step: f64,
}

/// Random-walk Metropolis with Robbins–Monro adaptation of the global step
/// and, when the target allows it, per-coordinate scales from running
/// variances. Adaptation stops at the end of burn-in so the retained chain
/// is a fixed-kernel Markov chain.
pub fn metropolis<T: Target + ?Sized>(
    target: &T,
    init: Vec<f64>,
    base_scales: &[f64],
    config: &GibbsConfig,
) -> Result<MetropolisRun> {
    config.validate()?;
    let k = init.len();
    if base_scales.len() != k {
        return Err(PcpcaError::arg("one base scale per coordinate is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut theta = init;
    let mut logp = target.log_density(&theta);
    if !logp.is_finite() {
        return Err(PcpcaError::arg("initial state lies outside the target's support"));
    }
    let mut log_step = config.proposal_scale.ln();
    let mut scales = base_scales.to_vec();
    let (mut mean, mut m2) = (theta.clone(), vec![0.0; k]);
    let mut adapt_count = 0usize;

    let mut draws = Vec::with_capacity(config.retained());
    let mut log_densities = Vec::with_capacity(config.retained());
    let (mut acc_burn, mut acc_main) = (0usize, 0usize);

    for t in 0..config.n_samples {
        let step = log_step.exp();
        let proposal: Vec<f64> = theta
            .iter()
            .zip(&scales)
            .map(|(&v, &s)| v + step * s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let proposal = target.retract(proposal);
        let logq = target.log_density(&proposal);
        let log_ratio = logq - logp;
        let accept = logq.is_finite() && (log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio);
        if accept {
            theta = proposal;
            logp = logq;
        }

        if t < config.burn_in {
            if accept {
                acc_burn += 1;
            }
            let a = if accept { 1.0 } else { 0.0 };
            log_step += (a - config.target_accept) / ((t + 1) as f64).powf(0.6);
            if target.adapt_per_coordinate() {
                adapt_count += 1;
                for j in 0..k {
                    let delta = theta[j] - mean[j];
                    mean[j] += delta / adapt_count as f64;
                    m2[j] += delta * (theta[j] - mean[j]);
                }
                // switch to empirical scales once a few hundred states are in
                if adapt_count >= 200 && (t + 1) % 100 == 0 {
                    for j in 0..k {
                        let sd = (m2[j] / (adapt_count - 1) as f64).sqrt();
                        if sd > 0.0 {
                            scales[j] = sd.max(1e-6 * base_scales[j]);
                        }
                    }
                }
            }
        } else {
            if accept {
                acc_main += 1;
            }
            if (t - config.burn_in).is_multiple_of(config.thinning) {
                draws.push(theta.clone());
                log_densities.push(logp);
            }
        }
    }

    if config.burn_in > 0 && acc_burn == 0 {
        return Err(PcpcaError::SamplerStuck(format!(
            "no proposal accepted during {} burn-in iterations (final step {:.3e})",
            config.burn_in,
            log_step.exp()
        )));
    }
    let main = config.n_samples - config.burn_in;
    Ok(MetropolisRun {
        draws,
        log_densities,
        acceptance_rate: acc_main as f64 / main as f64,
        burn_in_acceptance: if config.burn_in > 0 {
            acc_burn as f64 / config.burn_in as f64
        } else {
            0.0
        },
        final_step: log_step.exp(),
    })
}

/// Gibbs posterior for PCPCA over (vec W, σ²), column-major W then σ².
struct PcpcaTarget {
    c: SymMatrix,
    n: usize,
    m: usize,
    gamma: f64,
    dim: usize,
    d: usize,
    w_rate: f64,
    prior: PriorBox,
}

/// The last coordinate is u = ln σ²; the density carries the Jacobian e^u so
/// that σ² keeps its uniform prior.
impl PcpcaTarget {
    fn unpack(&self, theta: &[f64]) -> (DMatrix<f64>, f64) {
        let w = DMatrix::from_column_slice(self.dim, self.d, &theta[..self.dim * self.d]);
        (w, theta[self.dim * self.d].exp())
    }
}

impl Target for PcpcaTarget {
    fn log_density(&self, theta: &[f64]) -> f64 {
        let (w, s2) = self.unpack(theta);
        if !self.prior.contains(&w, s2) {
            return f64::NEG_INFINITY;
        }
        match relative_log_likelihood_scatter(&w, s2, &self.c, self.n, self.m, self.gamma) {
            Ok(ll) => self.w_rate * ll + theta[self.dim * self.d],
            Err(_) => f64::NEG_INFINITY,
        }
    }
}

/// Gibbs posterior for CPCA over orthonormal bases (column-major).
struct CpcaTarget {
    c: DMatrix<f64>,
    dim: usize,
    d: usize,
    w_rate: f64,
}

impl Target for CpcaTarget {
    fn log_density(&self, theta: &[f64]) -> f64 {
        let v = DMatrix::from_column_slice(self.dim, self.d, theta);
        // (n+m) R_n(V) = tr(C) − tr(VᵀCV) for sums-mode C
        -self.w_rate * cpca_risk_from(&v, &self.c)
    }

    fn retract(&self, theta: Vec<f64>) -> Vec<f64> {
        let v = DMatrix::from_column_slice(self.dim, self.d, &theta);
        orthonormalize(&v).as_slice().to_vec()
    }

    fn adapt_per_coordinate(&self) -> bool {
        false
    }
}

pub const CHAIN_VERSION: &str = "pcpca-chain/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsChain {
    pub version: String,
    pub kind: ModelKind,
    pub d: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub gamma: f64,
    pub n: usize,
    pub m: usize,
    pub states: Vec<Theta>,
    pub log_densities: Vec<f64>,
    pub acceptance_rate: f64,
    pub burn_in_acceptance: f64,
    pub final_step: f64,
    pub prior_box: Option<PriorBox>,
    pub config: GibbsConfig,
}

impl GibbsChain {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Highest log-density state.
    pub fn mode(&self) -> Option<&Theta> {
        self.log_densities
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| &self.states[i])
    }
}

/// Draws from the Gibbs posterior ∝ exp(−w (n+m) R_n(θ)) Π(θ).
///
/// PCPCA chains start at the closed-form estimate when it exists and lies
/// in the prior box, otherwise at the box center; CPCA chains start at the
/// CPCA subspace.
pub fn sample_gibbs(
    pair: &ContrastivePair,
    d: usize,
    gamma: f64,
    kind: ModelKind,
    config: &GibbsConfig,
) -> Result<GibbsChain> {
    config.validate()?;
    let dim = pair.dim();
    if d == 0 || d >= dim {
        return Err(PcpcaError::arg(format!("d = {d} must satisfy 1 <= d < D = {dim}")));
    }
    if !pair.is_fully_observed() {
        return Err(PcpcaError::arg("the Gibbs sampler needs fully observed data"));
    }
    let c = differential_covariance(pair, gamma, Scaling::Sums)?;
    let (n, m) = (pair.n(), pair.m());

    let (run, prior) = match kind {
        ModelKind::Pcpca => {
            let prior = match config.prior_box {
                Some(b) => b,
                None => PriorBox::default_for(pair)?,
            };
            let mle = fit_from_scatter(&c, n, m, d, gamma, pair.foreground().feature_mean().clone());
            let init = match &mle {
                Ok(model) if prior.contains(model.w(), model.sigma2()) => {
                    let mut v = model.w().as_slice().to_vec();
                    v.push(model.sigma2().ln());
                    v
                }
                other => {
                    match other {
                        Ok(_) => log::warn!("closed-form estimate lies outside the prior box"),
                        Err(e) => log::warn!("no closed-form estimate to start from: {e}"),
                    }
                    let mut v = vec![0.0; dim * d];
                    v.push((prior.sigma2_min * prior.sigma2_max).sqrt().ln());
                    v
                }
            };
            let mut base = vec![prior.w_max / 10.0; dim * d];
            base.push(0.1 * (prior.sigma2_max / prior.sigma2_min).ln());
            let target = PcpcaTarget {
                c,
                n,
                m,
                gamma,
                dim,
                d,
                w_rate: config.learning_rate_w,
                prior,
            };
            (metropolis(&target, init, &base, config)?, Some(prior))
        }
        ModelKind::Cpca => {
            let gamma_prime = if m == 0 { 0.0 } else { gamma * m as f64 / n as f64 };
            let init = fit_cpca(pair, d, gamma_prime)?.basis().as_slice().to_vec();
            let target = CpcaTarget {
                c: c.into_matrix(),
                dim,
                d,
                w_rate: config.learning_rate_w,
            };
            let base = vec![1.0; dim * d];
            (metropolis(&target, init, &base, config)?, None)
        }
    };

    let mut log_densities = run.log_densities;
    if kind == ModelKind::Pcpca {
        for (lp, v) in log_densities.iter_mut().zip(&run.draws) {
            *lp -= v[dim * d];
        }
    }
    let states = run
        .draws
        .iter()
        .map(|v| match kind {
            ModelKind::Pcpca => Theta::Pcpca {
                w: DMatrix::from_column_slice(dim, d, &v[..dim * d]),
                sigma2: v[dim * d].exp(),
            },
            ModelKind::Cpca => Theta::Cpca {
                basis: DMatrix::from_column_slice(dim, d, v),
            },
        })
        .collect();
    Ok(GibbsChain {
        version: CHAIN_VERSION.to_string(),
        kind,
        d,
        dim,
        gamma,
        n,
        m,
        states,
        log_densities,
        acceptance_rate: run.acceptance_rate,
        burn_in_acceptance: run.burn_in_acceptance,
        final_step: run.final_step,
        prior_box: prior,
        config: config.clone(),
    })
}

/// Gibbs log-density −w (n+m) R_n(θ) of a state inside the prior support.
pub fn gibbs_log_density(theta: &Theta, pair: &ContrastivePair, gamma: f64, w_rate: f64) -> Result<f64> {
    let total = (pair.n() + pair.m()) as f64;
    let risk = match theta {
        Theta::Pcpca { w, sigma2 } => empirical_risk_pcpca(w, *sigma2, pair, gamma)?,
        Theta::Cpca { basis } => empirical_risk_cpca(basis, pair, gamma)?,
    };
    Ok(-w_rate * total * risk)
}

/// D̂ = (1/T) Σ_t 𝟙[d(θ_t, θ*) > c n^{−1/2}].
pub fn contraction_stat(
    chain: &GibbsChain,
    theta_star: &Theta,
    mix: &PopulationMixture,
    n_total: usize,
    c_const: f64,
) -> Result<f64> {
    if chain.is_empty() {
        return Err(PcpcaError::arg("chain is empty"));
    }
    let divs = chain
        .states
        .iter()
        .map(|s| risk_divergence(s, theta_star, mix))
        .collect::<Result<Vec<f64>>>()?;
    Ok(exceedance_fraction(&divs, n_total, c_const))
}

/// Fraction of divergences above c n^{−1/2}.
pub fn exceedance_fraction(divergences: &[f64], n_total: usize, c_const: f64) -> f64 {
    let threshold = c_const / (n_total as f64).sqrt();
    divergences.iter().filter(|&&v| v > threshold).count() as f64 / divergences.len() as f64
}

mod row_major {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(serde::de::Error::custom("ragged matrix"));
        }
        Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
    }
}
