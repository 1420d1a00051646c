//! Simulators, the silhouette metric, noise injection, γ′ sweeps and the
//! experiment runner that turns an [`ExperimentSpec`] into a report.

use std::collections::BTreeMap;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_csv, ContrastivePair, CsvOptions, DataMatrix};
use crate::error::{PcpcaError, Result};
use crate::estimators::{
    convert_gamma, fit_cpca, fit_pcpca, fit_ppca, generate, heldout_log_likelihood, project, PcpcaModel,
    ProjectionMode,
};
use crate::gibbs::{
    contraction_stat, population_minimizer, sample_gibbs, GibbsConfig, ModelKind, PopulationMixture, Theta,
};
use crate::missing::{fit_missing, imputation_mse, impute_uncentered, OptimizerConfig};
use crate::sampling::{derive_seed, gaussian_matrix, mvn_rows, rng};
use crate::spectral::{eig_desc, SymMatrix};

fn to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PcpcaError::arg(format!("{what} has ragged rows")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() || (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(PcpcaError::arg(format!("{what} must be square and symmetric")));
    }
    let spec = eig_desc(&SymMatrix::new(m.clone())?)?;
    if spec.values().iter().any(|&v| v < -1e-10 * spec.values()[0].abs().max(1.0)) {
        return Err(PcpcaError::arg(format!("{what} is not positive semi-definite")));
    }
    Ok(())
}

/// Two-subgroup Gaussian mixture foreground and a Gaussian background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    /// Foreground share of the population mixture (used for population risks).
    pub beta: f64,
    /// Probability that a foreground sample belongs to subgroup 1.
    pub pi: f64,
    pub mu_f1: Vec<f64>,
    pub mu_f2: Vec<f64>,
    pub mu_b: Vec<f64>,
    pub sigma_f: Vec<Vec<f64>>,
    pub sigma_b: Vec<Vec<f64>>,
    pub n_fg: usize,
    pub n_bg: usize,
    pub seed: u64,
}

impl MixtureSpec {
    /// Two subgroups at ±(1, −1) sharing Σ = [[2.7, 2.6], [2.6, 2.7]] with the
    /// background, n = m = 200.
    pub fn toy() -> Self {
        let sigma = vec![vec![2.7, 2.6], vec![2.6, 2.7]];
        MixtureSpec {
            beta: 0.5,
            pi: 0.5,
            mu_f1: vec![1.0, -1.0],
            mu_f2: vec![-1.0, 1.0],
            mu_b: vec![0.0, 0.0],
            sigma_f: sigma.clone(),
            sigma_b: sigma,
            n_fg: 200,
            n_bg: 200,
            seed: 0,
        }
    }

    /// Subgroups at ±(−1.5, 1.5) with Σ_f = Σ_b = [[4, 2.6], [2.6, 4]] and
    /// β = π = 0.5; `n` samples per condition.
    pub fn posterior_toy(n: usize) -> Self {
        let sigma = vec![vec![4.0, 2.6], vec![2.6, 4.0]];
        MixtureSpec {
            beta: 0.5,
            pi: 0.5,
            mu_f1: vec![-1.5, 1.5],
            mu_f2: vec![1.5, -1.5],
            mu_b: vec![0.0, 0.0],
            sigma_f: sigma.clone(),
            sigma_b: sigma,
            n_fg: n,
            n_bg: n,
            seed: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu_f1.len()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_counts(mut self, n_fg: usize, n_bg: usize) -> Self {
        self.n_fg = n_fg;
        self.n_bg = n_bg;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if dim == 0 || self.mu_f2.len() != dim || self.mu_b.len() != dim {
            return Err(PcpcaError::arg("mean vectors must share a non-zero length"));
        }
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(PcpcaError::arg("pi must lie in [0, 1]"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(PcpcaError::arg("beta must lie in (0, 1]"));
        }
        if self.n_fg == 0 || self.n_bg == 0 {
            return Err(PcpcaError::arg("sample counts must be at least 1"));
        }
        for (m, what) in [(&self.sigma_f, "sigma_f"), (&self.sigma_b, "sigma_b")] {
            let m = to_matrix(m, what)?;
            if m.nrows() != dim {
                return Err(PcpcaError::arg(format!("{what} must be {dim} x {dim}")));
            }
            check_psd(&m, what)?;
        }
        Ok(())
    }

    /// Population second moments around each component's mean:
    /// C_F = Σ_f + π(1−π)(μ₁−μ₂)(μ₁−μ₂)ᵀ, C_B = Σ_b.
    pub fn population(&self, gamma: f64) -> Result<PopulationMixture> {
        self.validate()?;
        let diff = DVector::from_vec(self.mu_f1.clone()) - DVector::from_vec(self.mu_f2.clone());
        let c_f = to_matrix(&self.sigma_f, "sigma_f")? + &diff * diff.transpose() * (self.pi * (1.0 - self.pi));
        PopulationMixture::new(self.beta, c_f, to_matrix(&self.sigma_b, "sigma_b")?, gamma)
    }
}

/// Draws the raw (uncentered) pair and 1-based subgroup labels of the
/// foreground samples.
pub fn simulate_mixture(spec: &MixtureSpec) -> Result<(ContrastivePair, Vec<usize>)> {
    spec.validate()?;
    let mut r = rng(spec.seed);
    let sigma_f = to_matrix(&spec.sigma_f, "sigma_f")?;
    let sigma_b = to_matrix(&spec.sigma_b, "sigma_b")?;
    let labels: Vec<usize> = (0..spec.n_fg)
        .map(|_| if r.random::<f64>() < spec.pi { 1 } else { 2 })
        .collect();
    let noise = mvn_rows(&mut r, spec.n_fg, &DVector::zeros(spec.dim()), &sigma_f);
    let mu1 = DVector::from_vec(spec.mu_f1.clone());
    let mu2 = DVector::from_vec(spec.mu_f2.clone());
    let mut x = noise;
    for (i, &l) in labels.iter().enumerate() {
        let mu = if l == 1 { &mu1 } else { &mu2 };
        let mut row = x.row_mut(i);
        row += mu.transpose();
    }
    let y = mvn_rows(&mut r, spec.n_bg, &DVector::from_vec(spec.mu_b.clone()), &sigma_b);
    Ok((ContrastivePair::new(DataMatrix::new(x)?, DataMatrix::new(y)?)?, labels))
}

/// Foreground and background from separate PPCA models with standard
/// normal loadings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualPpcaSpec {
    pub n: usize,
    pub m: usize,
    /// Held-out foreground samples drawn from the same model.
    pub n_test: usize,
    pub dim: usize,
    pub d: usize,
    pub sigma2: f64,
    pub seed: u64,
}

impl Default for DualPpcaSpec {
    fn default() -> Self {
        DualPpcaSpec {
            n: 100,
            m: 100,
            n_test: 100,
            dim: 10,
            d: 2,
            sigma2: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DualPpcaSample {
    pub pair: ContrastivePair,
    pub test: DataMatrix,
    pub w_f: DMatrix<f64>,
    pub w_b: DMatrix<f64>,
}

pub fn simulate_dual_ppca(spec: &DualPpcaSpec) -> Result<DualPpcaSample> {
    if spec.n == 0 || spec.m == 0 || spec.d == 0 || spec.d > spec.dim || !(spec.sigma2 >= 0.0) {
        return Err(PcpcaError::arg("invalid dual PPCA specification"));
    }
    let mut r = rng(spec.seed);
    let w_f = gaussian_matrix(&mut r, spec.dim, spec.d);
    let w_b = gaussian_matrix(&mut r, spec.dim, spec.d);
    let s = spec.sigma2.sqrt();
    let mut draw = |w: &DMatrix<f64>, count: usize| {
        gaussian_matrix(&mut r, count, spec.d) * w.transpose() + gaussian_matrix(&mut r, count, spec.dim) * s
    };
    let x = draw(&w_f, spec.n);
    let y = draw(&w_b, spec.m);
    let test = draw(&w_f, spec.n_test.max(1));
    Ok(DualPpcaSample {
        pair: ContrastivePair::new(DataMatrix::new(x)?, DataMatrix::new(y)?)?,
        test: DataMatrix::new(test)?,
        w_f,
        w_b,
    })
}

/// Mean silhouette width with Euclidean distances. Points in singleton
/// clusters score 0.
pub fn silhouette(latents: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    let n = latents.nrows();
    if labels.len() != n {
        return Err(PcpcaError::arg("one label per latent row is required"));
    }
    if n < 3 {
        return Err(PcpcaError::MetricUndefined("silhouette needs at least 3 points".into()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(PcpcaError::MetricUndefined("silhouette needs at least two labels".into()));
    }
    let idx: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).expect("present")).collect();
    let k = classes.len();
    let sizes: Vec<usize> = (0..k).map(|c| idx.iter().filter(|&&i| i == c).count()).collect();
    let rows: Vec<DVector<f64>> = latents.row_iter().map(|r| r.transpose()).collect();
    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = idx[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in 0..n {
                if j != i {
                    sums[idx[j]] += (&rows[i] - &rows[j]).norm();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let den = a.max(b);
            if den == 0.0 {
                0.0
            } else {
                (b - a) / den
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / n as f64)
}

/// Adds N(0, σ² I) noise to every observed cell of both matrices. The
/// result is on the raw scale (centered inputs are uncentered first).
pub fn inject_noise(pair: &ContrastivePair, sigma2: f64, seed: u64) -> Result<ContrastivePair> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(PcpcaError::arg(format!("noise variance must be non-negative, got {sigma2}")));
    }
    let mut r = rng(seed);
    let s = sigma2.sqrt();
    pair.map(|data| {
        let raw = if data.is_centered() { data.uncentered() } else { data.clone() };
        let noise = gaussian_matrix(&mut r, raw.n_samples(), raw.n_features()) * s;
        let values = raw.values().zip_map(&noise, |v, e| if v.is_nan() { v } else { v + e });
        DataMatrix::with_mask(values, raw.mask().clone())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cpca,
    Pcpca,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cpca => "cpca",
            Method::Pcpca => "pcpca",
        }
    }
}

/// Foreground latents for one method at one γ′. PCPCA uses posterior-mean
/// projections, CPCA orthonormal ones.
pub fn foreground_latents(pair: &ContrastivePair, d: usize, gamma_prime: f64, method: Method) -> Result<DMatrix<f64>> {
    match method {
        Method::Pcpca => {
            let gamma = convert_gamma(gamma_prime, pair.n(), pair.m())?;
            let model = fit_pcpca(pair, d, gamma)?;
            project(&model, pair.foreground(), ProjectionMode::PosteriorMean)
        }
        Method::Cpca => {
            let v = fit_cpca(pair, d, gamma_prime)?;
            Ok(pair.foreground().dense()? * v.basis())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub gamma_prime: f64,
    pub silhouette: Option<f64>,
    /// Reason code when the fit or the metric failed.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub method: Method,
    pub points: Vec<SweepPoint>,
    /// Index of the highest silhouette.
    pub best: Option<usize>,
    /// Index of the first failed γ′.
    pub first_failure: Option<usize>,
}

impl SweepResult {
    pub fn best_silhouette(&self) -> Option<f64> {
        self.best.and_then(|i| self.points[i].silhouette)
    }
}

/// Silhouette of the foreground latents at each γ′ of the grid on a
/// centered pair; failures are recorded, not raised.
pub fn gamma_sweep(pair: &ContrastivePair, labels: &[usize], d: usize, grid: &[f64], method: Method) -> SweepResult {
    let points: Vec<SweepPoint> = grid
        .iter()
        .map(|&gp| match foreground_latents(pair, d, gp, method).and_then(|z| silhouette(&z, labels)) {
            Ok(s) => SweepPoint {
                gamma_prime: gp,
                silhouette: Some(s),
                failure: None,
            },
            Err(e) => SweepPoint {
                gamma_prime: gp,
                silhouette: None,
                failure: Some(e.kind().to_string()),
            },
        })
        .collect();
    let best = points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.silhouette.map(|s| (i, s)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    let first_failure = points.iter().position(|p| p.failure.is_some());
    SweepResult {
        method,
        points,
        best,
        first_failure,
    }
}

/// Circular spread of the axes spanned by `d = 1` loadings: angles are
/// doubled so that w and −w coincide, and the result is in radians.
pub fn axial_angular_std(directions: &[DVector<f64>]) -> Result<f64> {
    if directions.is_empty() {
        return Err(PcpcaError::arg("no directions"));
    }
    let (mut c, mut s) = (0.0, 0.0);
    for v in directions {
        if v.len() != 2 {
            return Err(PcpcaError::arg("axial spread is defined for 2-dimensional loadings"));
        }
        let t = 2.0 * v[1].atan2(v[0]);
        c += t.cos();
        s += t.sin();
    }
    let r = ((c * c + s * s).sqrt() / directions.len() as f64).min(1.0);
    Ok(0.5 * (-2.0 * r.max(1e-300).ln()).sqrt())
}

/// Axial spread of the PCPCA Gibbs posterior draws of W on the two-subgroup
/// toy mixture with `n` samples per condition.
pub fn posterior_angular_spread(n: usize, gamma: f64, config: &GibbsConfig, seed: u64) -> Result<f64> {
    let spec = MixtureSpec::posterior_toy(n).with_seed(seed);
    let (pair, _) = simulate_mixture(&spec)?;
    spread_of(&pair.centered()?, gamma, config)
}

fn spread_of(pair: &ContrastivePair, gamma: f64, config: &GibbsConfig) -> Result<f64> {
    let chain = sample_gibbs(pair, 1, gamma, ModelKind::Pcpca, config)?;
    let dirs: Vec<DVector<f64>> = chain.states.iter().map(|s| s.loadings().column(0).into_owned()).collect();
    axial_angular_std(&dirs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadRow {
    pub n: usize,
    pub spreads: Vec<f64>,
    pub median: f64,
    /// Datasets drawn without a closed-form estimate and therefore skipped.
    pub skipped: usize,
}

/// Most datasets drawn per grid point while looking for feasible ones.
pub const SPREAD_MAX_DRAWS: usize = 200;

/// For each per-condition `n`, the posterior axial spread on `reps` toy
/// datasets for which the closed-form estimate exists at `gamma`. Without
/// it the relative likelihood is unbounded as σ² → 0 and the posterior sits
/// on the prior floor, which says nothing about W.
pub fn posterior_spread_study(ns: &[usize], reps: usize, gamma: f64, config: &GibbsConfig, seed: u64) -> Result<Vec<SpreadRow>> {
    ns.par_iter()
        .enumerate()
        .map(|(k, &n)| {
            let mut spreads = Vec::with_capacity(reps);
            let mut skipped = 0;
            let mut draw = 0u64;
            while spreads.len() < reps {
                if draw as usize >= SPREAD_MAX_DRAWS {
                    return Err(PcpcaError::InfeasibleGamma {
                        gamma,
                        constraint: format!("fewer than {reps} of {SPREAD_MAX_DRAWS} datasets at n = {n} admit an estimate"),
                    });
                }
                let spec = MixtureSpec::posterior_toy(n).with_seed(derive_seed(seed, 20 + k as u64, draw));
                draw += 1;
                let pair = simulate_mixture(&spec)?.0.centered()?;
                if fit_pcpca(&pair, 1, gamma).is_err() {
                    skipped += 1;
                    continue;
                }
                let cfg = GibbsConfig {
                    seed: derive_seed(seed, 40 + k as u64, draw),
                    ..config.clone()
                };
                spreads.push(spread_of(&pair, gamma, &cfg)?);
            }
            let mut sorted = spreads.clone();
            sorted.sort_by(f64::total_cmp);
            let median = if reps % 2 == 1 {
                sorted[reps / 2]
            } else {
                0.5 * (sorted[reps / 2 - 1] + sorted[reps / 2])
            };
            Ok(SpreadRow {
                n,
                spreads,
                median,
                skipped,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Experiment specifications and reports

/// User-supplied data instead of a simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataFiles {
    pub foreground: PathBuf,
    pub background: PathBuf,
    /// One integer label per foreground row.
    pub labels: PathBuf,
    #[serde(default)]
    pub header: bool,
}

impl DataFiles {
    pub fn load(&self) -> Result<(ContrastivePair, Vec<usize>)> {
        let opts = CsvOptions {
            has_header: self.header,
            ..Default::default()
        };
        let fg = load_csv(&self.foreground, &opts)?;
        let bg = load_csv(&self.background, &opts)?;
        let labels_m = load_csv(&self.labels, &opts)?;
        let labels: Vec<usize> = labels_m
            .dense()?
            .column(0)
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(PcpcaError::Config(format!("label {v} is not a non-negative integer")))
                }
            })
            .collect::<Result<_>>()?;
        if labels.len() != fg.n_samples() {
            return Err(PcpcaError::Config("labels file must have one row per foreground sample".into()));
        }
        Ok((ContrastivePair::new(fg, bg)?, labels))
    }
}

fn default_reps() -> usize {
    20
}

fn default_d() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGammaSweepSpec {
    #[serde(default = "MixtureSpec::toy")]
    pub mixture: MixtureSpec,
    #[serde(default)]
    pub data: Option<DataFiles>,
    #[serde(default = "one")]
    pub d: usize,
    #[serde(default = "toy_grid")]
    pub gamma_primes: Vec<f64>,
    #[serde(default = "both_methods")]
    pub methods: Vec<Method>,
}

fn one() -> usize {
    1
}

fn toy_grid() -> Vec<f64> {
    vec![0.0, 0.2, 0.6, 0.9]
}

fn both_methods() -> Vec<Method> {
    vec![Method::Pcpca, Method::Cpca]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRobustnessSpec {
    #[serde(default = "noise_mixture")]
    pub mixture: MixtureSpec,
    #[serde(default)]
    pub data: Option<DataFiles>,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "noise_grid")]
    pub sigma2_grid: Vec<f64>,
    /// γ′ tuning grid for PCPCA.
    #[serde(default = "pcpca_tuning_grid")]
    pub pcpca_gamma_primes: Vec<f64>,
    /// γ′ tuning grid for CPCA.
    #[serde(default = "cpca_tuning_grid")]
    pub cpca_gamma_primes: Vec<f64>,
}

/// σ² ∈ {0.5, 1, …, 5}.
pub fn noise_grid() -> Vec<f64> {
    (1..=10).map(|k| 0.5 * k as f64).collect()
}

/// γ′ ∈ {0, 0.1, …, 0.9, 0.95, 0.99}.
pub fn pcpca_tuning_grid() -> Vec<f64> {
    let mut g: Vec<f64> = (0..10).map(|k| 0.1 * k as f64).collect();
    g.extend([0.95, 0.99]);
    g
}

/// The PCPCA grid extended past γ′ = 1, where CPCA is still defined.
pub fn cpca_tuning_grid() -> Vec<f64> {
    let mut g = pcpca_tuning_grid();
    g.extend([1.0, 1.5, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0]);
    g
}

/// D = 10, n = m = 500. Foreground subgroups differ along e₁ (means ±1.5);
/// e₂ and e₃ carry variance 2 shared with the background; the background
/// has variance 4 on e₄. Unit variance elsewhere.
pub fn noise_mixture() -> MixtureSpec {
    let dim = 10;
    let mut sigma_f = vec![vec![0.0; dim]; dim];
    let mut sigma_b = vec![vec![0.0; dim]; dim];
    for k in 0..dim {
        sigma_f[k][k] = 1.0;
        sigma_b[k][k] = 1.0;
    }
    for k in [1, 2] {
        sigma_f[k][k] = 2.0;
        sigma_b[k][k] = 2.0;
    }
    sigma_b[3][3] = 4.0;
    let mut mu_f1 = vec![0.0; dim];
    mu_f1[0] = 1.5;
    let mu_f2: Vec<f64> = mu_f1.iter().map(|v| -v).collect();
    MixtureSpec {
        beta: 0.5,
        pi: 0.5,
        mu_f1,
        mu_f2,
        mu_b: vec![0.0; dim],
        sigma_f,
        sigma_b,
        n_fg: 500,
        n_bg: 500,
        seed: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingSweepSpec {
    #[serde(default)]
    pub model: DualPpcaSpec,
    #[serde(default = "missing_grid")]
    pub p_grid: Vec<f64>,
    #[serde(default = "missing_gamma_prime")]
    pub gamma_prime: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

/// p ∈ {0, 0.1, …, 0.7}.
pub fn missing_grid() -> Vec<f64> {
    (0..=7).map(|k| 0.1 * k as f64).collect()
}

pub fn missing_gamma_prime() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionSpec {
    /// Foreground and background covariances; both components are centered.
    #[serde(default = "contraction_c_f")]
    pub c_f: Vec<Vec<f64>>,
    #[serde(default = "contraction_c_b")]
    pub c_b: Vec<Vec<f64>>,
    /// Foreground share of the total sample count.
    #[serde(default = "half")]
    pub beta: f64,
    /// Raw contrast weight γ.
    #[serde(default = "contraction_gamma")]
    pub gamma: f64,
    #[serde(default = "one")]
    pub d: usize,
    /// Total sample counts n + m.
    #[serde(default = "contraction_n_grid")]
    pub n_grid: Vec<usize>,
    /// Retained posterior draws per chain.
    #[serde(default = "thousand")]
    pub draws: usize,
    #[serde(default = "contraction_c_const")]
    pub c_const: f64,
    #[serde(default)]
    pub gibbs: ContractionGibbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContractionGibbs {
    pub learning_rate_w: f64,
    pub burn_in: usize,
    pub thinning: usize,
}

impl Default for ContractionGibbs {
    fn default() -> Self {
        ContractionGibbs {
            learning_rate_w: 1.0,
            burn_in: 2000,
            thinning: 5,
        }
    }
}

fn half() -> f64 {
    0.5
}

fn thousand() -> usize {
    1000
}

pub fn contraction_c_f() -> Vec<Vec<f64>> {
    vec![vec![4.0, 2.6], vec![2.6, 4.0]]
}

pub fn contraction_c_b() -> Vec<Vec<f64>> {
    vec![vec![1.0, -0.5], vec![-0.5, 1.0]]
}

fn contraction_gamma() -> f64 {
    0.5
}

fn contraction_n_grid() -> Vec<usize> {
    vec![50, 200, 500]
}

pub fn contraction_c_const() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    #[serde(default = "generation_model")]
    pub model: DualPpcaSpec,
    #[serde(default = "generation_grid")]
    pub gamma_primes: Vec<f64>,
    /// Samples drawn from each fitted model.
    #[serde(default = "generation_count")]
    pub samples: usize,
}

fn generation_model() -> DualPpcaSpec {
    DualPpcaSpec {
        n_test: 500,
        ..Default::default()
    }
}

fn generation_grid() -> Vec<f64> {
    vec![0.0, 0.2, 0.4, 0.6, 0.8]
}

fn generation_count() -> usize {
    300
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    ToyGammaSweep(ToyGammaSweepSpec),
    NoiseRobustness(NoiseRobustnessSpec),
    MissingSweep(MissingSweepSpec),
    Contraction(ContractionSpec),
    Generation(GenerationSpec),
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::ToyGammaSweep(_) => "toy_gamma_sweep",
            Protocol::NoiseRobustness(_) => "noise_robustness",
            Protocol::MissingSweep(_) => "missing_sweep",
            Protocol::Contraction(_) => "contraction",
            Protocol::Generation(_) => "generation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(flatten)]
    pub protocol: Protocol,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn new(protocol: Protocol, repetitions: usize, seed: u64) -> Self {
        ExperimentSpec {
            protocol,
            repetitions,
            seed,
        }
    }

    /// Parses a JSON spec; unknown kinds are configuration errors.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| PcpcaError::Config(format!("invalid experiment spec: {e}")))
    }
}

pub const REPORT_VERSION: &str = "pcpca-report/1";

/// One metric for one method at one grid point, over all repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub method: String,
    pub metric: String,
    pub params: BTreeMap<String, f64>,
    /// Per repetition; `None` where the run failed.
    pub values: Vec<Option<f64>>,
    pub failures: Vec<Option<String>>,
    pub seeds: Vec<u64>,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: String,
    pub kind: String,
    pub repetitions: usize,
    pub seed: u64,
    pub spec: ExperimentSpec,
    pub cells: Vec<ReportCell>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn cell(&self, method: &str, metric: &str, param: &str, value: f64) -> Option<&ReportCell> {
        self.cells.iter().find(|c| {
            c.method == method && c.metric == metric && c.params.get(param).is_some_and(|v| (v - value).abs() < 1e-12)
        })
    }

    /// Flat summary table: one row per cell.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut keys: Vec<&String> = self.cells.iter().flat_map(|c| c.params.keys()).collect();
        keys.sort();
        keys.dedup();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["kind".to_string(), "method".into(), "metric".into()];
        header.extend(keys.iter().map(|k| k.to_string()));
        header.extend(["n_ok", "n_failed", "mean", "median", "ci_low", "ci_high"].map(String::from));
        w.write_record(&header)?;
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        for c in &self.cells {
            let mut row = vec![self.kind.clone(), c.method.clone(), c.metric.clone()];
            row.extend(keys.iter().map(|k| fmt(c.params.get(*k).copied())));
            let ok = c.values.iter().filter(|v| v.is_some()).count();
            row.push(ok.to_string());
            row.push((c.values.len() - ok).to_string());
            row.extend([fmt(c.mean), fmt(c.median), fmt(c.ci_low), fmt(c.ci_high)]);
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Resamples used for the percentile bootstrap.
pub const BOOTSTRAP_RESAMPLES: usize = 2000;

/// (mean, median, 2.5% and 97.5% percentile-bootstrap bounds of the mean).
pub fn summarize(values: &[f64], seed: u64) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None, None, None);
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let mut r = rng(seed);
    let mut means: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| (0..n).map(|_| *values.choose(&mut r).expect("nonempty")).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let q = |p: f64| means[((p * (BOOTSTRAP_RESAMPLES - 1) as f64).round() as usize).min(BOOTSTRAP_RESAMPLES - 1)];
    (Some(mean), Some(median), Some(q(0.025)), Some(q(0.975)))
}

/// Collects per-repetition outcomes into cells in a fixed order.
struct CellBuilder {
    reps: usize,
    base_seed: u64,
    cells: BTreeMap<(usize, String, String), ReportCell>,
    order: usize,
    keys: BTreeMap<String, usize>,
}

impl CellBuilder {
    fn new(reps: usize, base_seed: u64) -> Self {
        CellBuilder {
            reps,
            base_seed,
            cells: BTreeMap::new(),
            order: 0,
            keys: BTreeMap::new(),
        }
    }

    fn record(&mut self, method: &str, metric: &str, params: &[(&str, f64)], rep: usize, seed: u64, outcome: Result<f64>) {
        let key_str = format!(
            "{method}|{metric}|{}",
            params.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
        );
        let idx = *self.keys.entry(key_str.clone()).or_insert_with(|| {
            self.order += 1;
            self.order
        });
        let reps = self.reps;
        let cell = self
            .cells
            .entry((idx, method.to_string(), key_str))
            .or_insert_with(|| ReportCell {
                method: method.to_string(),
                metric: metric.to_string(),
                params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                values: vec![None; reps],
                failures: vec![Some("not_run".into()); reps],
                seeds: vec![0; reps],
                mean: None,
                median: None,
                ci_low: None,
                ci_high: None,
            });
        cell.seeds[rep] = seed;
        match outcome {
            Ok(v) if v.is_finite() => {
                cell.values[rep] = Some(v);
                cell.failures[rep] = None;
            }
            Ok(v) => cell.failures[rep] = Some(format!("non_finite:{v}")),
            Err(e) => cell.failures[rep] = Some(e.kind().to_string()),
        }
    }

    fn finish(self) -> Vec<ReportCell> {
        let base = self.base_seed;
        self.cells
            .into_values()
            .enumerate()
            .map(|(i, mut c)| {
                let ok: Vec<f64> = c.values.iter().flatten().copied().collect();
                let (mean, median, lo, hi) = summarize(&ok, derive_seed(base, 0xB007, i as u64));
                c.mean = mean;
                c.median = median;
                c.ci_low = lo;
                c.ci_high = hi;
                c
            })
            .collect()
    }
}

type Outcome = (String, String, Vec<(&'static str, f64)>, Result<f64>);

/// Runs the protocol with `repetitions` independent derived seeds. Cells
/// are assembled in grid order regardless of parallel completion order.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    if spec.repetitions == 0 {
        return Err(PcpcaError::Config("repetitions must be at least 1".into()));
    }
    let reps = spec.repetitions;
    let seeds: Vec<u64> = (0..reps as u64).map(|r| derive_seed(spec.seed, 1, r)).collect();
    let mut notes = vec!["foreground and background are each centered by their own mean".to_string()];
    let per_rep: Vec<Result<Vec<Outcome>>> = match &spec.protocol {
        Protocol::ToyGammaSweep(p) => {
            if p.data.is_some() {
                notes.push("data loaded from files; repetitions reuse the same data".into());
            }
            seeds.par_iter().map(|&s| toy_rep(p, s)).collect()
        }
        Protocol::NoiseRobustness(p) => {
            notes.push("each cell holds the best silhouette over the method's gamma' grid".into());
            seeds.par_iter().map(|&s| noise_rep(p, s)).collect()
        }
        Protocol::MissingSweep(p) => {
            notes.push(format!(
                "PCPCA fit at gamma' = {}; PPCA fit on pooled foreground and background; test log-likelihood is per held-out sample",
                p.gamma_prime
            ));
            seeds.par_iter().map(|&s| missing_rep(p, s)).collect()
        }
        Protocol::Contraction(p) => {
            notes.push(format!(
                "n counts samples across both conditions; threshold c n^-1/2 with c = {}",
                p.c_const
            ));
            seeds.par_iter().map(|&s| contraction_rep(p, s)).collect()
        }
        Protocol::Generation(p) => seeds.par_iter().map(|&s| generation_rep(p, s)).collect(),
    };
    let mut builder = CellBuilder::new(reps, spec.seed);
    for (rep, outcomes) in per_rep.into_iter().enumerate() {
        for (method, metric, params, outcome) in outcomes? {
            builder.record(&method, &metric, &params, rep, seeds[rep], outcome);
        }
    }
    Ok(ExperimentReport {
        version: REPORT_VERSION.to_string(),
        kind: spec.protocol.name().to_string(),
        repetitions: reps,
        seed: spec.seed,
        spec: spec.clone(),
        cells: builder.finish(),
        notes,
    })
}

fn load_or_simulate(data: &Option<DataFiles>, mixture: &MixtureSpec, seed: u64) -> Result<(ContrastivePair, Vec<usize>)> {
    match data {
        Some(files) => files.load(),
        None => simulate_mixture(&mixture.clone().with_seed(derive_seed(seed, 2, 0))),
    }
}

fn toy_rep(p: &ToyGammaSweepSpec, seed: u64) -> Result<Vec<Outcome>> {
    let (pair, labels) = load_or_simulate(&p.data, &p.mixture, seed)?;
    let pair = pair.centered()?;
    let mut out = Vec::new();
    for &method in &p.methods {
        let sweep = gamma_sweep(&pair, &labels, p.d, &p.gamma_primes, method);
        for pt in sweep.points {
            let outcome = match (pt.silhouette, pt.failure) {
                (Some(s), _) => Ok(s),
                (None, reason) => Err(PcpcaError::Numeric(reason.unwrap_or_default())),
            };
            out.push((method.name().to_string(), "silhouette".to_string(), vec![("gamma_prime", pt.gamma_prime)], outcome));
        }
    }
    Ok(out)
}

/// Best silhouette over the grid for one noisy dataset.
pub fn tuned_silhouette(pair: &ContrastivePair, labels: &[usize], d: usize, grid: &[f64], method: Method) -> Result<f64> {
    gamma_sweep(pair, labels, d, grid, method)
        .best_silhouette()
        .ok_or_else(|| PcpcaError::MetricUndefined("every gamma' in the grid failed".into()))
}

fn noise_rep(p: &NoiseRobustnessSpec, seed: u64) -> Result<Vec<Outcome>> {
    let (pair, labels) = load_or_simulate(&p.data, &p.mixture, seed)?;
    let mut out = Vec::new();
    for (k, &s2) in p.sigma2_grid.iter().enumerate() {
        let noisy = inject_noise(&pair, s2, derive_seed(seed, 3, k as u64)).and_then(|q| q.centered());
        for (method, grid) in [(Method::Pcpca, &p.pcpca_gamma_primes), (Method::Cpca, &p.cpca_gamma_primes)] {
            let outcome = noisy
                .as_ref()
                .map_err(|e| PcpcaError::Numeric(e.to_string()))
                .and_then(|q| tuned_silhouette(q, &labels, p.d, grid, method));
            out.push((method.name().to_string(), "silhouette".to_string(), vec![("sigma2", s2)], outcome));
        }
    }
    Ok(out)
}

/// Outcome of one missing-data comparison at one masking probability.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingComparison {
    pub pcpca_test_ll: f64,
    pub ppca_test_ll: f64,
    /// `None` when nothing was masked.
    pub pcpca_mse: Option<f64>,
    pub ppca_mse: Option<f64>,
}

/// Masks both matrices with probability `p`, fits PCPCA (at γ′) and PPCA on
/// the pooled data, and scores held-out log-likelihood per test sample and
/// imputation MSE on the masked foreground cells. Fully observed data use
/// the closed-form fits.
pub fn missing_comparison(
    sample: &DualPpcaSample,
    p: f64,
    gamma_prime: f64,
    optimizer: &OptimizerConfig,
    seed: u64,
) -> Result<MissingComparison> {
    let raw = &sample.pair;
    let fg = mask_keeping_rows(raw.foreground(), p, derive_seed(seed, 4, 0))?;
    let bg = mask_keeping_rows(raw.background(), p, derive_seed(seed, 4, 1))?;
    let masked = ContrastivePair::new(fg.clone(), bg.clone())?;
    let centered = masked.centered()?;
    let pooled = ContrastivePair::foreground_only(fg.vstack(&bg)?.center()?)?;
    let d = sample.w_f.ncols();
    let gamma = convert_gamma(gamma_prime, raw.n(), raw.m())?;

    let (pcpca, ppca) = if centered.is_fully_observed() {
        (fit_pcpca(&centered, d, gamma)?, fit_ppca(pooled.foreground(), d)?)
    } else {
        let (a, _) = fit_missing(&centered, d, gamma, optimizer, derive_seed(seed, 5, 0))?;
        let (b, _) = fit_missing(&pooled, d, 0.0, optimizer, derive_seed(seed, 5, 1))?;
        (a, b)
    };

    let test_ll = |model: &PcpcaModel| -> Result<f64> {
        let test = sample.test.center_with(model.feature_mean())?;
        Ok(heldout_log_likelihood(model, &test)? / test.n_samples() as f64)
    };
    let hidden = fg.mask().map(|b| !b);
    let truth = raw.foreground().values();
    let mse = |model: &PcpcaModel| -> Result<Option<f64>> {
        if !hidden.iter().any(|&h| h) {
            return Ok(None);
        }
        let (filled, _) = impute_uncentered(model, &fg)?;
        Ok(Some(imputation_mse(truth, filled.values(), &hidden)?))
    };
    Ok(MissingComparison {
        pcpca_test_ll: test_ll(&pcpca)?,
        ppca_test_ll: test_ll(&ppca)?,
        pcpca_mse: mse(&pcpca)?,
        ppca_mse: mse(&ppca)?,
    })
}

/// Masks cells of `data` with probability `p`, then re-observes one random
/// cell in any row left empty.
fn mask_keeping_rows(data: &DataMatrix, p: f64, seed: u64) -> Result<DataMatrix> {
    let masked = data.mask_at_random(p, seed)?;
    let mut mask = masked.mask().clone();
    let mut r = rng(derive_seed(seed, 1, 0));
    for i in 0..mask.nrows() {
        if !mask.row(i).iter().any(|&b| b) {
            let k = r.random_range(0..mask.ncols());
            mask[(i, k)] = true;
        }
    }
    data.apply_mask(&mask)
}

fn missing_rep(p: &MissingSweepSpec, seed: u64) -> Result<Vec<Outcome>> {
    let sample = simulate_dual_ppca(&DualPpcaSpec {
        seed: derive_seed(seed, 6, 0),
        ..p.model.clone()
    })?;
    let mut out = Vec::new();
    for (k, &prob) in p.p_grid.iter().enumerate() {
        let res = missing_comparison(&sample, prob, p.gamma_prime, &p.optimizer, derive_seed(seed, 7, k as u64));
        let params = vec![("p", prob)];
        let pick = |f: &dyn Fn(&MissingComparison) -> Option<f64>| -> Result<f64> {
            match &res {
                Ok(c) => f(c).ok_or_else(|| PcpcaError::MetricUndefined("no hidden cells".into())),
                Err(e) => Err(PcpcaError::Numeric(format!("{}: {e}", e.kind()))),
            }
        };
        out.push(("pcpca".into(), "test_ll".into(), params.clone(), pick(&|c| Some(c.pcpca_test_ll))));
        out.push(("ppca".into(), "test_ll".into(), params.clone(), pick(&|c| Some(c.ppca_test_ll))));
        out.push(("pcpca".into(), "mse".into(), params.clone(), pick(&|c| c.pcpca_mse)));
        out.push(("ppca".into(), "mse".into(), params, pick(&|c| c.ppca_mse)));
    }
    Ok(out)
}

/// D̂ for one simulated dataset with `n_total` samples.
pub fn contraction_once(p: &ContractionSpec, n_total: usize, seed: u64) -> Result<f64> {
    let c_f = to_matrix(&p.c_f, "c_f")?;
    let c_b = to_matrix(&p.c_b, "c_b")?;
    check_psd(&c_f, "c_f")?;
    check_psd(&c_b, "c_b")?;
    let n = ((p.beta * n_total as f64).round() as usize).clamp(1, n_total - 1);
    let m = n_total - n;
    let mut r = rng(seed);
    let dim = c_f.nrows();
    let x = mvn_rows(&mut r, n, &DVector::zeros(dim), &c_f);
    let y = mvn_rows(&mut r, m, &DVector::zeros(dim), &c_b);
    let pair = ContrastivePair::new(DataMatrix::new(x)?, DataMatrix::new(y)?)?.centered()?;
    let mix = PopulationMixture::new(n as f64 / n_total as f64, c_f, c_b, p.gamma)?;
    let (w_star, s2_star) = population_minimizer(&mix, p.d)?;
    let star = Theta::Pcpca {
        w: w_star,
        sigma2: s2_star,
    };
    let config = GibbsConfig {
        learning_rate_w: p.gibbs.learning_rate_w,
        n_samples: p.gibbs.burn_in + p.draws * p.gibbs.thinning,
        burn_in: p.gibbs.burn_in,
        thinning: p.gibbs.thinning,
        seed: derive_seed(seed, 8, 0),
        ..Default::default()
    };
    let chain = sample_gibbs(&pair, p.d, p.gamma, ModelKind::Pcpca, &config)?;
    contraction_stat(&chain, &star, &mix, n_total, p.c_const)
}

fn contraction_rep(p: &ContractionSpec, seed: u64) -> Result<Vec<Outcome>> {
    Ok(p.n_grid
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let outcome = contraction_once(p, n, derive_seed(seed, 9, k as u64));
            ("pcpca".to_string(), "d_hat".to_string(), vec![("n", n as f64)], outcome)
        })
        .collect())
}

fn generation_rep(p: &GenerationSpec, seed: u64) -> Result<Vec<Outcome>> {
    let sample = simulate_dual_ppca(&DualPpcaSpec {
        seed: derive_seed(seed, 10, 0),
        ..p.model.clone()
    })?;
    let pair = sample.pair.centered()?;
    let d = sample.w_f.ncols();
    let truth = &sample.w_f * sample.w_f.transpose() + DMatrix::identity(pair.dim(), pair.dim()) * p.model.sigma2;
    let mut out = Vec::new();
    for (k, &gp) in p.gamma_primes.iter().enumerate() {
        let params = vec![("gamma_prime", gp)];
        let model = convert_gamma(gp, pair.n(), pair.m()).and_then(|g| fit_pcpca(&pair, d, g));
        let ll = model.as_ref().map_err(clone_err).and_then(|m| {
            let test = sample.test.center_with(m.feature_mean())?;
            Ok(heldout_log_likelihood(m, &test)? / test.n_samples() as f64)
        });
        let cov_err = model.as_ref().map_err(clone_err).and_then(|m| {
            let mut r = rng(derive_seed(seed, 11, k as u64));
            let gen = generate(m, p.samples.max(2), &mut r, true)?.center()?;
            let cov = gen.values().transpose() * gen.values() / gen.n_samples() as f64;
            Ok((cov - &truth).norm() / truth.norm())
        });
        out.push(("pcpca".into(), "test_ll".into(), params.clone(), ll));
        out.push(("pcpca".into(), "generated_cov_rel_error".into(), params, cov_err));
    }
    Ok(out)
}

fn clone_err(e: &PcpcaError) -> PcpcaError {
    match e {
        PcpcaError::InfeasibleGamma { gamma, constraint } => PcpcaError::InfeasibleGamma {
            gamma: *gamma,
            constraint: constraint.clone(),
        },
        other => PcpcaError::Numeric(other.to_string()),
    }
}
