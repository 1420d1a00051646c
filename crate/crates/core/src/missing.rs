//! Relative likelihood with missing cells: objective, gradients, a
//! first-order fitter and Gaussian conditional imputation.
//!
//! Samples sharing an observation pattern share A_i = L(W Wᵀ + σ² I)Lᵀ, so
//! the data are grouped by pattern once and each group keeps a weighted
//! scatter Σ w_i x_i^o x_i^oᵀ (w_i = 1 for foreground, −γ for background).
//! Every evaluation then costs one Cholesky per distinct pattern.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ContrastivePair, DataMatrix, ObservationMask};
use crate::error::{PcpcaError, Result};
use crate::estimators::PcpcaModel;
use crate::linalg::{chol_log_det, cholesky, model_covariance, LN_2PI};
use crate::sampling::gaussian_matrix;
use crate::spectral::gamma_mle_report;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_hat: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub sigma2_floor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon_hat: 1e-8,
            max_iters: 2000,
            grad_tol: 1e-5,
            sigma2_floor: 1e-6,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(PcpcaError::Config("beta1 and beta2 must lie in (0, 1)".into()));
        }
        if !(self.step_size > 0.0) || !(self.sigma2_floor > 0.0) || !(self.epsilon_hat > 0.0) {
            return Err(PcpcaError::Config(
                "step_size, sigma2_floor and epsilon_hat must be positive".into(),
            ));
        }
        if self.max_iters == 0 {
            return Err(PcpcaError::Config("max_iters must be at least 1".into()));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(PcpcaError::Config("grad_tol must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    /// Objective at the iterate of each step, before the update.
    pub objectives: Vec<f64>,
    /// Max-norm of ∂/∂W at the returned iterate.
    pub final_grad_w: f64,
    /// |∂/∂σ²| at the returned iterate.
    pub final_grad_sigma2: f64,
    pub converged: bool,
    pub iterations_used: usize,
    pub best_iteration: usize,
}

impl FitTrace {
    /// Running maximum of the objective sequence.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.objectives
            .iter()
            .map(|&v| {
                best = best.max(v);
                best
            })
            .collect()
    }

    pub fn final_grad_max(&self) -> f64 {
        self.final_grad_w.max(self.final_grad_sigma2)
    }
}

/// One observation pattern with its weighted sufficient statistics.
#[derive(Debug, Clone)]
struct PatternGroup {
    observed: Vec<usize>,
    weight: f64,
    scatter: DMatrix<f64>,
}

/// Pattern-grouped form of a (possibly masked) pair for a fixed γ.
#[derive(Debug, Clone)]
pub struct MaskedScatter {
    dim: usize,
    groups: Vec<PatternGroup>,
}

impl MaskedScatter {
    pub fn new(pair: &ContrastivePair, gamma: f64) -> Result<Self> {
        if !pair.is_centered() {
            return Err(PcpcaError::NotCentered);
        }
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(PcpcaError::arg(format!("gamma must be finite and non-negative, got {gamma}")));
        }
        let mut acc: BTreeMap<Vec<usize>, (f64, DMatrix<f64>)> = BTreeMap::new();
        let parts = [(pair.foreground(), 1.0, 0usize), (pair.background(), -gamma, pair.n())];
        for (data, w, offset) in parts {
            if w == 0.0 {
                continue;
            }
            for i in 0..data.n_samples() {
                let obs = data.observation(i);
                if obs.observed().is_empty() {
                    return Err(PcpcaError::EmptySample { sample: offset + i });
                }
                let x = data.observed_values(i);
                let entry = acc
                    .entry(obs.observed().to_vec())
                    .or_insert_with(|| (0.0, DMatrix::zeros(x.len(), x.len())));
                entry.0 += w;
                entry.1.ger(w, &x, &x, 1.0);
            }
        }
        let groups = acc
            .into_iter()
            .map(|(observed, (weight, scatter))| PatternGroup {
                observed,
                weight,
                scatter,
            })
            .collect();
        Ok(MaskedScatter {
            dim: pair.dim(),
            groups,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_patterns(&self) -> usize {
        self.groups.len()
    }

    fn check(&self, w: &DMatrix<f64>, sigma2: f64) -> Result<()> {
        if w.nrows() != self.dim {
            return Err(PcpcaError::arg(format!(
                "W has {} rows, data have {} features",
                w.nrows(),
                self.dim
            )));
        }
        if !(sigma2 > 0.0) {
            return Err(PcpcaError::arg(format!("sigma2 must be positive, got {sigma2}")));
        }
        Ok(())
    }

    pub fn objective(&self, w: &DMatrix<f64>, sigma2: f64) -> Result<f64> {
        self.check(w, sigma2)?;
        let full = model_covariance(w, sigma2);
        let terms: Vec<Result<f64>> = self
            .groups
            .par_iter()
            .map(|g| {
                let a = full.select_rows(&g.observed).select_columns(&g.observed);
                let chol = cholesky(&a)?;
                let trace = chol.solve(&g.scatter).trace();
                let dim_o = g.observed.len() as f64;
                Ok(-0.5 * (g.weight * (dim_o * LN_2PI + chol_log_det(&chol)) + trace))
            })
            .collect();
        terms.into_iter().sum()
    }

    /// (objective, ∂/∂W, ∂/∂σ²).
    pub fn objective_and_gradient(&self, w: &DMatrix<f64>, sigma2: f64) -> Result<(f64, DMatrix<f64>, f64)> {
        self.check(w, sigma2)?;
        let full = model_covariance(w, sigma2);
        let parts: Vec<Result<(f64, DMatrix<f64>)>> = self
            .groups
            .par_iter()
            .map(|g| {
                let a = full.select_rows(&g.observed).select_columns(&g.observed);
                let chol = cholesky(&a)?;
                let a_inv = chol.inverse();
                let a_inv_s = &a_inv * &g.scatter;
                let dim_o = g.observed.len() as f64;
                let obj = -0.5 * (g.weight * (dim_o * LN_2PI + chol_log_det(&chol)) + a_inv_s.trace());
                // Σ_i w_i (A⁻¹ − A⁻¹ x xᵀ A⁻¹) on the observed block
                let g_block = &a_inv * g.weight - &a_inv_s * &a_inv;
                Ok((obj, g_block))
            })
            .collect();
        let mut obj = 0.0;
        let mut g_full = DMatrix::zeros(self.dim, self.dim);
        for (g, part) in self.groups.iter().zip(parts) {
            let (o, block) = part?;
            obj += o;
            for (r, &i) in g.observed.iter().enumerate() {
                for (c, &j) in g.observed.iter().enumerate() {
                    g_full[(i, j)] += block[(r, c)];
                }
            }
        }
        let g_full = (&g_full + g_full.transpose()) * 0.5;
        let dw = -(&g_full * w);
        let ds = -0.5 * g_full.trace();
        Ok((obj, dw, ds))
    }
}

/// Masked relative log-likelihood l(W, σ²).
pub fn masked_objective(w: &DMatrix<f64>, sigma2: f64, pair: &ContrastivePair, gamma: f64) -> Result<f64> {
    MaskedScatter::new(pair, gamma)?.objective(w, sigma2)
}

/// (∂l/∂W, ∂l/∂σ²).
pub fn masked_gradient(
    w: &DMatrix<f64>,
    sigma2: f64,
    pair: &ContrastivePair,
    gamma: f64,
) -> Result<(DMatrix<f64>, f64)> {
    let (_, dw, ds) = MaskedScatter::new(pair, gamma)?.objective_and_gradient(w, sigma2)?;
    Ok((dw, ds))
}

/// Σ_i log N(x_i^o; 0, A_i) for centered data.
pub fn masked_log_likelihood(w: &DMatrix<f64>, sigma2: f64, data: &DataMatrix) -> Result<f64> {
    let pair = ContrastivePair::foreground_only(data.clone())?;
    masked_objective(w, sigma2, &pair, 0.0)
}

/// Steps in a row with σ² pinned at the floor before giving up.
pub const FLOOR_PATIENCE: usize = 100;

/// Maximizes the masked relative likelihood by Adam ascent from a seeded
/// random start; returns the best iterate seen.
pub fn fit_missing(
    pair: &ContrastivePair,
    d: usize,
    gamma: f64,
    config: &OptimizerConfig,
    seed: u64,
) -> Result<(PcpcaModel, FitTrace)> {
    config.validate()?;
    let dim = pair.dim();
    if d == 0 || d >= dim {
        return Err(PcpcaError::arg(format!("d = {d} must satisfy 1 <= d < D = {dim}")));
    }
    if pair.m() > 0 {
        let n_over_m = pair.n() as f64 / pair.m() as f64;
        if gamma >= n_over_m {
            return Err(PcpcaError::InfeasibleGamma {
                gamma,
                constraint: format!("n - gamma*m > 0 requires gamma < n/m = {n_over_m}"),
            });
        }
        match gamma_mle_report(pair, d) {
            Ok(report) if gamma >= report.mle_feasible_sup => log::warn!(
                "gamma = {gamma} is at or above the available-case feasibility supremum {:.6}",
                report.mle_feasible_sup
            ),
            Ok(_) => {}
            Err(e) => log::warn!("could not verify gamma feasibility: {e}"),
        }
    }
    let stats = MaskedScatter::new(pair, gamma)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = gaussian_matrix(&mut rng, dim, d) * 0.1;
    let mut s2 = 1.0f64;

    let mut m_w = DMatrix::zeros(dim, d);
    let mut v_w = DMatrix::zeros(dim, d);
    let (mut m_s, mut v_s) = (0.0f64, 0.0f64);

    let mut objectives = Vec::with_capacity(config.max_iters);
    let mut best = (f64::NEG_INFINITY, w.clone(), s2, f64::INFINITY, f64::INFINITY, 0usize);
    let mut at_floor = 0usize;
    let mut converged = false;

    for t in 1..=config.max_iters {
        let (obj, dw, ds) = stats.objective_and_gradient(&w, s2)?;
        if !obj.is_finite() {
            return Err(PcpcaError::Numeric(format!("objective became {obj} at iteration {t}")));
        }
        objectives.push(obj);
        let gw = dw.amax();
        if obj > best.0 {
            best = (obj, w.clone(), s2, gw, ds.abs(), t);
        }
        if gw.max(ds.abs()) <= config.grad_tol {
            converged = true;
            break;
        }

        m_w = &m_w * config.beta1 + &dw * (1.0 - config.beta1);
        v_w = &v_w * config.beta2 + dw.map(|g| g * g) * (1.0 - config.beta2);
        m_s = config.beta1 * m_s + (1.0 - config.beta1) * ds;
        v_s = config.beta2 * v_s + (1.0 - config.beta2) * ds * ds;
        let c1 = 1.0 - config.beta1.powi(t as i32);
        let c2 = 1.0 - config.beta2.powi(t as i32);
        w += m_w.zip_map(&v_w, |m, v| {
            config.step_size * (m / c1) / ((v / c2).sqrt() + config.epsilon_hat)
        });
        s2 += config.step_size * (m_s / c1) / ((v_s / c2).sqrt() + config.epsilon_hat);

        if s2 <= config.sigma2_floor {
            s2 = config.sigma2_floor;
            at_floor += 1;
            if at_floor > FLOOR_PATIENCE {
                let trace = FitTrace {
                    iterations_used: objectives.len(),
                    objectives,
                    final_grad_w: best.3,
                    final_grad_sigma2: best.4,
                    converged: false,
                    best_iteration: best.5,
                };
                return Err(PcpcaError::NonConvergence {
                    reason: format!(
                        "sigma2 held at the floor {} for more than {FLOOR_PATIENCE} consecutive steps",
                        config.sigma2_floor
                    ),
                    trace: Box::new(trace),
                });
            }
        } else {
            at_floor = 0;
        }
    }

    let (_, w_best, s2_best, gw, gs, best_iteration) = best;
    let trace = FitTrace {
        iterations_used: objectives.len(),
        objectives,
        final_grad_w: gw,
        final_grad_sigma2: gs,
        converged: converged && gw.max(gs) <= config.grad_tol,
        best_iteration,
    };
    if !trace.converged {
        log::info!(
            "fit_missing stopped after {} iterations with gradient max-norm {:.3e}",
            trace.iterations_used,
            trace.final_grad_max()
        );
    }
    let model = PcpcaModel::new(
        w_best,
        s2_best,
        pair.foreground().feature_mean().clone(),
        gamma,
        pair.n(),
        pair.m(),
    )?;
    Ok((model, trace))
}

/// Conditional distribution of the unobserved block given the observed one.
#[derive(Debug, Clone, PartialEq)]
pub struct Imputation {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

pub const IMPUTE_PSD_TOL: f64 = 1e-10;

/// N(F A⁻¹ x_o, C − F A⁻¹ Fᵀ) for one sample centered by the model mean;
/// `x_observed` holds the observed coordinates in mask order.
pub fn impute(model: &PcpcaModel, x_observed: &DVector<f64>, mask: &ObservationMask) -> Result<Imputation> {
    if mask.dim() != model.dim() {
        return Err(PcpcaError::arg("mask dimension does not match the model"));
    }
    if mask.observed().is_empty() {
        return Err(PcpcaError::arg("cannot impute a sample with no observed features"));
    }
    if x_observed.len() != mask.observed().len() {
        return Err(PcpcaError::arg("observed vector length does not match the mask"));
    }
    let u = mask.unobserved();
    if u.is_empty() {
        return Ok(Imputation {
            mean: DVector::zeros(0),
            cov: DMatrix::zeros(0, 0),
        });
    }
    let o = mask.observed();
    let full = model.covariance();
    let a = full.select_rows(o).select_columns(o);
    let f = full.select_rows(u).select_columns(o);
    let c = full.select_rows(u).select_columns(u);
    let chol = cholesky(&a)?;
    let mean = &f * chol.solve(x_observed);
    let cov = c - &f * chol.solve(&f.transpose());
    let cov = (&cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(cov.clone());
    if eig.eigenvalues.iter().any(|&v| v < -IMPUTE_PSD_TOL) {
        return Err(PcpcaError::Numeric(
            "conditional covariance has a negative eigenvalue".into(),
        ));
    }
    let cov = if eig.eigenvalues.iter().any(|&v| v < 0.0) {
        let vals = eig.eigenvalues.map(|v| v.max(0.0));
        &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
    } else {
        cov
    };
    Ok(Imputation { mean, cov })
}

/// Fills every unobserved cell of `data` (centered by the model mean) with
/// its conditional mean. Returns the completed matrix and per-cell
/// conditional standard deviations (0 on observed cells).
pub fn impute_data(model: &PcpcaModel, data: &DataMatrix) -> Result<(DataMatrix, DMatrix<f64>)> {
    if data.n_features() != model.dim() {
        return Err(PcpcaError::arg("data and model dimensions differ"));
    }
    if !data.is_centered() {
        return Err(PcpcaError::NotCentered);
    }
    let rows: Vec<Result<(usize, Imputation, ObservationMask)>> = (0..data.n_samples())
        .into_par_iter()
        .map(|i| {
            let mask = data.observation(i);
            if mask.observed().is_empty() {
                return Err(PcpcaError::EmptySample { sample: i });
            }
            Ok((i, impute(model, &data.observed_values(i), &mask)?, mask))
        })
        .collect();
    let mut values = data.values().clone();
    let mut stdev = DMatrix::zeros(data.n_samples(), data.n_features());
    for row in rows {
        let (i, imp, mask) = row?;
        for (r, &k) in mask.unobserved().iter().enumerate() {
            values[(i, k)] = imp.mean[r];
            stdev[(i, k)] = imp.cov[(r, r)].max(0.0).sqrt();
        }
    }
    let filled = DataMatrix::from_centered(values)?.with_feature_mean(data.feature_mean().clone());
    Ok((filled, stdev))
}

/// [`impute_data`] for raw data: centers by the model mean, imputes and
/// returns the completed matrix on the raw scale.
pub fn impute_uncentered(model: &PcpcaModel, data: &DataMatrix) -> Result<(DataMatrix, DMatrix<f64>)> {
    let centered = if data.is_centered() {
        data.uncentered().center_with(model.feature_mean())?
    } else {
        data.center_with(model.feature_mean())?
    };
    let (filled, stdev) = impute_data(model, &centered)?;
    Ok((filled.uncentered(), stdev))
}

/// (1/|S|) Σ_{i∈S} (1/U_i) ‖x_i^u − x̂_i^u‖² over samples S with hidden cells.
/// `hidden[(i, k)]` marks cells that were masked out and imputed.
pub fn imputation_mse(truth: &DMatrix<f64>, imputed: &DMatrix<f64>, hidden: &DMatrix<bool>) -> Result<f64> {
    if truth.shape() != imputed.shape() || truth.shape() != hidden.shape() {
        return Err(PcpcaError::arg("truth, imputed values and mask must share a shape"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..truth.nrows() {
        let mut sq = 0.0;
        let mut u = 0usize;
        for k in 0..truth.ncols() {
            if hidden[(i, k)] {
                let e = truth[(i, k)] - imputed[(i, k)];
                sq += e * e;
                u += 1;
            }
        }
        if u > 0 {
            total += sq / u as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(PcpcaError::MetricUndefined("no hidden cells to score".into()));
    }
    Ok(total / count as f64)
}
