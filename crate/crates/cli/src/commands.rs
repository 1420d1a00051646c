use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use pcpca::dataset::{load_csv, write_csv, ContrastivePair, CsvOptions, DataMatrix};
use pcpca::estimators::{
    convert_gamma, fit_pcpca, gamma_prime_from_raw, generate, heldout_log_likelihood, project, ModelFile,
    PcpcaModel, ProjectionMode,
};
use pcpca::evalkit::{run_experiment, ExperimentSpec};
use pcpca::gibbs::{sample_gibbs, GibbsConfig, ModelKind};
use pcpca::missing::{fit_missing, impute_uncentered, OptimizerConfig};
use pcpca::sampling::{derive_seed, rng};
use pcpca::spectral::{gamma_mle_report, GammaReport};

use crate::{
    Cli, Command, CsvArgs, ExperimentArgs, FitArgs, FitMissingArgs, GammaArgs, GammaReportArgs, GenerateArgs,
    GibbsArgs, ImputeArgs, Kind, PairArgs, ProjectMode, ScoreArgs, TransformArgs, Failure,
};

type Result<T> = std::result::Result<T, Failure>;

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => fit(cli, a),
        Command::FitMissing(a) => fit_with_missing(cli, a),
        Command::Transform(a) => transform(cli, a),
        Command::Impute(a) => impute(cli, a),
        Command::Generate(a) => generate_samples(cli, a),
        Command::Score(a) => score(cli, a),
        Command::GammaReport(a) => gamma_report(cli, a),
        Command::GibbsSample(a) => gibbs(cli, a),
        Command::Experiment(a) => experiment(cli, a),
    }
}

/// Echoes every argument, defaults included, plus values derived from the
/// data, as one JSON line on stderr.
fn echo_config(cli: &Cli, derived: Value) -> Result<()> {
    let mut config = serde_json::to_value(&cli.command)?;
    if let Value::Object(map) = &mut config {
        map.insert("seed".into(), json!(cli.seed));
        if !derived.is_null() {
            map.insert("derived".into(), derived);
        }
    }
    eprintln!("{}", json!({ "resolved_config": config }));
    Ok(())
}

fn csv_options(a: &CsvArgs) -> CsvOptions {
    CsvOptions {
        has_header: a.header,
        missing_token: a.na_token.clone(),
    }
}

fn load(path: &Path, a: &CsvArgs) -> Result<DataMatrix> {
    load_csv(path, &csv_options(a)).map_err(|e| match e {
        pcpca::PcpcaError::Io(io) => Failure::Core(pcpca::PcpcaError::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        ))),
        other => Failure::Core(other),
    })
}

fn load_pair(a: &PairArgs) -> Result<ContrastivePair> {
    let fg = load(&a.foreground, &a.csv)?;
    let pair = match &a.background {
        Some(path) => ContrastivePair::new(fg, load(path, &a.csv)?)?,
        None => ContrastivePair::foreground_only(fg)?,
    };
    Ok(pair)
}

/// (γ, γ′) from whichever flag was given.
fn resolve_gamma(g: &GammaArgs, pair: &ContrastivePair) -> Result<(f64, f64)> {
    let (n, m) = (pair.n(), pair.m());
    if m == 0 {
        let requested = g.gamma_raw.unwrap_or(g.gamma_prime);
        if requested != 0.0 {
            return Err(Failure::Usage("a non-zero gamma needs --background".into()));
        }
        return Ok((0.0, 0.0));
    }
    Ok(match g.gamma_raw {
        Some(raw) => (raw, gamma_prime_from_raw(raw, n, m)?),
        None => (convert_gamma(g.gamma_prime, n, m)?, g.gamma_prime),
    })
}

fn sink(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn write_json<T: Serialize>(path: &Option<PathBuf>, value: &T) -> Result<()> {
    let mut out = sink(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn write_matrix(path: &Option<PathBuf>, data: &pcpca::dataset::DataMatrix) -> Result<()> {
    let out = sink(path)?;
    write_csv(out, data.values(), None, "")?;
    Ok(())
}

fn mode(m: ProjectMode) -> ProjectionMode {
    match m {
        ProjectMode::PosteriorMean => ProjectionMode::PosteriorMean,
        ProjectMode::Orthonormal => ProjectionMode::Orthonormal,
    }
}

fn read_model(path: &Path) -> Result<(PcpcaModel, ProjectionMode)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let file: ModelFile = serde_json::from_str(&text)
        .map_err(|e| pcpca::PcpcaError::Config(format!("{} is not a model file: {e}", path.display())))?;
    Ok((file.to_model()?, file.project_mode))
}

fn fit(cli: &Cli, a: &FitArgs) -> Result<()> {
    let pair = load_pair(&a.pair)?;
    let (gamma, gamma_prime) = resolve_gamma(&a.gamma, &pair)?;
    echo_config(cli, json!({ "gamma": gamma, "gamma_prime": gamma_prime, "n": pair.n(), "m": pair.m() }))?;
    let model = fit_pcpca(&pair.centered()?, a.latent_dim, gamma)?;
    write_json(&a.output, &ModelFile::from_model(&model, mode(a.project_mode)))
}

fn fit_with_missing(cli: &Cli, a: &FitMissingArgs) -> Result<()> {
    let pair = load_pair(&a.fit.pair)?;
    let (gamma, gamma_prime) = resolve_gamma(&a.fit.gamma, &pair)?;
    let config = OptimizerConfig {
        step_size: a.step_size,
        max_iters: a.max_iters,
        grad_tol: a.grad_tol,
        sigma2_floor: a.sigma2_floor,
        ..OptimizerConfig::default()
    };
    echo_config(
        cli,
        json!({ "gamma": gamma, "gamma_prime": gamma_prime, "n": pair.n(), "m": pair.m(), "optimizer": config }),
    )?;
    let (model, trace) = fit_missing(&pair.centered()?, a.fit.latent_dim, gamma, &config, derive_seed(cli.seed, 1, 0))?;
    if !trace.converged {
        log::warn!(
            "stopped after {} iterations with gradient max-norm {:.3e}; returning the best iterate",
            trace.iterations_used,
            trace.final_grad_max()
        );
    }
    if a.trace.is_some() {
        write_json(&a.trace, &trace)?;
    }
    write_json(&a.fit.output, &ModelFile::from_model(&model, mode(a.fit.project_mode)))
}

fn transform(cli: &Cli, a: &TransformArgs) -> Result<()> {
    let (model, stored) = read_model(&a.model)?;
    let projection = a.mode.map(mode).unwrap_or(stored);
    echo_config(cli, json!({ "projection": projection }))?;
    let x = load(&a.input, &a.csv)?.center_with(model.feature_mean())?;
    let z = project(&model, &x, projection)?;
    write_matrix(&a.output, &DataMatrix::new(z)?)
}

fn impute(cli: &Cli, a: &ImputeArgs) -> Result<()> {
    echo_config(cli, Value::Null)?;
    let (model, _) = read_model(&a.model)?;
    let x = load(&a.input, &a.csv)?;
    let (filled, stdev) = impute_uncentered(&model, &x)?;
    write_matrix(&a.output, &filled)?;
    if a.stdev_out.is_some() {
        write_matrix(&a.stdev_out, &DataMatrix::new(stdev)?)?;
    }
    Ok(())
}

fn generate_samples(cli: &Cli, a: &GenerateArgs) -> Result<()> {
    echo_config(cli, Value::Null)?;
    let (model, _) = read_model(&a.model)?;
    let mut r = rng(derive_seed(cli.seed, 2, 0));
    let x = generate(&model, a.count, &mut r, !a.no_noise)?;
    write_matrix(&a.output, &x)
}

fn score(cli: &Cli, a: &ScoreArgs) -> Result<()> {
    echo_config(cli, Value::Null)?;
    let (model, _) = read_model(&a.model)?;
    let x = load(&a.input, &a.csv)?.center_with(model.feature_mean())?;
    let ll = heldout_log_likelihood(&model, &x)?;
    let n = x.n_samples();
    write_json(
        &None,
        &json!({ "log_likelihood": ll, "per_sample": ll / n as f64, "n_samples": n, "observed_cells": x.observed_count() }),
    )
}

/// ±∞ as strings, everything else as a number.
fn bound(v: f64) -> Value {
    if v.is_infinite() {
        json!(if v > 0.0 { "inf" } else { "-inf" })
    } else {
        json!(v)
    }
}

fn gamma_report(cli: &Cli, a: &GammaReportArgs) -> Result<()> {
    echo_config(cli, Value::Null)?;
    let fg = load(&a.foreground, &a.csv)?;
    let bg = load(&a.background, &a.csv)?;
    let pair = ContrastivePair::new(fg, bg)?.centered()?;
    let report: GammaReport = gamma_mle_report(&pair, a.latent_dim)?;
    let in_prime = |v: f64| bound(report.in_gamma_prime(v));
    let out = json!({
        "d": report.d,
        "n": report.n,
        "m": report.m,
        "scaling": report.scaling,
        "gamma": {
            "pd_bound": bound(report.pd_bound),
            "rank_d_bound": bound(report.rank_d_bound),
            "mle_sample_bound": bound(report.mle_sample_bound),
            "mle_sufficient_bound": bound(report.mle_sufficient_bound),
            "mle_feasible_sup": bound(report.mle_feasible_sup),
        },
        "gamma_prime": {
            "pd_bound": in_prime(report.pd_bound),
            "rank_d_bound": in_prime(report.rank_d_bound),
            "mle_sample_bound": in_prime(report.mle_sample_bound),
            "mle_sufficient_bound": in_prime(report.mle_sufficient_bound),
            "mle_feasible_sup": in_prime(report.mle_feasible_sup),
        },
    });
    write_json(&None, &out)
}

fn gibbs(cli: &Cli, a: &GibbsArgs) -> Result<()> {
    let pair = load_pair(&a.pair)?;
    let (gamma, gamma_prime) = resolve_gamma(&a.gamma, &pair)?;
    let config = GibbsConfig {
        learning_rate_w: a.learning_rate_w,
        n_samples: a.n_samples,
        burn_in: a.burn_in,
        thinning: a.thinning,
        proposal_scale: a.proposal_scale,
        target_accept: a.target_accept,
        prior_box: None,
        seed: derive_seed(cli.seed, 3, 0),
    };
    echo_config(cli, json!({ "gamma": gamma, "gamma_prime": gamma_prime, "n": pair.n(), "m": pair.m() }))?;
    let kind = match a.kind {
        Kind::Pcpca => ModelKind::Pcpca,
        Kind::Cpca => ModelKind::Cpca,
    };
    let chain = sample_gibbs(&pair.centered()?, a.latent_dim, gamma, kind, &config)?;
    write_json(&a.output, &chain)
}

fn experiment(cli: &Cli, a: &ExperimentArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", a.config.display())))?;
    let mut spec = ExperimentSpec::from_json(&text)?;
    if let Some(r) = a.repetitions {
        spec.repetitions = r;
    }
    if a.override_seed {
        spec.seed = cli.seed;
    }
    echo_config(cli, json!({ "spec": spec }))?;
    let report = run_experiment(&spec)?;
    std::fs::create_dir_all(&a.outdir)?;
    let json_path = a.outdir.join("report.json");
    let csv_path = a.outdir.join("report.csv");
    write_json(&Some(json_path.clone()), &report)?;
    report.write_csv(BufWriter::new(File::create(&csv_path)?))?;
    println!("{}", json_path.display());
    println!("{}", csv_path.display());
    Ok(())
}
