//! `pcpca` command-line tool.
//!
//! Exit codes: 0 success, 1 numeric or runtime failure, 2 argument or
//! configuration error, 3 infeasible γ.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pcpca::PcpcaError;

#[derive(Debug, Parser)]
#[command(name = "pcpca", version, about = "Probabilistic contrastive PCA", propagate_version = true)]
struct Cli {
    /// Base seed; every random component derives its stream from it
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Closed-form fit on fully observed foreground/background CSVs
    Fit(FitArgs),
    /// Gradient-based fit when cells are missing
    FitMissing(FitMissingArgs),
    /// Project samples onto a fitted model's latent space
    Transform(TransformArgs),
    /// Fill missing cells with their conditional means
    Impute(ImputeArgs),
    /// Draw new samples from a fitted model
    Generate(GenerateArgs),
    /// Held-out log-likelihood of samples under a fitted model
    Score(ScoreArgs),
    /// Bounds on γ for a foreground/background pair
    GammaReport(GammaReportArgs),
    /// Sample the Gibbs posterior with random-walk Metropolis
    GibbsSample(GibbsArgs),
    /// Run an experiment protocol from a JSON spec
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
struct CsvArgs {
    /// Input CSVs have a header row
    #[arg(long)]
    header: bool,

    /// Cell text that marks a missing value (empty cells by default)
    #[arg(long, default_value = "")]
    na_token: String,
}

#[derive(Debug, Clone, Args, Serialize)]
struct PairArgs {
    /// Foreground CSV, one sample per row
    #[arg(short = 'f', long, visible_alias = "fg")]
    foreground: PathBuf,

    /// Background CSV; omit for plain PPCA
    #[arg(short = 'b', long, visible_alias = "bg")]
    background: Option<PathBuf>,

    #[command(flatten)]
    csv: CsvArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
struct GammaArgs {
    /// Contrast weight γ′ = γ m / n; the closed form needs γ′ < 1
    #[arg(long, default_value_t = 0.0, conflicts_with = "gamma_raw")]
    gamma_prime: f64,

    /// Raw contrast weight γ, used instead of --gamma-prime
    #[arg(long)]
    gamma_raw: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
enum ProjectMode {
    PosteriorMean,
    Orthonormal,
}

#[derive(Debug, Args, Serialize)]
struct FitArgs {
    #[command(flatten)]
    pair: PairArgs,

    /// Latent dimension
    #[arg(short = 'd', long, default_value_t = 2)]
    latent_dim: usize,

    #[command(flatten)]
    gamma: GammaArgs,

    /// Projection stored with the model for later `transform` calls
    #[arg(long, value_enum, default_value_t = ProjectMode::PosteriorMean)]
    project_mode: ProjectMode,

    /// Model JSON path (stdout when omitted)
    #[arg(short = 'o', long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct FitMissingArgs {
    #[command(flatten)]
    fit: FitArgs,

    /// Adam step size
    #[arg(long, default_value_t = 1e-2)]
    step_size: f64,

    /// Iteration cap
    #[arg(long, default_value_t = 2000)]
    max_iters: usize,

    /// Stop once every gradient entry is below this
    #[arg(long, default_value_t = 1e-5)]
    grad_tol: f64,

    /// Lower limit for σ²
    #[arg(long, default_value_t = 1e-6)]
    sigma2_floor: f64,

    /// Write the objective trace as JSON here
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct TransformArgs {
    /// Model JSON written by `fit` or `fit-missing`
    #[arg(short = 'm', long)]
    model: PathBuf,

    /// Samples to project (raw scale)
    #[arg(short = 'i', long)]
    input: PathBuf,

    /// Projection; defaults to the one stored in the model
    #[arg(long, value_enum)]
    mode: Option<ProjectMode>,

    #[command(flatten)]
    csv: CsvArgs,

    /// Latent CSV path (stdout when omitted)
    #[arg(short = 'o', long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ImputeArgs {
    /// Model JSON written by `fit` or `fit-missing`
    #[arg(short = 'm', long)]
    model: PathBuf,

    /// CSV with missing cells
    #[arg(short = 'i', long)]
    input: PathBuf,

    #[command(flatten)]
    csv: CsvArgs,

    /// Completed CSV path (stdout when omitted)
    #[arg(short = 'o', long)]
    output: Option<PathBuf>,

    /// Also write per-cell conditional standard deviations here
    #[arg(long)]
    stdev_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct GenerateArgs {
    /// Model JSON written by `fit` or `fit-missing`
    #[arg(short = 'm', long)]
    model: PathBuf,

    /// Number of samples
    #[arg(short = 'n', long, default_value_t = 100)]
    count: usize,

    /// Return W z + μ without the isotropic noise term
    #[arg(long)]
    no_noise: bool,

    /// Output CSV path (stdout when omitted)
    #[arg(short = 'o', long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ScoreArgs {
    /// Model JSON written by `fit` or `fit-missing`
    #[arg(short = 'm', long)]
    model: PathBuf,

    /// Held-out samples (raw scale; missing cells are marginalized)
    #[arg(short = 'i', long)]
    input: PathBuf,

    #[command(flatten)]
    csv: CsvArgs,
}

#[derive(Debug, Args, Serialize)]
struct GammaReportArgs {
    /// Foreground CSV, one sample per row
    #[arg(short = 'f', long, visible_alias = "fg")]
    foreground: PathBuf,

    /// Background CSV
    #[arg(short = 'b', long, visible_alias = "bg")]
    background: PathBuf,

    #[command(flatten)]
    csv: CsvArgs,

    /// Latent dimension
    #[arg(short = 'd', long, default_value_t = 2)]
    latent_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Pcpca,
    Cpca,
}

#[derive(Debug, Args, Serialize)]
struct GibbsArgs {
    #[command(flatten)]
    pair: PairArgs,

    /// Latent dimension
    #[arg(short = 'd', long, default_value_t = 1)]
    latent_dim: usize,

    #[command(flatten)]
    gamma: GammaArgs,

    /// Parameter space: PCPCA (W, σ²) or a CPCA subspace
    #[arg(long, value_enum, default_value_t = Kind::Pcpca)]
    kind: Kind,

    /// Total iterations, burn-in included
    #[arg(long, default_value_t = 5000)]
    n_samples: usize,

    /// Iterations discarded while the step size adapts
    #[arg(long, default_value_t = 1000)]
    burn_in: usize,

    /// Keep every k-th draw after burn-in
    #[arg(long, default_value_t = 1)]
    thinning: usize,

    /// Tempering w of the Gibbs posterior
    #[arg(long, default_value_t = 1.0)]
    learning_rate_w: f64,

    /// Initial random-walk step relative to each coordinate's scale
    #[arg(long, default_value_t = 0.1)]
    proposal_scale: f64,

    /// Acceptance rate targeted during burn-in
    #[arg(long, default_value_t = 0.3)]
    target_accept: f64,

    /// Chain JSON path (stdout when omitted)
    #[arg(short = 'o', long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ExperimentArgs {
    /// Experiment spec JSON
    #[arg(short = 'c', long)]
    config: PathBuf,

    /// Directory for report.json and report.csv
    #[arg(short = 'o', long, default_value = ".")]
    outdir: PathBuf,

    /// Override the spec's repetition count
    #[arg(long)]
    repetitions: Option<usize>,

    /// Use --seed instead of the seed stored in the spec
    #[arg(long)]
    override_seed: bool,
}

/// Anything that ends a run early, with its exit code.
#[derive(Debug)]
enum Failure {
    Core(PcpcaError),
    Usage(String),
}

impl From<PcpcaError> for Failure {
    fn from(e: PcpcaError) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    fn kind(&self) -> &'static str {
        match self {
            Failure::Core(e) => e.kind(),
            Failure::Usage(_) => "argument",
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::Usage(m) => m.clone(),
        }
    }

    fn exit_code(&self) -> u8 {
        use std::io::ErrorKind;
        let Failure::Core(e) = self else { return 2 };
        match e {
            PcpcaError::InfeasibleGamma { .. } => 3,
            PcpcaError::Argument(_)
            | PcpcaError::Config(_)
            | PcpcaError::Parse { .. }
            | PcpcaError::RaggedRow { .. }
            | PcpcaError::EmptyColumn { .. }
            | PcpcaError::EmptySample { .. }
            | PcpcaError::NotCentered
            | PcpcaError::Json(_)
            | PcpcaError::Csv(_) => 2,
            PcpcaError::Io(io) if matches!(io.kind(), ErrorKind::NotFound | ErrorKind::PermissionDenied) => 2,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let code = failure.exit_code();
            eprintln!("error: {}", failure.message());
            let json = serde_json::json!({
                "error": {
                    "kind": failure.kind(),
                    "message": failure.message(),
                    "exit_code": code,
                }
            });
            eprintln!("{json}");
            ExitCode::from(code)
        }
    }
}
