use thiserror::Error;

use crate::missing::FitTrace;

pub type Result<T, E = PcpcaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PcpcaError {
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Row and column are 1-based, matching what a user sees in a spreadsheet.
    #[error("parse error at ({row},{col}): {message}")]
    Parse {
        row: usize,
        col: usize,
        message: String,
    },

    #[error("ragged csv: row {row} has {found} fields, expected {expected}")]
    RaggedRow {
        row: usize,
        found: usize,
        expected: usize,
    },

    #[error("column {column} has no observed cells")]
    EmptyColumn { column: usize },

    #[error("sample {sample} has no observed features")]
    EmptySample { sample: usize },

    #[error("data must be centered before covariance computations")]
    NotCentered,

    #[error("infeasible gamma {gamma}: {constraint}")]
    InfeasibleGamma { gamma: f64, constraint: String },

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("optimizer did not converge: {reason}")]
    NonConvergence {
        reason: String,
        trace: Box<FitTrace>,
    },

    #[error("sampler stuck: {0}")]
    SamplerStuck(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl PcpcaError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        PcpcaError::Argument(msg.into())
    }

    /// Short machine-readable tag used in error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            PcpcaError::Argument(_) => "argument",
            PcpcaError::Parse { .. } | PcpcaError::RaggedRow { .. } => "parse",
            PcpcaError::EmptyColumn { .. } | PcpcaError::EmptySample { .. } => "data",
            PcpcaError::NotCentered => "not_centered",
            PcpcaError::InfeasibleGamma { .. } => "infeasible_gamma",
            PcpcaError::RankDeficient(_) => "rank_deficient",
            PcpcaError::Numeric(_) => "numeric",
            PcpcaError::NonConvergence { .. } => "non_convergence",
            PcpcaError::SamplerStuck(_) => "sampler_stuck",
            PcpcaError::MetricUndefined(_) => "metric_undefined",
            PcpcaError::Config(_) => "config",
            PcpcaError::Io(_) => "io",
            PcpcaError::Json(_) => "json",
            PcpcaError::Csv(_) => "csv",
        }
    }
}
