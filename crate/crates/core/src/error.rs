use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no equilibrium: mechanical power {mechanical:.6} pu exceeds static limit {limit:.6} pu")]
    NoEquilibrium { mechanical: f64, limit: f64 },

    #[error("simulation diverged at t = {time:.3} s: {reason}")]
    SimulationDiverged { time: f64, reason: String },

    #[error("plant randomization failed after {attempts} attempts")]
    RandomizationFailed { attempts: usize },

    #[error("series too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("degenerate channel `{0}`: standard deviation is zero")]
    DegenerateChannel(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("singular design matrix: {0}")]
    SingularDesign(String),

    #[error("model not identifiable: {0}")]
    Identifiability(String),

    #[error("insufficient history: need {needed} samples, got {got}")]
    InsufficientHistory { needed: usize, got: usize },

    #[error("criterion undefined: {0}")]
    UndefinedCriterion(String),

    #[error("forecast diverged on trajectory {trajectory}: the fitted model is unstable in closed loop")]
    ForecastDiverged { trajectory: usize },

    #[error("no valid order in the scanned range")]
    NoValidOrder,

    #[error("lag diagnostic failed: {0}")]
    DiagnosticFailed(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged { epoch: usize },

    #[error("normalization undefined: truth is identically zero")]
    UndefinedNormalization,

    #[error("zero variance input")]
    ZeroVariance,

    #[error("empty input")]
    EmptyInput,

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}
