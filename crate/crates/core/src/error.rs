use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported Matérn order {0} (supported: 1, 2)")]
    UnsupportedMaternOrder(u32),

    #[error("invalid GP prior: {0}")]
    InvalidPrior(String),

    #[error("unstable realization: F has an eigenvalue with real part {0:e} >= 0")]
    UnstableRealization(f64),

    #[error("resonant frequency: F ± jωI is singular at ω = {0}")]
    ResonantFrequency(f64),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("model is already hyper-augmented")]
    AlreadyHyperAugmented,

    #[error("integration blow-up at interval {interval}")]
    IntegrationBlowUp { interval: usize },

    #[error("non-finite matrix exponential")]
    NonFiniteExponential,

    #[error("degenerate innovation covariance at node {0}")]
    DegenerateInnovation(usize),

    #[error("singular predicted covariance at node {0}")]
    SingularCovariance(usize),

    #[error("window too short: need at least {needed} samples, got {got}")]
    WindowTooShort { needed: usize, got: usize },

    #[error("objective blow-up: non-finite objective value")]
    ObjectiveBlowUp,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("window end t_i (node {end}) precedes the horizon length ({horizon} samples)")]
    WindowBeforeHorizon { end: usize, horizon: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("weight matrix `{0}` is not positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("{0} requires a linear base model")]
    RequiresLinearModel(&'static str),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
