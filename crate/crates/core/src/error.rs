use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("singular linear transform: |U[{index},{index}]| = {value:e} is below 1e-12")]
    Singular { index: usize, value: f64 },

    #[error("degenerate chart Jacobian: smallest singular value {smallest:e}")]
    DegenerateJacobian { smallest: f64 },

    #[error("antipodal points have no unique logarithm")]
    Antipodal,

    #[error("Mollweide auxiliary angle did not converge for latitude {latitude}")]
    ProjectionDiverged { latitude: f64 },

    #[error("integration diverged at t = {time} (state {state:?})")]
    IntegrationDiverged { time: f64, state: [f64; 3] },

    #[error("training diverged: {consecutive} consecutive non-finite losses in {phase} phase at epoch {epoch}")]
    TrainingDiverged {
        phase: &'static str,
        epoch: usize,
        consecutive: usize,
    },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    InvalidConfig(Vec<String>),

    #[error("checkpoint config hash mismatch: stored {stored}, expected {expected}")]
    ConfigHashMismatch { stored: String, expected: String },

    #[error("malformed {what}: {reason}")]
    Malformed { what: &'static str, reason: String },

    #[error("missing CSV column `{0}`")]
    MissingColumn(String),

    #[error("{path}: {cause}")]
    Io {
        path: PathBuf,
        cause: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }
}
