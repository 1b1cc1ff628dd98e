use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dispersive-regime guard violated: {0}")]
    DispersiveRegime(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("no solution: {0}")]
    NoSolution(String),

    #[error("invalid parameter `{key}`: {reason}")]
    InvalidParameter { key: &'static str, reason: String },

    #[error("hamiltonian assembly failed: {0}")]
    Assembly(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("integrator accuracy: {0}")]
    IntegratorAccuracy(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid observable: {0}")]
    InvalidObservable(String),

    #[error("invalid factor selector: {0}")]
    InvalidSelector(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("insufficient resolution: {0}")]
    Resolution(String),

    #[error("ill-conditioned regression: {0}")]
    Conditioning(String),

    #[error("uninformative measurement set: {0}")]
    Informativeness(String),

    #[error("truncation guard: {0}")]
    Truncation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParameter { .. } => 2,
            Error::Truncation(_) | Error::InvalidDimension(_) | Error::DispersiveRegime(_) => 4,
            Error::Io(_) | Error::Json(_) => 1,
            _ => 3,
        }
    }
}
