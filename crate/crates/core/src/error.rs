use thiserror::Error;

/// Errors produced by the filtering laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("coefficient sigma2 is singular at t = {t}")]
    SingularCoefficient { t: f64 },

    #[error("state diverged at step {step}{}", particle.map(|p| format!(" (particle {p})")).unwrap_or_default())]
    Divergence { step: usize, particle: Option<usize> },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unsupported input: {0}")]
    Unsupported(String),

    #[error("total mass is zero")]
    ZeroMass,

    #[error("matrix is not positive semidefinite: {0}")]
    NotPositiveSemidefinite(String),

    #[error("Riccati integration blew up at step {step}")]
    RiccatiBlowUp { step: usize },

    #[error("invalid configuration at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
