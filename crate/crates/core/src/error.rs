use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no grid point with mode {mode} at step {step}")]
    ModeMissing { step: usize, mode: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("inadmissible decision: {0}")]
    Inadmissible(String),

    #[error("unsupported state space for bound constants: {0}")]
    UnsupportedBounds(String),

    #[error("missing cached artifacts (run without --no-train to build them): {0}")]
    MissingArtifact(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
