use thiserror::Error;

/// Errors raised by estimation, simulation and data ingestion.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty data: {0}")]
    EmptyData(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("missing covariate column `{0}`")]
    MissingColumn(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no measured outcomes in cluster `{0}`")]
    NoMeasuredOutcomes(String),
    #[error("degenerate denominator in cluster `{0}`")]
    DegenerateDenominator(String),
    #[error("arm {0} has no clusters")]
    EmptyArm(u8),
    #[error("pairing: {0}")]
    Pairing(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
