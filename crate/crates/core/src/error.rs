use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("decimation mismatch at level {level}: {diff}")]
    DecimationMismatch { level: usize, diff: String },
    #[error("eigensolver failed: {0}")]
    Eigen(String),
    #[error("symbol undefined at eigenvalues {0:?}")]
    SymbolUndefined(Vec<f64>),
    #[error("no admissible pairs: {0}")]
    NoAdmissiblePairs(String),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
