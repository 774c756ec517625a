use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("capacity error: {what} needs {needed}, cap is {cap}")]
    Capacity { what: &'static str, needed: u128, cap: u128 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("non-finite value at step {step}: {detail}; offending pair: {pair}")]
    NonFinite { step: u64, detail: String, pair: String },

    #[error("singular design (n={n}, seed={seed}): {detail}")]
    SingularDesign { n: usize, seed: u64, detail: String },

    #[error("malformed metrics at line {line}: {detail}")]
    Metrics { line: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }
}
