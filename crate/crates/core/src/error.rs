use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("sampling degeneracy on prompt {prompt_id}: {duplicates} duplicate draws exhausted the retry cap of {retry_cap}")]
    SamplingDegeneracy {
        prompt_id: u64,
        duplicates: usize,
        retry_cap: usize,
    },
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("training diverged at step {step}: loss {loss} (initial {initial})")]
    Divergence { step: usize, loss: f64, initial: f64 },
    #[error("curation failure: {0}")]
    CurationFailure(String),
    #[error("schema version mismatch: {0}")]
    Versioning(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("config serialization error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
