use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{field}: {message}")]
    Range { field: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("track: {0}")]
    Track(String),
}

impl ConfigError {
    pub fn range(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Range { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("arc length {s} outside track domain [{lo}, {hi}]")]
    ArcLength { s: f64, lo: f64, hi: f64 },
}

#[derive(Debug, Error)]
pub enum SafeSetError {
    #[error("iteration {iteration} was not successful and cannot enter the safe set")]
    Unsuccessful { iteration: usize },
    #[error("trajectory is empty")]
    Empty,
    #[error("safe set is empty")]
    NoStates,
    #[error("malformed safe-set file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("baseline lap failed: {0}")]
    BaselineFailed(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    SafeSet(#[from] SafeSetError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
