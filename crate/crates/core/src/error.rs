use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = OclError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum OclError {
    /// A configuration value is invalid. `field` names the offending entry
    /// using the dotted path of the run config (e.g. `data.path`).
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("format error in {what}: {reason}")]
    Format { what: String, reason: String },

    #[error("non-finite value at step {step}, {location}: {detail}")]
    Numeric {
        step: usize,
        location: String,
        detail: String,
    },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl OclError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        OclError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn format(what: impl Into<String>, reason: impl Into<String>) -> Self {
        OclError::Format {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OclError::Io {
            path: path.into(),
            source,
        }
    }
}
