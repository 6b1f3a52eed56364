use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot parse {context}: {source}")]
    Parse {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("unsupported schema_version {found} in {context} (expected {expected})")]
    SchemaVersion {
        context: String,
        found: u32,
        expected: u32,
    },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("duplicate tensor id `{0}`")]
    DuplicateTensor(String),

    #[error("unknown cost-table row `{0}`")]
    UnknownRow(String),

    #[error("missing {0} cost curve")]
    MissingCurve(&'static str),

    #[error("tensor `{0}` has no compression option assigned")]
    MissingOption(String),

    #[error("option {option} is incompatible with the cluster: {reason}")]
    IncompatibleOption { option: String, reason: String },

    #[error("search space of {needed} states exceeds the cap of {cap}")]
    CapExceeded { needed: u128, cap: u128 },
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }
}
