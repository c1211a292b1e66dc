use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NptnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NptnError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("invalid architecture: {0}")]
    Spec(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {loss}")]
    Numeric {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("dataset file not found: {}", .0.display())]
    MissingData(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl NptnError {
    /// Process exit status for a command that failed with this error:
    /// 2 for configuration, 3 for data, 4 for a numeric abort, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            NptnError::Config { .. } | NptnError::Spec(_) => 2,
            NptnError::MissingData(_) | NptnError::Format { .. } => 3,
            NptnError::Numeric { .. } => 4,
            _ => 1,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        NptnError::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        NptnError::Contract(msg.into())
    }

    pub(crate) fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        NptnError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NptnError::Io {
            path: path.into(),
            source,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let cfg = NptnError::Config {
            key: "k".into(),
            msg: "m".into(),
        };
        assert_eq!(cfg.exit_code(), 2);
        assert_eq!(NptnError::Spec("s".into()).exit_code(), 2);
        assert_eq!(NptnError::MissingData("x".into()).exit_code(), 3);
        assert_eq!(NptnError::format("p", "m").exit_code(), 3);
        let nan = NptnError::Numeric {
            epoch: 0,
            batch: 1,
            loss: f64::NAN,
        };
        assert_eq!(nan.exit_code(), 4);
        assert_eq!(NptnError::shape("s").exit_code(), 1);
    }
}
