use thiserror::Error;

/// Errors produced by the simulator.
#[derive(Debug, Error)]
pub enum QepsError {
    /// A function argument violated its precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A scenario or receiver configuration is invalid. `field` is the
    /// dotted config path of the offending entry.
    #[error("invalid config `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl QepsError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        QepsError::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        QepsError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, QepsError>;
