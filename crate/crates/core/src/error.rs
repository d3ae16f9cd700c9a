use thiserror::Error;

/// Errors raised by the network construction, merging and data pipeline.
#[derive(Debug, Error)]
pub enum ReduError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("numerical divergence at layer {layer}: {detail}")]
    Divergence { layer: usize, detail: String },

    #[error("numerical degradation at layer {layer}, class {class}: {detail}")]
    Degradation {
        layer: usize,
        class: u32,
        detail: String,
    },

    #[error("inconsistent parameter: {0}")]
    InconsistentParameter(String),

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("checksum mismatch: expected {expected}, computed {computed}")]
    Checksum { expected: String, computed: String },

    #[error("unsupported container version: {0}")]
    Version(String),

    #[error("session {session}: {source}")]
    Session {
        session: usize,
        #[source]
        source: Box<ReduError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ReduError>;

impl ReduError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        ReduError::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        ReduError::Numerical(msg.into())
    }

    pub(crate) fn in_session(self, session: usize) -> Self {
        ReduError::Session {
            session,
            source: Box::new(self),
        }
    }
}
