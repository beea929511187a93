use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("scene contains no points")]
    EmptyScene,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("click region {region} exceeds session object count {max}")]
    InvalidRegion { region: usize, max: usize },

    #[error("region {0} has no query to fuse")]
    MissingRegion(usize),

    #[error("label {label} outside 0..={max}")]
    InvalidLabel { label: usize, max: usize },

    #[error("invalid click: {0}")]
    InvalidClick(String),

    #[error("session {0} not found")]
    NotFound(String),

    #[error("click sequence is empty, nothing to undo")]
    NothingToUndo,

    #[error("unknown strategy {name:?} (registered: {known})")]
    UnknownStrategy { name: String, known: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }
}
