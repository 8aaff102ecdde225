use std::io;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown label {id} at pixel ({x}, {y})")]
    Label { id: u8, x: usize, y: usize },
    #[error("need at least two distinct labels, found {found}")]
    InsufficientClasses { found: usize },
    #[error("average precision undefined: {0}")]
    UndefinedAp(String),
    #[error("index out of bounds: {0}")]
    Index(String),
    #[error("need at least {required} matches, got {got}")]
    InsufficientMatches { required: usize, got: usize },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("non-finite gradient in tensor `{name}`")]
    NonFiniteGradient { name: String },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
