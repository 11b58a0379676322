use thiserror::Error;

/// Errors produced by the simulation and optimization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its documented constraints.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Grid shapes of two operands disagree.
    #[error("shape mismatch: {context} (expected {expected:?}, got {got:?})")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },

    /// A footprint violates its invariants (e.g. blocked inlet/outlet columns).
    #[error("invalid footprint: {0}")]
    InvalidFootprint(String),

    /// Non-finite values were produced by a numerical routine.
    #[error("numerical failure: {0}")]
    NonFinite(String),

    /// A binary or JSON input could not be parsed.
    #[error("parse error at byte {offset}: {what}")]
    Parse { offset: u64, what: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 1 usage, 2 input parse, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 1,
            Error::NonFinite(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
