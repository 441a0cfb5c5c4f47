use thiserror::Error;

/// Errors surfaced by fallible operations. Contract violations (shape
/// mismatches, out-of-range timesteps) panic instead; see the module docs.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is invalid. The message names the offending key.
    #[error("configuration error: {0}")]
    Config(String),

    /// A canvas pixel ended up with zero merge weight.
    #[error("coverage error: pixel (row {row}, col {col}) has zero weight sum")]
    Coverage { row: usize, col: usize },

    /// A canvas contained NaN/Inf during sampling.
    #[error("non-finite value in level {level} canvas at timestep {timestep}")]
    NonFinite { level: usize, timestep: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) => 2,
            Error::NonFinite { .. } => 3,
            Error::Coverage { .. } => 3,
            Error::Io { .. } => 2,
        }
    }
}
