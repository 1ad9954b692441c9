use std::path::PathBuf;

/// Errors produced anywhere in the library.
///
/// The variants are grouped so callers (the CLI in particular) can map them
/// onto exit codes: configuration problems, data problems, and everything
/// else.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("unparsable image filename {}: {reason}", path.display())]
    Filename { path: PathBuf, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("weight load error for tensor `{tensor}`: {reason}")]
    WeightLoad { tensor: String, reason: String },

    #[error("non-finite loss in term `{term}` (value {value})")]
    NonFiniteLoss { term: String, value: f64 },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by an invalid configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }

    /// True for errors caused by malformed or missing input data.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Data(_) | Error::Filename { .. } | Error::Image { .. } | Error::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
