use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate input: zero-norm token at frame {frame}, index {index}")]
    ZeroNormToken { frame: usize, index: usize },

    #[error("training diverged at step {step}: {what} is not finite")]
    Divergence { step: usize, what: String },

    #[error("gradient check failed: worst relative error {worst_rel_error:.3e} at {parameter}")]
    GradientCheck {
        parameter: String,
        worst_rel_error: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::Validation(format!($($arg)*))
    };
}
pub(crate) use invalid;
