use std::path::PathBuf;

/// Errors raised across the pipeline.
///
/// `Contract` covers precondition and invariant violations (bad shapes,
/// invalid configs, inadmissible geometry). `Io` and `Format` cover the
/// file boundary.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    /// True for errors that originate at the filesystem / decoding boundary.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Format { .. } | Error::Image(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Early-return a contract violation when `cond` does not hold.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
