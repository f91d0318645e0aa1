use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for the crate. Variants are grouped so callers can
/// distinguish validation problems (bad inputs, bad configuration) from
/// runtime failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label out of range: {0}")]
    LabelRange(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing input file: {0}")]
    MissingInput(PathBuf),

    #[error("malformed {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error("embedding integrity violated: {0}")]
    Integrity(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn parse(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (flags, manifests, configs,
    /// missing files) rather than failures during computation. The CLI maps
    /// these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::LabelRange(_)
                | Error::Config(_)
                | Error::MissingInput(_)
                | Error::Parse { .. }
        )
    }
}
