use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report, tagged by category.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("build error: {0}")]
    Build(String),
    #[error("divergence error: {0}")]
    Divergence(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("load error: {path}: {reason}")]
    Load { path: PathBuf, reason: String },
    #[error("io error: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short category tag, used as the CLI error prefix.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Label(_) => "label",
            Error::Contract(_) => "contract",
            Error::Format(_) => "format",
            Error::Split(_) => "split",
            Error::Partition(_) => "partition",
            Error::Build(_) => "build",
            Error::Divergence(_) => "divergence",
            Error::Config(_) => "config",
            Error::Load { .. } => "load",
            Error::Io { .. } => "io",
        }
    }

    /// Prefixes the message with `context`, keeping the category.
    pub fn context(self, context: impl std::fmt::Display) -> Self {
        let wrap = |m: String| format!("{context}: {m}");
        match self {
            Error::Shape(m) => Error::Shape(wrap(m)),
            Error::Label(m) => Error::Label(wrap(m)),
            Error::Contract(m) => Error::Contract(wrap(m)),
            Error::Format(m) => Error::Format(wrap(m)),
            Error::Split(m) => Error::Split(wrap(m)),
            Error::Partition(m) => Error::Partition(wrap(m)),
            Error::Build(m) => Error::Build(wrap(m)),
            Error::Divergence(m) => Error::Divergence(wrap(m)),
            Error::Config(m) => Error::Config(wrap(m)),
            Error::Load { path, reason } => Error::Load {
                path,
                reason: wrap(reason),
            },
            e @ Error::Io { .. } => e,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}

macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}

pub(crate) use contract_err;
pub(crate) use shape_err;
