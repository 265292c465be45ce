//! Crate-wide error type.
//!
//! Every variant maps to a stable machine-readable class string so the CLI can
//! report failures on stderr in a form scripts can match on.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Shape or channel contract between components violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no valid voxels: {0}")]
    NoValidVoxels(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported version {found} in {path}")]
    BadVersion { path: PathBuf, found: u32 },

    #[error("unsupported dtype code {found} in {path}")]
    BadDtype { path: PathBuf, found: u32 },

    #[error("payload short in {path}: expected {expected} bytes, found {found}")]
    PayloadShort { path: PathBuf, expected: usize, found: usize },

    #[error("header short in {path}")]
    HeaderShort { path: PathBuf },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable class name printed by the CLI.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Contract(_) => "contract",
            Error::NoValidVoxels(_) => "no-valid-voxels",
            Error::EmptyMask(_) => "empty-mask",
            Error::Usage(_) => "usage",
            Error::Config(_) => "config",
            Error::BadMagic { .. } => "bad-magic",
            Error::BadVersion { .. } => "bad-version",
            Error::BadDtype { .. } => "bad-dtype",
            Error::PayloadShort { .. } => "payload-short",
            Error::HeaderShort { .. } => "header-short",
            Error::Malformed { .. } => "malformed",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::InvalidArgument(format!($($arg)*)) };
}

macro_rules! contract {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}

pub(crate) use contract;
pub(crate) use invalid;
