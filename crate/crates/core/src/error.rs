//! Crate-wide error type.

use std::fmt;
use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Filesystem problem while reading or writing an artifact.
    Io { path: String, source: io::Error },
    /// Manifest or report JSON could not be parsed.
    Json { path: String, source: serde_json::Error },
    /// A blob file's length disagrees with the shape declared in the manifest.
    BlobShape { layer: String, expected: usize, actual: usize },
    /// Layer kind string in a manifest is not one of the supported kinds.
    UnknownKind { layer: String, kind: String },
    /// Consecutive layer shapes do not compose, or a layer's tensors do not
    /// match its declared hyperparameters.
    Shape { layer: String, detail: String },
    /// IDX dataset file is malformed (bad magic, truncated, count mismatch).
    Idx { path: String, detail: String },
    /// A caller-supplied argument is outside its documented domain.
    InvalidArg(String),
    /// Training loss became non-finite; the caller should discard the round.
    Diverged { epoch: usize },
    /// Run configuration is missing a field or holds an out-of-range value.
    Config(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
            Error::Json { path, source } => write!(f, "invalid json in {path}: {source}"),
            Error::BlobShape { layer, expected, actual } => write!(
                f,
                "layer {layer}: blob holds {actual} values but shape requires {expected}"
            ),
            Error::UnknownKind { layer, kind } => {
                write!(f, "layer {layer}: unknown kind {kind:?}")
            }
            Error::Shape { layer, detail } => write!(f, "layer {layer}: {detail}"),
            Error::Idx { path, detail } => write!(f, "idx file {path}: {detail}"),
            Error::InvalidArg(msg) => write!(f, "invalid argument: {msg}"),
            Error::Diverged { epoch } => {
                write!(f, "training loss became non-finite in epoch {epoch}")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            Error::Json { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<String>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
