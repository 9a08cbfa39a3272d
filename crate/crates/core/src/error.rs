use std::path::PathBuf;

/// Every failure the library can report.
///
/// Variants are grouped by the exit-code contract of the CLI: everything
/// except [`Error::Usage`] is a domain error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{op}: non-finite value ({detail})")]
    Numeric { op: &'static str, detail: String },

    #[error("{op}: contract violated: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("invalid model spec at {layer}: {msg}")]
    Validation { layer: String, msg: String },

    #[error("{what}: malformed input at byte offset {offset}: {msg}")]
    Format {
        what: &'static str,
        offset: u64,
        msg: String,
    },

    #[error("{what}: unsupported format version {found} (this build reads version {supported})")]
    Version {
        what: &'static str,
        found: u32,
        supported: u32,
    },

    #[error("{op}: inconsistent data: {msg}")]
    Consistency { op: &'static str, msg: String },

    #[error("{op}: value out of range: {msg}")]
    Range { op: &'static str, msg: String },

    #[error("{op}: model lacks required capability: {msg}")]
    Capability { op: &'static str, msg: String },

    #[error("no confident samples: no prediction exceeded alpha = {alpha}; lower alpha to select pseudo labels")]
    NoConfidentSamples { alpha: f64 },

    #[error("cannot ingest dataset `{entry}`: {msg}")]
    Ingestion { entry: String, msg: String },

    #[error("usage: {0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by how the program was invoked rather than by the data.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
