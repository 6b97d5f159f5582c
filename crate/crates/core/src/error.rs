use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph; call reset_grads first")]
    BackwardTwice,

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("attention map has zero total mass")]
    ZeroMass,

    #[error("referring region is empty")]
    EmptyRegion,

    #[error("invalid visual prompt: {0}")]
    InvalidPrompt(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceOverflow { len: usize, max: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("cannot place {objects} objects on a {grid}x{grid} grid")]
    GridTooSmall { grid: usize, objects: usize },

    #[error("malformed {what}: {msg}")]
    Parse { what: &'static str, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(what: &'static str, msg: impl ToString) -> Self {
        Error::Parse {
            what,
            msg: msg.to_string(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::ZeroMass | Error::Divergence { .. }
        )
    }
}
