use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("integration diverged at t = {instant}")]
    Divergence { instant: f64 },

    #[error("realization {index} diverged at t = {instant}")]
    RealizationDivergence { index: usize, instant: f64 },

    #[error("matrix is not symmetric (relative asymmetry {asymmetry:e})")]
    Asymmetric { asymmetry: f64 },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("mode {mode} is a rigid-body mode (omega = {omega:e}); damping ratio undefined")]
    RigidBodyMode { mode: usize, omega: f64 },

    #[error("channel {channel} has constant truth; NRMSE normalizer is zero")]
    ConstantChannel { channel: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("parse error in entry `{entry}`: {reason}")]
    Parse { entry: String, reason: String },

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("missing artifact: expected {what} at {}", path.display())]
    MissingArtifact { what: &'static str, path: PathBuf },

    #[error("config: cannot read {}: {source}", path.display())]
    ConfigMissing {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("config: malformed document: {0}")]
    ConfigMalformed(String),

    #[error("config: unknown key `{0}`")]
    ConfigUnknownKey(String),

    #[error("config: invalid value for `{key}`: {reason}")]
    ConfigInvalid { key: String, reason: String },

    #[error("output directory is locked by another run: {}", path.display())]
    Locked { path: PathBuf },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
