use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("expected a scalar output, got shape {rows}x{cols}")]
    NonScalar { rows: usize, cols: usize },

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("every run in the sweep diverged")]
    SweepDiverged,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("initial energy {0:e} is below the normalisation threshold")]
    DegenerateEnergy(f64),

    #[error("integrator error is below floating-point noise at every step size")]
    BelowNoise,

    #[error("malformed file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("{}: unsupported {kind} version {found} (expected {expected})", path.display())]
    Version { path: PathBuf, kind: String, found: u32, expected: u32 },

    #[error("missing input: {0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
