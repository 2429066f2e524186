use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("noise level must be positive, got {0}")]
    ZeroSigma(f64),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no closed form for {0}; use the Monte Carlo estimator")]
    NoClosedForm(&'static str),

    #[error("conditional sampling infeasible: acceptance rate {rate:.3e} below floor {floor:.1e}")]
    Infeasible { rate: f64, floor: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("too few samples: need at least {need}, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u16, found: u16 },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("activation trace does not match this model: {0}")]
    StaleTrace(String),

    #[error("training diverged at step {step} (last good checkpoint: {last_good:?})")]
    Diverged {
        step: usize,
        last_good: Option<PathBuf>,
    },

    #[error("restorer returned a non-finite output at sampler step {step}")]
    SamplerNonFinite { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
