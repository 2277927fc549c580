use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("parameter sets are misaligned: {0}")]
    Misaligned(String),

    #[error("solver exceeded {max_steps} steps; reached t = {t}")]
    Divergence { t: f64, max_steps: usize },

    #[error("solver state became non-finite at t = {t}; {hint}")]
    Instability { t: f64, hint: &'static str },

    #[error("ordering violation: {0}")]
    Ordering(String),

    #[error("channel {channel} has no observations")]
    UnusableChannel { channel: String },

    #[error("log-signature window needs at least 2 points, got {0}")]
    Window(usize),

    #[error("{}:{line}: {msg}", file.display())]
    Parse { file: PathBuf, line: usize, msg: String },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("loss function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("sequence {id}: {source}")]
    Sequence {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("epoch {epoch}, batch {batch}: {source}")]
    Training {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub fn in_sequence(self, id: &str) -> Self {
        Error::Sequence { id: id.to_string(), source: Box::new(self) }
    }
}
