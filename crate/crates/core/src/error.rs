use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside schedule range [{t_end}, {t_start}]")]
    Range { t: f64, t_end: f64, t_start: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("buffer warm-up: need {needed} entries, have {available}")]
    WarmUp { needed: usize, available: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("rank-deficient regression along the {axis} axis: {detail}")]
    RankDeficient { axis: &'static str, detail: String },

    #[error("step {index}: {source}")]
    Step {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Remote(#[from] RemoteError),

    #[error("unsupported format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_step(self, index: usize) -> Self {
        match self {
            e @ Error::Step { .. } => e,
            e => Error::Step {
                index,
                source: Box::new(e),
            },
        }
    }
}

/// Failures of the remote denoiser client. Each protocol failure mode is a
/// distinct variant.
#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("connection failure: {0}")]
    Connection(#[source] std::io::Error),

    #[error("protocol version mismatch: got magic {0:?}")]
    Version([u8; 4]),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },

    #[error("server error (status {status}): {message}")]
    Server { status: u8, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),
}
