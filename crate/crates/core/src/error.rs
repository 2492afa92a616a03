use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    InvalidToken { id: usize, vocab_size: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("frozen state does not match input: {0}")]
    StaleFrozenState(String),

    #[error(
        "probe budget exceeded: {probes} probes requested, limit is {limit}; \
         shorten the prompt, use a smaller model, or raise the budget"
    )]
    ProbeBudget { probes: usize, limit: usize },

    #[error("layer {layer} out of range for a {n_layers}-layer model")]
    InvalidLayer { layer: usize, n_layers: usize },

    #[error("unsupported input: {0}")]
    Unsupported(String),

    #[error("stable rank undefined for an all-zero spectrum")]
    UndefinedRank,

    #[error("cannot decode the direction of a zero vector")]
    UndefinedDirection,

    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("steering alignment failed: {0}")]
    Alignment(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error("checksum mismatch: manifest says {expected:016x}, payload hashes to {actual:016x}")]
    Checksum { expected: u64, actual: u64 },

    #[error("unknown token {0:?} for the toy vocabulary")]
    UnknownWord(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by arithmetic rather than bad input data.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_) | Error::NoConvergence { .. } | Error::UndefinedRank | Error::UndefinedDirection
        )
    }
}
