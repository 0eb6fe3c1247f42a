use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: left has {left} points, right has {right}")]
    GridMismatch { left: usize, right: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("operator is not self-adjoint (max kernel asymmetry {asymmetry:e})")]
    NotSelfAdjoint { asymmetry: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("autocorrelation operator norm {norm} is not below 1; stationary series diverges")]
    Divergent { norm: f64 },

    /// A precondition on sizes or parameters does not hold (for example n < 2).
    #[error("domain error: {0}")]
    Domain(String),

    /// No admissible truncation: the empirical eigenvalue at `index` (1-based)
    /// does not exceed the floor.
    #[error("estimation impossible: eigenvalue {index} ({eigenvalue:e}) does not exceed floor {floor:e}")]
    EigenFloor {
        index: usize,
        eigenvalue: f64,
        floor: f64,
    },

    #[error("infinite spectral gap: eigenvalues {index} and {} are tied or increasing", index + 1)]
    InfiniteGap { index: usize },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
