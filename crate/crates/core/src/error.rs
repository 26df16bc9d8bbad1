use thiserror::Error;

/// Which of the two adapter factors an error refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorSide {
    A,
    B,
}

impl std::fmt::Display for FactorSide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FactorSide::A => f.write_str("A"),
            FactorSide::B => f.write_str("B"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric positive definite: {reason}")]
    NonSpdInput { reason: String },

    #[error("matrix is ill-conditioned: eigenvalue ratio {ratio:e} below {threshold:e}")]
    IllConditioned { ratio: f64, threshold: f64 },

    #[error("factor {side} is rank deficient (singular value ratio {ratio:e})")]
    RankDeficient { side: FactorSide, ratio: f64 },

    #[error("factor {side} has zero Frobenius norm")]
    ZeroFactor { side: FactorSide },

    #[error("invalid learning rate {eta}: {reason}")]
    InvalidEta { eta: f64, reason: &'static str },

    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("non-finite entry in {what}")]
    NonFinite { what: &'static str },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("numerical failure at step {step}: {source}")]
    Numerical {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
