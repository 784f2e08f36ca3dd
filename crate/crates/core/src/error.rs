use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("target Gram matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:.3e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("target Gram matrix has numerical rank {rank}, which exceeds embedding dimension {dim}")]
    Rank { rank: usize, dim: usize },

    #[error("diagonal entry {index} of target Gram matrix is {value}, expected 1")]
    Diagonal { index: usize, value: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no anchor in the batch has a positive")]
    EmptyAnchor,

    #[error("shape mismatch: {0}")]
    Mismatch(String),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
