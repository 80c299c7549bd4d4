use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("matrix decomposition failed: {0}")]
    Decomposition(String),

    #[error("matrix has numerical rank {rank}, full row rank {required} is required")]
    RankDeficient { rank: usize, required: usize },

    #[error("batch normalization over an empty batch")]
    EmptyBatch,

    #[error("invalid targets: {0}")]
    InvalidTargets(String),

    #[error("input distinguishability fails for rows {i} and {j}: ‖x_i‖² − x_iᵀx_j = {margin:e}")]
    NotDistinguishable { i: usize, j: usize, margin: f64 },

    #[error("witness construction did not reach strict diagonal dominance after {doublings} doublings (worst row margin {worst_margin:e})")]
    WitnessNotFound { doublings: u32, worst_margin: f64 },

    #[error("size cap exceeded: {0}")]
    SizeCap(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("features lost full row rank after the perturbation (rank {rank} < n = {n}); widen the last hidden layer (m_H + 1 ≥ n) or use a different seed")]
    RankLoss { rank: usize, n: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
