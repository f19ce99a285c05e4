use thiserror::Error;

/// Errors raised by the attention kernels and samplers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScramError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite value at scalar offset {offset}")]
    NonFinite { offset: usize },

    #[error("softmax row has no finite entry")]
    DegenerateRow,

    #[error("normalizer is zero for query {query}")]
    DegenerateNormalizer { query: usize },

    #[error("kappa {kappa} exceeds the number of keys {n}")]
    KappaTooLarge { kappa: usize, n: usize },

    #[error("query {query}: only {found} of {kappa} indices satisfy separation {separation}")]
    InfeasibleSeparation {
        query: usize,
        kappa: usize,
        separation: usize,
        found: usize,
    },

    #[error("no key index satisfies the validity policy at query position {position}")]
    InfeasiblePolicy { position: usize },

    #[error("causal mask requires query and key fields of the same shape")]
    MaskShape,

    #[error("{n} pixels exceeds the exact-oracle limit of {limit}")]
    OracleTooLarge { n: usize, limit: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, ScramError>;
