//! SCRAM: sparse attention for 2D fields driven by PatchMatch.
//!
//! Each query pixel's best-matching key pixels are located with a randomized
//! jump-flood PatchMatch in `O(n log n)`. Small windows around those matches
//! are expanded, and softmax attention is evaluated only over the resulting
//! key sets. Exact attention, importance sampling and Metropolis-Hastings
//! estimators, synthetic generators, and a timing harness live alongside.

pub mod attention;
pub mod cli;
pub mod error;
pub mod field;
pub mod mc;
pub mod patchmatch;
pub mod rng;
pub mod forward;
pub mod harness;
pub mod io;
pub mod synth;

pub use attention::{
    compatibility, full_attention, full_attention_weights, nonlocal_mean, softmax_row, top_k_exact,
    top_k_mode_exact, AttentionOutput, AttentionWeights,
};
pub use error::{Result, ScramError};
pub use field::{FieldImage, PixelIndex, Shape};
pub use patchmatch::{
    is_index_valid, patchmatch_pass, top_kappa, verify_fields, NeighbourField, PatchMatchConfig,
    ValidityPolicy,
};
pub use forward::{
    causal_mask_positions, expand_neighbourhood, scram_forward, sparse_attention_output, ScramConfig,
    SparseIndexSets,
};

/// Runs `f` on a dedicated rayon pool with `threads` workers (0 = default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
