//! Grounded-fusion vision-language training testbed.
//!
//! A self-contained CPU implementation of grounded multimodal pre-training:
//! a reverse-mode autodiff tensor core, ViT-style patch and text encoders,
//! a shared grounded dictionary with top-K token selection and a two-term
//! quantization loss, a fusion Transformer whose attention mask routes all
//! cross-modal flow through the grounded tokens, span-MLM / ITM / VCL
//! objectives, a deterministic synthetic shape-world corpus, a
//! curriculum-aware training loop, and retrieval / zero-shot / ablation
//! evaluation tooling.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod export;
pub mod fusion;
pub mod gradcheck;
pub mod grounding;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::CoreError;
pub use scalar::{Dtype, Scalar};
pub use tensor::{Graph, Tensor};

/// Reads the `GF_THREADS` override; `None` means "use all available cores".
pub fn configured_threads() -> Option<usize> {
    std::env::var("GF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Builds the global rayon pool honoring `GF_THREADS`. Safe to call more
/// than once; only the first call has an effect.
pub fn init_thread_pool() {
    if let Some(n) = configured_threads() {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
