//! A desk-scale streaming inference runtime built around a watch-think-speak
//! loop: per-chunk structured reasoning over a sliding visual window, with
//! generated tokens retained as permanent semantic memory.
//!
//! - [`stream_core`]: domain types, the step-output grammar, stream scripts.
//! - [`rcsm_cache`]: the reasoning-compressed streaming memory with
//!   chunk-granular eviction and in-place compaction.
//! - [`toy_decoder`]: a deterministic fixed-weight causal attention decoder
//!   and the recomputation oracle for cache correctness.
//! - [`wts_engine`]: the evict / prefill / decode-and-parse streaming loop.
//! - [`rewards`]: verifiable format, time, and accuracy rewards.
//! - [`grpo`]: group-relative policy optimization over streaming rollouts.
//! - [`synthetic`]: seeded script generation and the evidence-onset
//!   training environment.
//! - [`verify`]: the eviction-equals-recomputation verification suite.

pub mod grpo;
pub mod rcsm_cache;
pub mod rewards;
pub mod stream_core;
pub mod synthetic;
pub mod toy_decoder;
pub mod verify;
pub mod wts_engine;
