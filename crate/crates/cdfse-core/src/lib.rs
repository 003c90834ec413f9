//! Zero-shot speaker adaptation for a non-autoregressive text-to-speech
//! stack, built around content-dependent fine-grained speaker embeddings:
//! a reference encoder distills a mel reference into per-segment content
//! and speaker embeddings, a content-based attention aligns them to the
//! phoneme sequence being synthesized, and a feed-forward transformer
//! backbone renders mel frames conditioned on the result.
//!
//! Everything runs on a small self-contained f64 tape (reverse-mode
//! autodiff), deterministically for a given seed, at sizes that train on a
//! desktop CPU in minutes.

pub mod backbone;
pub mod config;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod model;
pub mod nnprim;
pub mod refattn;
pub mod refenc;
pub mod train;

pub use config::{Config, ConditioningMode, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::Model;
