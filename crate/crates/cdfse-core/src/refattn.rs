//! Reference attention: routes each query phoneme to the stretches of the
//! reference that sound like it, and returns those stretches' speaker
//! embeddings as a per-phoneme speaker description.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nnprim::layers::Linear;
use crate::nnprim::{ParamStore, Tape, Var};
use crate::refenc::LocalEmbeddings;

/// Per-query-phoneme speaker embeddings plus the attention that produced them.
#[derive(Debug, Clone, Copy)]
pub struct FineGrainedEmbedding {
    /// One speaker embedding row per query position, `L×out_dim`.
    pub values: Var,
    /// Row-stochastic attention over reference columns, `L×S`.
    pub weights: Var,
}

/// Single-head scaled dot-product attention from query phonemes to local
/// reference embeddings. Queries and content keys are projected to a shared
/// `attention_dim`; the speaker values pass through unprojected so the output
/// stays in the local-embedding space. Keys carry no position encoding: a
/// match is by content, not by where it sits in the reference.
pub struct RefAttention {
    wq: Linear,
    wk: Linear,
}

/// Projection init gain. Full-gain Xavier puts the initial score spread well
/// past ±1, and because fresh encoder outputs are nearly parallel across
/// positions every query then ranks the segments identically — the softmax
/// sharpens that shared ranking into a per-utterance winner and the routing
/// gradient dies before content matching can form. Starting the projections
/// small keeps early attention near-uniform until the mel loss has a reason
/// to sharpen it.
const PROJECTION_GAIN: f64 = 0.05;

impl RefAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> RefAttention {
        RefAttention {
            wq: Linear::with_gain(store, "refattn.wq", cfg.hidden, cfg.attention_dim, PROJECTION_GAIN, rng),
            wk: Linear::with_gain(store, "refattn.wk", cfg.out_dim, cfg.attention_dim, PROJECTION_GAIN, rng),
        }
    }

    /// `queries` is the phoneme encoder output, `L×hidden`.
    pub fn apply(&self, tape: &mut Tape, queries: Var, local: &LocalEmbeddings) -> Result<FineGrainedEmbedding> {
        if tape.value(local.content).rows() == 0 {
            return Err(Error::InvalidInput(
                "reference produced no local embeddings to attend over".into(),
            ));
        }
        let q = self.wq.apply(tape, queries)?;
        let k = self.wk.apply(tape, local.content)?;
        let (values, weights) = tape.scaled_dot_attention(q, k, local.speaker)?;
        Ok(FineGrainedEmbedding { values, weights })
    }
}
