//! Full model: reference encoder + reference attention + synthesis backbone,
//! with one forward pass shared by training and inference.

use rand::Rng;

use crate::backbone::{durations_from_log, Backbone, Conditioning};
use crate::config::{ConditioningMode, ModelConfig};
use crate::error::{Error, Result};
use crate::nnprim::{ParamStore, Phase, Tape, Tensor, Var};
use crate::refattn::{FineGrainedEmbedding, RefAttention};
use crate::refenc::{RefEncoder, ReferenceEncoding};

pub struct Model {
    pub refenc: RefEncoder,
    pub refattn: RefAttention,
    pub backbone: Backbone,
    mode: ConditioningMode,
}

/// Every intermediate a caller might need: training losses read the logits
/// and predictions, inspection tools read the attention, synthesis reads the
/// mel and the frame counts that produced it.
pub struct ForwardOutputs {
    pub reference: ReferenceEncoding,
    /// Present in fine-grained mode, absent under utterance-level conditioning.
    pub attention: Option<FineGrainedEmbedding>,
    pub encoded: Var,
    pub conditioned: Var,
    /// Log-domain duration predictions, `L×1`.
    pub log_durations: Var,
    /// Frame counts actually used for length regulation.
    pub durations: Vec<usize>,
    /// Predicted mel, `T×n_mels`.
    pub mel: Var,
}

/// Plain-tensor synthesis result, detached from any tape.
pub struct Synthesis {
    pub mel: Tensor,
    pub durations: Vec<usize>,
    /// Attention over reference columns (fine-grained mode only), `L×S`.
    pub attention: Option<Tensor>,
}

impl Model {
    /// Construct all components regardless of mode, drawing from `rng` in a
    /// fixed order: the two conditioning paths then share every other weight,
    /// and checkpoints for one architecture always carry the same tensor set.
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Model> {
        cfg.validate()?;
        Ok(Model {
            refenc: RefEncoder::new(store, cfg, rng)?,
            refattn: RefAttention::new(store, cfg, rng),
            backbone: Backbone::new(store, cfg, rng)?,
            mode: cfg.mode,
        })
    }

    pub fn mode(&self) -> ConditioningMode {
        self.mode
    }

    /// Forward pass in the model's configured mode. `durations` supplies
    /// teacher-forced frame counts; `None` falls back to the duration
    /// predictor's own output.
    pub fn forward(
        &self,
        tape: &mut Tape,
        reference_mel: &Tensor,
        phonemes: &[usize],
        durations: Option<&[usize]>,
    ) -> Result<ForwardOutputs> {
        self.forward_mode(tape, self.mode, reference_mel, phonemes, durations)
    }

    /// Forward pass with an explicit conditioning mode, for comparing the two
    /// paths over identical weights.
    pub fn forward_mode(
        &self,
        tape: &mut Tape,
        mode: ConditioningMode,
        reference_mel: &Tensor,
        phonemes: &[usize],
        durations: Option<&[usize]>,
    ) -> Result<ForwardOutputs> {
        if let Some(d) = durations {
            if d.len() != phonemes.len() {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    detail: format!("{} durations for {} phonemes", d.len(), phonemes.len()),
                });
            }
        }
        let reference = self.refenc.encode(tape, reference_mel)?;
        let encoded = self.backbone.encode_phonemes(tape, phonemes)?;
        let (attention, conditioning) = match mode {
            ConditioningMode::Cdfse => {
                let fg = self.refattn.apply(tape, encoded, &reference.local)?;
                let cond = Conditioning::PerPhoneme(fg.values);
                (Some(fg), cond)
            }
            ConditioningMode::Cls => (None, Conditioning::Utterance(reference.utterance_vector)),
        };
        let conditioned = self.backbone.condition(tape, encoded, &conditioning)?;
        let log_durations = self.backbone.predict_log_durations(tape, conditioned)?;
        let durations = match durations {
            Some(d) => d.to_vec(),
            None => durations_from_log(tape.value(log_durations)),
        };
        let expanded = self.backbone.regulate_length(tape, conditioned, &durations)?;
        let mel = self.backbone.decode(tape, expanded)?;
        Ok(ForwardOutputs {
            reference,
            attention,
            encoded,
            conditioned,
            log_durations,
            durations,
            mel,
        })
    }

    /// Inference: synthesize a mel for `phonemes` in the reference's voice,
    /// with durations from the predictor.
    pub fn synthesize(
        &self,
        store: &ParamStore,
        reference_mel: &Tensor,
        phonemes: &[usize],
    ) -> Result<Synthesis> {
        let mut tape = inference_tape(store);
        let out = self.forward(&mut tape, reference_mel, phonemes, None)?;
        Ok(Synthesis {
            mel: tape.value(out.mel).clone(),
            durations: out.durations,
            attention: out.attention.map(|fg| tape.value(fg.weights).clone()),
        })
    }
}

/// Tape for inference passes. The reference branch keeps the normalization
/// granularity it was trained with: each batchnorm normalizes by the
/// statistics of the reference it was handed, and no running statistics are
/// touched. Running averages pool every speaker seen in training, so dividing
/// a single-speaker reference by them re-introduces exactly the per-speaker
/// shift the downstream heads expect to have been removed. Determinism is
/// unaffected — the statistics are a pure function of the input.
pub fn inference_tape(store: &ParamStore) -> Tape<'_> {
    Tape::new(store, Phase::Train).without_stat_updates()
}
