//! Synthesis backbone: phoneme encoder, speaker conditioning, duration
//! predictor, length regulator, and mel decoder.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nnprim::layers::{sinusoidal_pe, Conv1d, Embedding, FftBlock, LayerNorm, Linear};
use crate::nnprim::{ParamStore, Tape, Tensor, Var};

const DURATION_KERNEL: usize = 3;

/// Speaker information injected after the phoneme encoder. Both variants
/// carry embeddings in the reference encoder's output space and pass through
/// the same learned bridge into the backbone width.
pub enum Conditioning {
    /// One speaker embedding per phoneme position, `L×out_dim`.
    PerPhoneme(Var),
    /// A single utterance-level speaker vector, `1×out_dim`, replicated to
    /// every position.
    Utterance(Var),
}

pub struct Backbone {
    emb: Embedding,
    enc_blocks: Vec<FftBlock>,
    /// Projects speaker embeddings into the backbone width; absent when the
    /// two widths already agree, so conditioning is then a plain addition.
    bridge: Option<Linear>,
    dur_conv1: Conv1d,
    dur_ln1: LayerNorm,
    dur_conv2: Conv1d,
    dur_ln2: LayerNorm,
    dur_out: Linear,
    dec_blocks: Vec<FftBlock>,
    mel_out: Linear,
    hidden: usize,
    n_phonemes: usize,
}

impl Backbone {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Backbone> {
        let mut enc_blocks = Vec::with_capacity(cfg.encoder_blocks);
        for i in 0..cfg.encoder_blocks {
            enc_blocks.push(FftBlock::new(
                store,
                &format!("backbone.encoder{i}"),
                cfg.hidden,
                cfg.n_heads,
                cfg.hidden * cfg.ffn_mult,
                (cfg.ffn_kernel1, cfg.ffn_kernel2),
                rng,
            )?);
        }
        let mut dec_blocks = Vec::with_capacity(cfg.decoder_blocks);
        for i in 0..cfg.decoder_blocks {
            dec_blocks.push(FftBlock::new(
                store,
                &format!("backbone.decoder{i}"),
                cfg.hidden,
                cfg.n_heads,
                cfg.hidden * cfg.ffn_mult,
                (cfg.ffn_kernel1, cfg.ffn_kernel2),
                rng,
            )?);
        }
        let bridge = (cfg.out_dim != cfg.hidden)
            .then(|| Linear::new(store, "backbone.bridge", cfg.out_dim, cfg.hidden, rng));
        Ok(Backbone {
            emb: Embedding::new(store, "backbone.phoneme_emb", cfg.n_phonemes, cfg.hidden, rng),
            enc_blocks,
            bridge,
            dur_conv1: Conv1d::new(store, "backbone.duration.conv1", DURATION_KERNEL, cfg.hidden, cfg.hidden, rng)?,
            dur_ln1: LayerNorm::new(store, "backbone.duration.ln1", cfg.hidden),
            dur_conv2: Conv1d::new(store, "backbone.duration.conv2", DURATION_KERNEL, cfg.hidden, cfg.hidden, rng)?,
            dur_ln2: LayerNorm::new(store, "backbone.duration.ln2", cfg.hidden),
            dur_out: Linear::new(store, "backbone.duration.out", cfg.hidden, 1, rng),
            dec_blocks,
            mel_out: Linear::new(store, "backbone.mel_out", cfg.hidden, cfg.n_mels, rng),
            hidden: cfg.hidden,
            n_phonemes: cfg.n_phonemes,
        })
    }

    /// Embed a phoneme sequence, add position encoding, and run the encoder
    /// blocks. Returns `L×hidden`.
    pub fn encode_phonemes(&self, tape: &mut Tape, phonemes: &[usize]) -> Result<Var> {
        if phonemes.is_empty() {
            return Err(Error::InvalidInput("empty phoneme sequence".into()));
        }
        if let Some(&bad) = phonemes.iter().find(|&&p| p >= self.n_phonemes) {
            return Err(Error::InvalidInput(format!(
                "phoneme id {bad} out of range (vocabulary size {})",
                self.n_phonemes
            )));
        }
        let e = self.emb.apply(tape, phonemes)?;
        // Embeddings are scaled by sqrt(hidden) before the position encoding
        // is added (Transformer convention); without it the unit-amplitude
        // sinusoids drown out phoneme identity and every encoder output row
        // leans toward a shared, position-dominated direction.
        let e = tape.scale(e, (self.hidden as f64).sqrt());
        let pe = tape.constant(sinusoidal_pe(phonemes.len(), self.hidden));
        let mut h = tape.add(e, pe)?;
        for blk in &self.enc_blocks {
            h = blk.apply(tape, h)?;
        }
        Ok(h)
    }

    /// Add speaker embeddings onto the encoded phonemes (through the bridge
    /// when widths differ).
    pub fn condition(&self, tape: &mut Tape, encoded: Var, speaker: &Conditioning) -> Result<Var> {
        let l_len = tape.value(encoded).rows();
        let addend = match *speaker {
            Conditioning::PerPhoneme(v) => {
                if tape.value(v).rows() != l_len {
                    return Err(Error::ShapeMismatch {
                        op: "condition",
                        detail: format!(
                            "{} speaker rows for {} phoneme positions",
                            tape.value(v).rows(),
                            l_len
                        ),
                    });
                }
                self.bridged(tape, v)?
            }
            Conditioning::Utterance(v) => {
                if tape.value(v).rows() != 1 {
                    return Err(Error::ShapeMismatch {
                        op: "condition",
                        detail: format!("utterance vector has {} rows", tape.value(v).rows()),
                    });
                }
                let b = self.bridged(tape, v)?;
                tape.repeat_rows(b, &[l_len])?
            }
        };
        tape.add(encoded, addend)
    }

    fn bridged(&self, tape: &mut Tape, v: Var) -> Result<Var> {
        match &self.bridge {
            Some(b) => b.apply(tape, v),
            None => {
                if tape.value(v).cols() != self.hidden {
                    return Err(Error::ShapeMismatch {
                        op: "condition",
                        detail: format!(
                            "speaker embedding width {} vs backbone width {}",
                            tape.value(v).cols(),
                            self.hidden
                        ),
                    });
                }
                Ok(v)
            }
        }
    }

    /// Log-domain duration predictions, `L×1`. The model regresses
    /// `ln(d + 1)`; see [`durations_from_log`] for the inverse.
    pub fn predict_log_durations(&self, tape: &mut Tape, conditioned: Var) -> Result<Var> {
        let h = self.dur_conv1.apply(tape, conditioned)?;
        let h = tape.relu(h);
        let h = self.dur_ln1.apply(tape, h)?;
        let h = self.dur_conv2.apply(tape, h)?;
        let h = tape.relu(h);
        let h = self.dur_ln2.apply(tape, h)?;
        self.dur_out.apply(tape, h)
    }

    /// Expand each phoneme position to its duration in frames.
    pub fn regulate_length(&self, tape: &mut Tape, conditioned: Var, durations: &[usize]) -> Result<Var> {
        tape.repeat_rows(conditioned, durations)
    }

    /// Decode the expanded sequence to a mel spectrogram, `T×n_mels`.
    pub fn decode(&self, tape: &mut Tape, expanded: Var) -> Result<Var> {
        let t_len = tape.value(expanded).rows();
        let pe = tape.constant(sinusoidal_pe(t_len, self.hidden));
        let mut h = tape.add(expanded, pe)?;
        for blk in &self.dec_blocks {
            h = blk.apply(tape, h)?;
        }
        self.mel_out.apply(tape, h)
    }
}

/// Invert log-domain duration predictions to frame counts:
/// `max(1, round(exp(p) − 1))`, so every phoneme gets at least one frame.
pub fn durations_from_log(pred: &Tensor) -> Vec<usize> {
    pred.data()
        .iter()
        .map(|&p| (p.exp() - 1.0).round().max(1.0) as usize)
        .collect()
}
