//! Training loop: per-step shuffle augmentation, loss assembly over a small
//! batch, Adam updates on the warmup schedule, and checkpoint-based
//! resumability. Every step is a pure function of (seed, step, corpus), so
//! trajectories are bit-reproducible and resume exactly.

mod checkpoint;
mod losses;

pub use checkpoint::{
    adam_config, check_config_compatible, load_checkpoint, require_mode, save_checkpoint,
    snapshot, Checkpoint, Restored, CKPT_MAGIC, CKPT_VERSION,
};
pub use losses::{duration_loss, log_duration_targets, masked_mae};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::frontend::{shuffle_by_phoneme, UtteranceRecord};
use crate::model::Model;
use crate::nnprim::optim::Adam;
use crate::nnprim::{ParamStore, Phase, Tape};

/// Loss components of one optimization step, batch-averaged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub mel_loss: f64,
    pub duration_loss: f64,
    pub phoneme_ce: f64,
    pub speaker_ce: f64,
    pub total: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub losses: LossBundle,
    pub lr: f64,
}

/// Column names for [`StepRecord::log_line`], emitted once as a comment.
pub const LOG_HEADER: &str = "# step total mel dur pce sce lr";

impl StepRecord {
    /// Space-separated decimals in `LOG_HEADER` order.
    pub fn log_line(&self) -> String {
        let l = &self.losses;
        format!(
            "{} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6e}",
            self.step, l.total, l.mel_loss, l.duration_loss, l.phoneme_ce, l.speaker_ce, self.lr
        )
    }
}

/// The RNG for one training step, derived from `(seed, step)` alone so a
/// resumed run consumes exactly the randomness an uninterrupted one would.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

pub struct Trainer {
    config: Config,
    store: ParamStore,
    model: Model,
    adam: Adam,
    records: Vec<UtteranceRecord>,
    step: u64,
}

fn validate_records(config: &Config, records: &[UtteranceRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Usage("training requires a non-empty corpus".into()));
    }
    let m = &config.model;
    for rec in records {
        rec.check_consistent()?;
        if rec.speaker_id >= m.n_speakers {
            return Err(Error::InvalidInput(format!(
                "utterance {}: speaker {} outside configured {} speakers",
                rec.utt_id, rec.speaker_id, m.n_speakers
            )));
        }
        if let Some(&bad) = rec.phonemes.iter().find(|&&p| p >= m.n_phonemes) {
            return Err(Error::InvalidInput(format!(
                "utterance {}: phoneme {bad} outside configured {} phonemes",
                rec.utt_id, m.n_phonemes
            )));
        }
        if rec.mel.n_mels() != m.n_mels {
            return Err(Error::InvalidInput(format!(
                "utterance {}: {} mel bands, model expects {}",
                rec.utt_id,
                rec.mel.n_mels(),
                m.n_mels
            )));
        }
    }
    Ok(())
}

impl Trainer {
    /// Fresh training state with parameters initialized from the run seed.
    pub fn new(config: Config, records: Vec<UtteranceRecord>) -> Result<Trainer> {
        config.validate()?;
        validate_records(&config, &records)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let model = Model::new(&mut store, &config.model, &mut rng)?;
        let adam = Adam::new(adam_config(&config), &store);
        Ok(Trainer { config, store, model, adam, records, step: 0 })
    }

    /// Continue a run from a checkpoint, using the config embedded in it.
    pub fn resume(ckpt: &Checkpoint, records: Vec<UtteranceRecord>) -> Result<Trainer> {
        let Restored { config, step, store, model, adam } = ckpt.restore()?;
        validate_records(&config, &records)?;
        Ok(Trainer { config, store, model, adam, records, step })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn finished(&self) -> bool {
        self.step >= self.config.train.max_steps
    }

    pub fn snapshot(&self) -> Checkpoint {
        snapshot(&self.config, self.step, &self.store, &self.adam)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_checkpoint(path, &self.snapshot())
    }

    /// Run one optimization step: draw a batch, shuffle each reference by
    /// phoneme, forward with teacher-forced durations, average the weighted
    /// losses, backpropagate, and apply Adam.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.step + 1;
        let tw = self.config.train.clone();
        let mut rng = step_rng(tw.seed, step);
        let batch: Vec<usize> =
            (0..tw.batch_size).map(|_| rng.random_range(0..self.records.len())).collect();

        let mut tape = Tape::new(&self.store, Phase::Train);
        let mut mean = LossBundle {
            mel_loss: 0.0,
            duration_loss: 0.0,
            phoneme_ce: 0.0,
            speaker_ce: 0.0,
            total: 0.0,
        };
        let mut batch_total = None;
        for &i in &batch {
            let rec = &self.records[i];
            // The reference the encoder sees is shuffled; the mel the decoder
            // must reproduce is the original. The frame classifier is graded
            // against the shuffled tags, which track the rearranged frames.
            let (ref_mel, ref_tags) = shuffle_by_phoneme(&rec.mel, &rec.alignment, &mut rng)?;
            let out =
                self.model.forward(&mut tape, &ref_mel.frames, &rec.phonemes, Some(&rec.durations))?;
            let target = tape.constant(rec.mel.frames.clone());
            let frame_ones = vec![1.0; rec.t_len()];
            let mel_l = masked_mae(&mut tape, out.mel, target, &frame_ones)?;
            let dur_l = duration_loss(&mut tape, out.log_durations, &rec.durations)?;
            let pce = tape.cross_entropy(out.reference.phoneme_logits, &ref_tags, &frame_ones)?;
            let sce = tape.cross_entropy(out.reference.speaker_logits, &[rec.speaker_id], &[1.0])?;
            mean.mel_loss += tape.value(mel_l).item();
            mean.duration_loss += tape.value(dur_l).item();
            mean.phoneme_ce += tape.value(pce).item();
            mean.speaker_ce += tape.value(sce).item();
            let wm = tape.scale(mel_l, tw.w_mel);
            let wd = tape.scale(dur_l, tw.w_duration);
            let wp = tape.scale(pce, tw.w_phoneme);
            let ws = tape.scale(sce, tw.w_speaker);
            let md = tape.add(wm, wd)?;
            let ps = tape.add(wp, ws)?;
            let utt_total = tape.add(md, ps)?;
            batch_total = Some(match batch_total {
                None => utt_total,
                Some(acc) => tape.add(acc, utt_total)?,
            });
        }
        let loss = tape.scale(batch_total.expect("batch_size >= 1"), 1.0 / tw.batch_size as f64);
        mean.mel_loss /= tw.batch_size as f64;
        mean.duration_loss /= tw.batch_size as f64;
        mean.phoneme_ce /= tw.batch_size as f64;
        mean.speaker_ce /= tw.batch_size as f64;
        mean.total = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let stat_updates = tape.take_stat_updates();
        drop(tape);

        self.store.zero_grad();
        self.store.accumulate(grads);
        // Batch members forward sequentially from the same pre-step
        // statistics; the last queued update per buffer wins.
        for (buf, value) in stat_updates {
            *self.store.buffer_mut(buf) = value;
        }
        let lr = self.adam.step(&mut self.store)?;
        self.step = step;
        Ok(StepRecord { step, losses: mean, lr })
    }
}
