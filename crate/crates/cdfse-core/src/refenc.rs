//! Reference encoder: digests a reference mel spectrogram into frame-level
//! content features plus time-aligned pairs of local content/speaker
//! embeddings at a configurable downsampling granularity.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nnprim::layers::{sinusoidal_pe, BatchNorm1d, Conv1d, FftBlock, Linear};
use crate::nnprim::{ParamStore, Tape, Tensor, Var};

/// Number of local embedding rows produced for a `t_len`-frame reference at
/// downsampling factor `factor`: `ceil(t_len / factor)`.
pub fn downsampled_len(t_len: usize, factor: usize) -> usize {
    t_len.div_ceil(factor)
}

/// Conv stack that halves the time axis `pool_stages` times and projects the
/// survivors to `out_dim` with a Tanh squash. The first four pools interleave
/// with the convs (one each); stages five and six, used only by the 64×
/// variant, run back-to-back after the stack.
pub struct DownsampleEncoder {
    convs: Vec<(Conv1d, BatchNorm1d)>,
    fc: Linear,
    inline_pools: usize,
    tail_pools: usize,
}

impl DownsampleEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<DownsampleEncoder> {
        let inline_pools = cfg.pool_stages.min(4);
        let mut convs = Vec::with_capacity(4);
        let mut cin = in_dim;
        for (i, &cout) in cfg.downsample_channels.iter().enumerate() {
            let conv = Conv1d::new(
                store,
                &format!("{prefix}.conv{i}"),
                cfg.downsample_kernel,
                cin,
                cout,
                rng,
            )?;
            let bn = BatchNorm1d::new(store, &format!("{prefix}.bn{i}"), cout);
            convs.push((conv, bn));
            cin = cout;
        }
        Ok(DownsampleEncoder {
            convs,
            fc: Linear::new(store, &format!("{prefix}.fc"), cin, cfg.out_dim, rng),
            inline_pools,
            tail_pools: cfg.pool_stages - inline_pools,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, (conv, bn)) in self.convs.iter().enumerate() {
            h = conv.apply(tape, h)?;
            h = tape.relu(h);
            h = bn.apply(tape, h)?;
            if i < self.inline_pools {
                h = tape.avgpool1d(h);
            }
        }
        for _ in 0..self.tail_pools {
            h = tape.avgpool1d(h);
        }
        let h = self.fc.apply(tape, h)?;
        Ok(tape.tanh(h))
    }
}

/// Aligned local embeddings, one row per `factor`-frame stretch of the
/// reference: `content` describes what is being said there, `speaker` how
/// this voice says it. Both are `S×out_dim` with entries in (−1, 1).
#[derive(Debug, Clone, Copy)]
pub struct LocalEmbeddings {
    pub content: Var,
    pub speaker: Var,
}

/// Everything the reference encoder extracts from one reference utterance.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceEncoding {
    /// Frame-level content features, `T×content_dim`.
    pub content_feats: Var,
    /// Per-frame phoneme logits off `content_feats`, `T×n_phonemes`.
    pub phoneme_logits: Var,
    pub local: LocalEmbeddings,
    /// Mean of the local speaker rows, `1×out_dim`.
    pub utterance_vector: Var,
    /// Speaker logits off the utterance vector, `1×n_speakers`.
    pub speaker_logits: Var,
}

pub struct RefEncoder {
    prenet: Vec<(Conv1d, BatchNorm1d)>,
    content_in: Linear,
    content_blocks: Vec<FftBlock>,
    phoneme_head: Linear,
    content_down: DownsampleEncoder,
    speaker_down: DownsampleEncoder,
    speaker_head: Linear,
    n_mels: usize,
    content_dim: usize,
    factor: usize,
}

impl RefEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<RefEncoder> {
        cfg.validate()?;
        let mut prenet = Vec::with_capacity(2);
        let mut cin = cfg.n_mels;
        for i in 0..2 {
            let conv = Conv1d::new(
                store,
                &format!("refenc.prenet{i}.conv"),
                cfg.prenet_kernel,
                cin,
                cfg.prenet_channels,
                rng,
            )?;
            let bn = BatchNorm1d::new(store, &format!("refenc.prenet{i}.bn"), cfg.prenet_channels);
            prenet.push((conv, bn));
            cin = cfg.prenet_channels;
        }
        let content_in = Linear::new(store, "refenc.content_in", cfg.prenet_channels, cfg.content_dim, rng);
        let mut content_blocks = Vec::with_capacity(cfg.content_blocks);
        for i in 0..cfg.content_blocks {
            content_blocks.push(FftBlock::new(
                store,
                &format!("refenc.content{i}"),
                cfg.content_dim,
                cfg.n_heads,
                cfg.content_dim * cfg.ffn_mult,
                (cfg.ffn_kernel1, cfg.ffn_kernel2),
                rng,
            )?);
        }
        let phoneme_head = Linear::new(store, "refenc.phoneme_head", cfg.content_dim, cfg.n_phonemes, rng);
        let content_down = DownsampleEncoder::new(store, "refenc.content_down", cfg.content_dim, cfg, rng)?;
        let speaker_down = DownsampleEncoder::new(store, "refenc.speaker_down", cfg.prenet_channels, cfg, rng)?;
        let speaker_head = Linear::new(store, "refenc.speaker_head", cfg.out_dim, cfg.n_speakers, rng);
        Ok(RefEncoder {
            prenet,
            content_in,
            content_blocks,
            phoneme_head,
            content_down,
            speaker_down,
            speaker_head,
            n_mels: cfg.n_mels,
            content_dim: cfg.content_dim,
            factor: cfg.factor(),
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn encode(&self, tape: &mut Tape, mel: &Tensor) -> Result<ReferenceEncoding> {
        if mel.rows() == 0 {
            return Err(Error::InvalidInput("reference mel has no frames".into()));
        }
        if mel.cols() != self.n_mels {
            return Err(Error::ShapeMismatch {
                op: "encode_reference",
                detail: format!("{} mel bands, expected {}", mel.cols(), self.n_mels),
            });
        }
        let t_len = mel.rows();
        let mut p = tape.constant(mel.clone());
        for (conv, bn) in &self.prenet {
            p = conv.apply(tape, p)?;
            p = tape.relu(p);
            p = bn.apply(tape, p)?;
        }
        let mut c = self.content_in.apply(tape, p)?;
        let pe = tape.constant(sinusoidal_pe(t_len, self.content_dim));
        c = tape.add(c, pe)?;
        for blk in &self.content_blocks {
            c = blk.apply(tape, c)?;
        }
        let phoneme_logits = self.phoneme_head.apply(tape, c)?;
        let content = self.content_down.apply(tape, c)?;
        let speaker = self.speaker_down.apply(tape, p)?;
        let utterance_vector = tape.mean_rows(speaker);
        let speaker_logits = self.speaker_head.apply(tape, utterance_vector)?;
        Ok(ReferenceEncoding {
            content_feats: c,
            phoneme_logits,
            local: LocalEmbeddings { content, speaker },
            utterance_vector,
            speaker_logits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ConditioningMode;
    use crate::nnprim::Phase;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(pool_stages: usize) -> ModelConfig {
        ModelConfig {
            n_phonemes: 5,
            n_speakers: 3,
            n_mels: 8,
            mode: ConditioningMode::Cdfse,
            pool_stages,
            prenet_channels: 6,
            prenet_kernel: 3,
            content_blocks: 1,
            content_dim: 8,
            downsample_channels: [4, 4, 6, 6],
            downsample_kernel: 3,
            out_dim: 10,
            attention_dim: 4,
            hidden: 8,
            encoder_blocks: 1,
            decoder_blocks: 1,
            n_heads: 2,
            ffn_mult: 2,
            ffn_kernel1: 3,
            ffn_kernel2: 1,
        }
    }

    fn encode_t(pool_stages: usize, t_len: usize) -> (ModelConfig, ParamStore, Vec<Vec<f64>>) {
        let cfg = tiny_cfg(pool_stages);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let enc = RefEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        let mel = Tensor::randn(&[t_len, cfg.n_mels], &mut rng);
        let mut tape = Tape::new(&store, Phase::Eval);
        let out = enc.encode(&mut tape, &mel).unwrap();
        let shapes = vec![
            tape.value(out.content_feats).shape().to_vec(),
            tape.value(out.phoneme_logits).shape().to_vec(),
            tape.value(out.local.content).shape().to_vec(),
            tape.value(out.local.speaker).shape().to_vec(),
            tape.value(out.utterance_vector).shape().to_vec(),
            tape.value(out.speaker_logits).shape().to_vec(),
        ]
        .into_iter()
        .map(|s| s.into_iter().map(|d| d as f64).collect())
        .collect();
        (cfg, store, shapes)
    }

    #[test]
    fn output_shapes_follow_the_ceil_law() {
        // (pool_stages, T) across every supported factor, including T that
        // does not divide the factor and T=1.
        for &(stages, t_len) in &[(0, 7), (2, 9), (4, 33), (4, 1), (6, 130), (6, 64)] {
            let factor = 1usize << stages;
            let s_len = downsampled_len(t_len, factor);
            let (cfg, _store, shapes) = encode_t(stages, t_len);
            assert_eq!(shapes[0], &[t_len as f64, cfg.content_dim as f64]);
            assert_eq!(shapes[1], &[t_len as f64, cfg.n_phonemes as f64]);
            assert_eq!(shapes[2], &[s_len as f64, cfg.out_dim as f64]);
            assert_eq!(shapes[3], &[s_len as f64, cfg.out_dim as f64]);
            assert_eq!(shapes[4], &[1.0, cfg.out_dim as f64]);
            assert_eq!(shapes[5], &[1.0, cfg.n_speakers as f64]);
        }
    }

    #[test]
    fn local_embeddings_are_tanh_bounded() {
        let cfg = tiny_cfg(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = RefEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        // Large-amplitude input to push the FC well outside (-1, 1) pre-squash.
        let mut mel = Tensor::randn(&[24, cfg.n_mels], &mut rng);
        mel.data_mut().iter_mut().for_each(|v| *v *= 30.0);
        let mut tape = Tape::new(&store, Phase::Eval);
        let out = enc.encode(&mut tape, &mel).unwrap();
        for &var in &[out.local.content, out.local.speaker] {
            assert!(tape.value(var).data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn utterance_vector_is_mean_of_local_speaker_rows() {
        let cfg = tiny_cfg(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = RefEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        let mel = Tensor::randn(&[21, cfg.n_mels], &mut rng);
        let mut tape = Tape::new(&store, Phase::Eval);
        let out = enc.encode(&mut tape, &mel).unwrap();
        let speaker = tape.value(out.local.speaker);
        let s_len = speaker.rows();
        let mut mean = vec![0.0; speaker.cols()];
        for r in 0..s_len {
            for (m, v) in mean.iter_mut().zip(speaker.row(r)) {
                *m += v / s_len as f64;
            }
        }
        for (a, b) in tape.value(out.utterance_vector).data().iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn training_gradients_reach_the_prenet() {
        let cfg = tiny_cfg(2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let enc = RefEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        let mel = Tensor::randn(&[16, cfg.n_mels], &mut rng);
        let mut tape = Tape::new(&store, Phase::Train);
        let out = enc.encode(&mut tape, &mel).unwrap();
        // Sum every head so all three branches contribute to the loss.
        let a = tape.sum(out.phoneme_logits);
        let b = tape.sum(out.local.content);
        let c = tape.sum(out.speaker_logits);
        let ab = tape.add(a, b).unwrap();
        let loss = tape.add(ab, c).unwrap();
        let grads = tape.backward(loss).unwrap();
        let prenet_w = store.lookup("refenc.prenet0.conv.weight").unwrap();
        let g = grads.get(prenet_w).expect("prenet gradient present");
        assert!(g.data().iter().any(|v| v.abs() > 1e-12));
        assert!(!tape.take_stat_updates().is_empty());
    }

    #[test]
    fn malformed_references_are_rejected() {
        let cfg = tiny_cfg(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let enc = RefEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        let mut tape = Tape::new(&store, Phase::Eval);
        let empty = Tensor::zeros(&[0, cfg.n_mels]);
        assert!(enc.encode(&mut tape, &empty).unwrap_err().is_invalid_input());
        let wrong_bands = Tensor::zeros(&[4, cfg.n_mels + 1]);
        assert!(matches!(
            enc.encode(&mut tape, &wrong_bands).unwrap_err(),
            Error::ShapeMismatch { .. }
        ));
    }
}
