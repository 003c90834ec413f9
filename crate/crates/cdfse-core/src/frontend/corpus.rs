use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::align::{save_alignment, AlignmentTrack};
use super::mel::{load_mel, save_mel, MelSpectrogram};
use crate::error::{Error, Result};
use crate::nnprim::Tensor;

/// Mel band count used throughout (both the extractor default and the
/// synthetic corpus).
pub const MEL_BANDS: usize = 80;

/// Recipe for a deterministic synthetic corpus that lives directly in mel
/// space. Every frame of phoneme `p` spoken by speaker `s` is
/// `e_p + o_s + α·g_{s,p} + σ·noise`, built from seeded standard normals:
/// `e_p` says *what* is spoken, `o_s` shifts *who* speaks, and `g_{s,p}` is a
/// speaker-specific per-phoneme signature — the content-dependent part a
/// fine-grained embedding should recover.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpusSpec {
    pub n_speakers: usize,
    pub n_phonemes: usize,
    pub utterances_per_speaker: usize,
    /// Phonemes per utterance, inclusive bounds.
    pub utterance_len_range: (usize, usize),
    /// Frames per phoneme instance, inclusive bounds. Each phoneme also gets
    /// a characteristic base duration inside this range, jittered by ±1 per
    /// instance, so durations are predictable from identity.
    pub duration_range: (usize, usize),
    /// α — weight of the per-(speaker,phoneme) signature.
    pub content_strength: f64,
    /// σ — per-frame i.i.d. noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            n_speakers: 4,
            n_phonemes: 12,
            utterances_per_speaker: 50,
            utterance_len_range: (4, 7),
            duration_range: (8, 16),
            content_strength: 1.0,
            noise_std: 0.05,
            seed: 7,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_speakers", self.n_speakers),
            ("n_phonemes", self.n_phonemes),
            ("utterances_per_speaker", self.utterances_per_speaker),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Config { field, detail: "must be positive".into() });
            }
        }
        let (lmin, lmax) = self.utterance_len_range;
        if lmin == 0 || lmin > lmax {
            return Err(Error::Config {
                field: "utterance_len_range",
                detail: format!("invalid range [{lmin}, {lmax}]"),
            });
        }
        let (dmin, dmax) = self.duration_range;
        if dmin == 0 || dmin > dmax {
            return Err(Error::Config {
                field: "duration_range",
                detail: format!("invalid range [{dmin}, {dmax}]"),
            });
        }
        if lmax > 1 && self.n_phonemes < 2 {
            return Err(Error::Config {
                field: "n_phonemes",
                detail: "need at least 2 phonemes to avoid adjacent repeats".into(),
            });
        }
        if self.content_strength < 0.0 || self.noise_std < 0.0 {
            return Err(Error::Config {
                field: "content_strength",
                detail: "strength and noise must be non-negative".into(),
            });
        }
        Ok(())
    }
}

/// One utterance: labels, ground-truth alignment, and the mel itself.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub speaker_id: usize,
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    pub mel: MelSpectrogram,
    pub alignment: AlignmentTrack,
}

impl UtteranceRecord {
    pub fn t_len(&self) -> usize {
        self.mel.t_len()
    }

    /// Check the cross-field invariants (Σ durations = frames; alignment
    /// segments mirror the phoneme/duration lists exactly).
    pub fn check_consistent(&self) -> Result<()> {
        if self.phonemes.is_empty() || self.phonemes.len() != self.durations.len() {
            return Err(Error::InvalidInput(format!(
                "utterance {}: {} phonemes vs {} durations",
                self.utt_id,
                self.phonemes.len(),
                self.durations.len()
            )));
        }
        if self.durations.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!("utterance {}: zero duration", self.utt_id)));
        }
        let total: usize = self.durations.iter().sum();
        if total != self.mel.t_len() || total != self.alignment.t_len() {
            return Err(Error::InvalidInput(format!(
                "utterance {}: durations sum to {total} but mel/alignment cover {}/{} frames",
                self.utt_id,
                self.mel.t_len(),
                self.alignment.t_len()
            )));
        }
        let segments = self.alignment.segments();
        if segments.len() != self.phonemes.len()
            || segments
                .iter()
                .zip(self.phonemes.iter().zip(&self.durations))
                .any(|(seg, (&p, &d))| seg.phoneme != p || seg.len() != d)
        {
            return Err(Error::InvalidInput(format!(
                "utterance {}: alignment segments disagree with phoneme/duration lists",
                self.utt_id
            )));
        }
        Ok(())
    }
}

/// Draw a phoneme uniformly, excluding `prev` when given (keeps alignment
/// segments in one-to-one correspondence with the phoneme list).
fn draw_phoneme<R: Rng>(n: usize, prev: Option<usize>, rng: &mut R) -> usize {
    match prev {
        None => rng.random_range(0..n),
        Some(p) => {
            let r = rng.random_range(0..n - 1);
            if r >= p {
                r + 1
            } else {
                r
            }
        }
    }
}

pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<UtteranceRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phoneme_base = Tensor::randn(&[spec.n_phonemes, MEL_BANDS], &mut rng);
    let speaker_offset = Tensor::randn(&[spec.n_speakers, MEL_BANDS], &mut rng);
    let signatures = Tensor::randn(&[spec.n_speakers * spec.n_phonemes, MEL_BANDS], &mut rng);
    let (dmin, dmax) = spec.duration_range;
    let base_durations: Vec<usize> = (0..spec.n_phonemes)
        .map(|_| rng.random_range(dmin..=dmax))
        .collect();

    let mut records = Vec::with_capacity(spec.n_speakers * spec.utterances_per_speaker);
    for speaker in 0..spec.n_speakers {
        for _ in 0..spec.utterances_per_speaker {
            let len = rng.random_range(spec.utterance_len_range.0..=spec.utterance_len_range.1);
            let mut phonemes = Vec::with_capacity(len);
            for _ in 0..len {
                phonemes.push(draw_phoneme(spec.n_phonemes, phonemes.last().copied(), &mut rng));
            }
            let durations: Vec<usize> = phonemes
                .iter()
                .map(|&p| {
                    let jitter = rng.random_range(0..3) as i64 - 1;
                    (base_durations[p] as i64 + jitter).clamp(dmin as i64, dmax as i64) as usize
                })
                .collect();
            let t_len: usize = durations.iter().sum();
            let mut frames = Vec::with_capacity(t_len * MEL_BANDS);
            let mut tags = Vec::with_capacity(t_len);
            for (&p, &d) in phonemes.iter().zip(&durations) {
                for _ in 0..d {
                    let sig = signatures.row(speaker * spec.n_phonemes + p);
                    for j in 0..MEL_BANDS {
                        let noise: f64 = if spec.noise_std > 0.0 {
                            spec.noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal)
                        } else {
                            0.0
                        };
                        frames.push(
                            phoneme_base.at(p, j)
                                + speaker_offset.at(speaker, j)
                                + spec.content_strength * sig[j]
                                + noise,
                        );
                    }
                    tags.push(p);
                }
            }
            let record = UtteranceRecord {
                utt_id: format!("u{:04}", records.len()),
                speaker_id: speaker,
                phonemes,
                durations,
                mel: MelSpectrogram::new(Tensor::from_vec(&[t_len, MEL_BANDS], frames)?),
                alignment: AlignmentTrack::new(spec.n_phonemes, tags)?,
            };
            debug_assert!(record.check_consistent().is_ok());
            records.push(record);
        }
    }
    Ok(records)
}

/// Deterministic split: the last `holdout_per_speaker` utterances of each
/// speaker become the held-out set; the rest train.
pub fn split_corpus(
    records: Vec<UtteranceRecord>,
    holdout_per_speaker: usize,
) -> Result<(Vec<UtteranceRecord>, Vec<UtteranceRecord>)> {
    let mut counts = std::collections::BTreeMap::new();
    for r in &records {
        *counts.entry(r.speaker_id).or_insert(0usize) += 1;
    }
    if counts.values().any(|&c| c <= holdout_per_speaker) {
        return Err(Error::InvalidInput(format!(
            "holdout of {holdout_per_speaker} per speaker leaves some speaker without training data"
        )));
    }
    let mut seen = std::collections::BTreeMap::new();
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for r in records {
        let c = seen.entry(r.speaker_id).or_insert(0usize);
        *c += 1;
        if *c > counts[&r.speaker_id] - holdout_per_speaker {
            holdout.push(r);
        } else {
            train.push(r);
        }
    }
    Ok((train, holdout))
}

/// Write mels, alignments, and the manifest under `dir`; returns the
/// manifest path. Layout: `mels/<utt>.mel`, `align/<utt>.align`,
/// `manifest.txt` with lines
/// `<utt_id> <speaker_id> <mel_path> <align_path> <phoneme_ids comma-separated>`.
pub fn save_corpus(dir: &Path, records: &[UtteranceRecord]) -> Result<PathBuf> {
    let mel_dir = dir.join("mels");
    let align_dir = dir.join("align");
    for d in [&mel_dir, &align_dir] {
        std::fs::create_dir_all(d)
            .map_err(|e| Error::io(format!("creating corpus directory {}", d.display()), e))?;
    }
    let mut manifest = String::new();
    for r in records {
        let mel_rel = format!("mels/{}.mel", r.utt_id);
        let align_rel = format!("align/{}.align", r.utt_id);
        save_mel(&dir.join(&mel_rel), &r.mel)?;
        save_alignment(&dir.join(&align_rel), &r.alignment)?;
        let ids: Vec<String> = r.phonemes.iter().map(|p| p.to_string()).collect();
        manifest.push_str(&format!(
            "{} {} {} {} {}\n",
            r.utt_id,
            r.speaker_id,
            mel_rel,
            align_rel,
            ids.join(",")
        ));
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest)
        .map_err(|e| Error::io(format!("writing manifest {}", path.display()), e))?;
    Ok(path)
}

/// Load a corpus back from its manifest. Durations are rederived from the
/// alignments; every record is cross-checked (phoneme list vs segments, mel
/// length vs alignment length).
pub fn load_corpus(manifest: &Path) -> Result<Vec<UtteranceRecord>> {
    let origin = manifest.display().to_string();
    let text = std::fs::read_to_string(manifest)
        .map_err(|e| Error::io(format!("reading manifest {origin}"), e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::format(
                &origin,
                lineno,
                format!("expected 5 fields, found {}", fields.len()),
            ));
        }
        let speaker_id: usize = fields[1]
            .parse()
            .map_err(|_| Error::format(&origin, lineno, format!("bad speaker id `{}`", fields[1])))?;
        let phonemes: Vec<usize> = fields[4]
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(&origin, lineno, format!("bad phoneme list `{}`", fields[4])))?;
        let mel = load_mel(&base.join(fields[2]))?;
        let alignment = super::align::load_alignment(&base.join(fields[3]))?;
        let durations: Vec<usize> = alignment.segments().iter().map(|s| s.len()).collect();
        let record = UtteranceRecord {
            utt_id: fields[0].to_string(),
            speaker_id,
            phonemes,
            durations,
            mel,
            alignment,
        };
        record
            .check_consistent()
            .map_err(|e| Error::format(&origin, lineno, e.to_string()))?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::format(&origin, 1, "manifest lists no utterances"));
    }
    Ok(records)
}
