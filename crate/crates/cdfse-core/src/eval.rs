//! Evaluation utilities: similarity and accuracy metrics, attention and
//! embedding exports with their parsers, and the granularity ablation runner.
//!
//! Exported files use Rust's shortest-round-trip float formatting, so parsing
//! a file this module wrote recovers the in-memory values bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::frontend::{AlignmentTrack, UtteranceRecord};
use crate::model::Model;
use crate::nnprim::{ParamStore, Tensor};
use crate::refenc::downsampled_len;
use crate::train::Trainer;

/// Cosine similarity between two equal-length vectors. Undefined (and
/// rejected) when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            detail: format!("{} vs {} components", a.len(), b.len()),
        });
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("cosine of empty vectors".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput(
            "cosine similarity is undefined for a zero vector".into(),
        ));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Label for each downsampled reference column: the most frequent phoneme
/// among the `factor` source frames it covers, ties broken toward the
/// smallest phoneme id.
pub fn column_phoneme_labels(align: &AlignmentTrack, factor: usize) -> Vec<usize> {
    let tags = align.frame_tags();
    let s_len = downsampled_len(tags.len(), factor);
    let mut labels = Vec::with_capacity(s_len);
    for s in 0..s_len {
        let lo = s * factor;
        let hi = ((s + 1) * factor).min(tags.len());
        let mut counts = std::collections::BTreeMap::new();
        for &t in &tags[lo..hi] {
            *counts.entry(t).or_insert(0usize) += 1;
        }
        let (&label, _) = counts.iter().max_by_key(|&(id, &n)| (n, std::cmp::Reverse(id))).unwrap();
        labels.push(label);
    }
    labels
}

/// Per query row, the label of the column holding the largest weight.
pub fn argmax_column_labels(weights: &Tensor, labels: &[usize]) -> Result<Vec<usize>> {
    if weights.cols() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "argmax_column_labels",
            detail: format!("{} columns vs {} labels", weights.cols(), labels.len()),
        });
    }
    Ok((0..weights.rows())
        .map(|r| {
            let row = weights.row(r);
            let best = (0..row.len()).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
            labels[best]
        })
        .collect())
}

/// Per query row, whether the phoneme receiving the most total attention
/// mass (columns grouped by label) is the query's own phoneme.
pub fn plurality_mass_matches(weights: &Tensor, phonemes: &[usize], labels: &[usize]) -> Result<Vec<bool>> {
    if weights.rows() != phonemes.len() || weights.cols() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "plurality_mass_matches",
            detail: format!(
                "weights {:?} vs {} phonemes / {} labels",
                weights.shape(),
                phonemes.len(),
                labels.len()
            ),
        });
    }
    Ok((0..weights.rows())
        .map(|r| {
            let mut mass = std::collections::BTreeMap::new();
            for (&label, &w) in labels.iter().zip(weights.row(r)) {
                *mass.entry(label).or_insert(0.0) += w;
            }
            let (&winner, _) = mass
                .iter()
                .max_by(|(i, a), (j, b)| a.total_cmp(b).then(j.cmp(i)))
                .unwrap();
            winner == phonemes[r]
        })
        .collect())
}

/// Reference attention for one utterance: encode the reference, encode the
/// query phonemes, attend, and label the reference columns from the
/// alignment. Returns `(weights L×S, column labels)`.
pub fn attention_dump(
    model: &Model,
    store: &ParamStore,
    reference_mel: &Tensor,
    alignment: &AlignmentTrack,
    phonemes: &[usize],
) -> Result<(Tensor, Vec<usize>)> {
    if alignment.t_len() != reference_mel.rows() {
        return Err(Error::InvalidInput(format!(
            "alignment covers {} frames but the reference has {}",
            alignment.t_len(),
            reference_mel.rows()
        )));
    }
    let mut tape = crate::model::inference_tape(store);
    let reference = model.refenc.encode(&mut tape, reference_mel)?;
    let encoded = model.backbone.encode_phonemes(&mut tape, phonemes)?;
    let fg = model.refattn.apply(&mut tape, encoded, &reference.local)?;
    let weights = tape.value(fg.weights).clone();
    let labels = column_phoneme_labels(alignment, model.refenc.factor());
    debug_assert_eq!(weights.cols(), labels.len());
    Ok((weights, labels))
}

/// Render an attention matrix with its context: query phonemes, per-column
/// reference labels, then L rows of S space-separated decimals.
pub fn render_attention_matrix(phonemes: &[usize], labels: &[usize], weights: &Tensor) -> String {
    let mut out = String::new();
    out.push_str("#query_phonemes");
    for p in phonemes {
        let _ = write!(out, " p{p}");
    }
    out.push_str("\n#ref_segments");
    for l in labels {
        let _ = write!(out, " p{l}");
    }
    out.push('\n');
    for r in 0..weights.rows() {
        let mut first = true;
        for v in weights.row(r) {
            if !first {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
            first = false;
        }
        out.push('\n');
    }
    out
}

fn parse_tag_list(line: &str, prefix: &str, origin: &str, lineno: usize) -> Result<Vec<usize>> {
    let rest = line
        .strip_prefix(prefix)
        .ok_or_else(|| Error::format(origin, lineno, format!("expected a `{prefix}` header")))?;
    rest.split_whitespace()
        .map(|tok| {
            tok.strip_prefix('p')
                .and_then(|d| d.parse().ok())
                .ok_or_else(|| Error::format(origin, lineno, format!("bad phoneme symbol `{tok}`")))
        })
        .collect()
}

/// Parse [`render_attention_matrix`] output.
pub fn parse_attention_matrix(text: &str, origin: &str) -> Result<(Vec<usize>, Vec<usize>, Tensor)> {
    let mut lines = text.lines().enumerate();
    let (n1, l1) = lines
        .next()
        .ok_or_else(|| Error::format(origin, 1, "empty attention matrix file"))?;
    let phonemes = parse_tag_list(l1, "#query_phonemes", origin, n1 + 1)?;
    let (n2, l2) = lines
        .next()
        .ok_or_else(|| Error::format(origin, 2, "missing `#ref_segments` header"))?;
    let labels = parse_tag_list(l2, "#ref_segments", origin, n2 + 1)?;
    let mut data = Vec::with_capacity(phonemes.len() * labels.len());
    let mut rows = 0usize;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse()
                    .map_err(|_| Error::format(origin, idx + 1, format!("bad decimal `{tok}`")))
            })
            .collect::<Result<_>>()?;
        if row.len() != labels.len() {
            return Err(Error::format(
                origin,
                idx + 1,
                format!("{} weights in a row, expected {}", row.len(), labels.len()),
            ));
        }
        data.extend(row);
        rows += 1;
    }
    if rows != phonemes.len() {
        return Err(Error::format(
            origin,
            1,
            format!("{rows} weight rows for {} query phonemes", phonemes.len()),
        ));
    }
    let weights = Tensor::from_vec(&[rows, labels.len()], data)?;
    Ok((phonemes, labels, weights))
}

/// One exported fine-grained embedding row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub speaker_id: usize,
    pub phoneme_id: usize,
    pub values: Vec<f64>,
}

/// Fine-grained speaker embeddings for one utterance, one row per phoneme
/// position, conditioned on the utterance's own (unshuffled) reference.
pub fn fine_grained_rows(model: &Model, store: &ParamStore, rec: &UtteranceRecord) -> Result<Vec<EmbeddingRow>> {
    let mut tape = crate::model::inference_tape(store);
    let reference = model.refenc.encode(&mut tape, &rec.mel.frames)?;
    let encoded = model.backbone.encode_phonemes(&mut tape, &rec.phonemes)?;
    let fg = model.refattn.apply(&mut tape, encoded, &reference.local)?;
    let values = tape.value(fg.values);
    Ok(rec
        .phonemes
        .iter()
        .enumerate()
        .map(|(i, &p)| EmbeddingRow {
            speaker_id: rec.speaker_id,
            phoneme_id: p,
            values: values.row(i).to_vec(),
        })
        .collect())
}

/// Render embedding rows: one line `<speaker_id> <phoneme_id> <floats…>` per
/// phoneme position.
pub fn render_embedding_rows(rows: &[EmbeddingRow]) -> String {
    let mut out = String::new();
    for row in rows {
        let _ = write!(out, "{} {}", row.speaker_id, row.phoneme_id);
        for v in &row.values {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}

/// Parse [`render_embedding_rows`] output.
pub fn parse_embedding_rows(text: &str, origin: &str) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::new();
    let mut width = None;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let fail = |msg: String| Error::format(origin, idx + 1, msg);
        let speaker_id = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| fail("missing speaker id".into()))?;
        let phoneme_id = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| fail("missing phoneme id".into()))?;
        let values: Vec<f64> = toks
            .map(|t| t.parse().map_err(|_| fail(format!("bad decimal `{t}`"))))
            .collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(fail("embedding line carries no values".into()));
        }
        if *width.get_or_insert(values.len()) != values.len() {
            return Err(fail(format!(
                "embedding width {} differs from earlier lines ({})",
                values.len(),
                width.unwrap()
            )));
        }
        rows.push(EmbeddingRow { speaker_id, phoneme_id, values });
    }
    Ok(rows)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn centroid(rows: &[&EmbeddingRow]) -> Vec<f64> {
    let dim = rows[0].values.len();
    let mut c = vec![0.0; dim];
    for r in rows {
        for (ci, v) in c.iter_mut().zip(&r.values) {
            *ci += v;
        }
    }
    c.iter_mut().for_each(|v| *v /= rows.len() as f64);
    c
}

/// Cluster geometry of exported embeddings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingStructure {
    /// Mean distance from a row to its own speaker's centroid.
    pub mean_within_speaker: f64,
    /// Mean distance from a row to every other speaker's centroid.
    pub mean_cross_speaker: f64,
    /// Minimum over speakers of the fraction of phoneme sub-centroid pairs
    /// separated by more than that speaker's mean within-sub-centroid
    /// standard deviation.
    pub min_subcentroid_separation: f64,
}

/// Measure how strongly embeddings cluster by speaker and, within a speaker,
/// spread by phoneme.
pub fn embedding_structure(rows: &[EmbeddingRow]) -> Result<EmbeddingStructure> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("no embedding rows to analyze".into()));
    }
    let speakers: std::collections::BTreeSet<usize> = rows.iter().map(|r| r.speaker_id).collect();
    if speakers.len() < 2 {
        return Err(Error::InvalidInput(
            "embedding structure needs at least two speakers".into(),
        ));
    }
    let mut centroids = std::collections::BTreeMap::new();
    for &s in &speakers {
        let group: Vec<&EmbeddingRow> = rows.iter().filter(|r| r.speaker_id == s).collect();
        centroids.insert(s, centroid(&group));
    }
    let (mut within, mut cross, mut n_within, mut n_cross) = (0.0, 0.0, 0usize, 0usize);
    for r in rows {
        for (&s, c) in &centroids {
            let d = euclidean(&r.values, c);
            if s == r.speaker_id {
                within += d;
                n_within += 1;
            } else {
                cross += d;
                n_cross += 1;
            }
        }
    }

    let mut min_sep: f64 = 1.0;
    for &s in &speakers {
        let phonemes: std::collections::BTreeSet<usize> =
            rows.iter().filter(|r| r.speaker_id == s).map(|r| r.phoneme_id).collect();
        let mut subs = Vec::new();
        let mut stds = Vec::new();
        for &p in &phonemes {
            let group: Vec<&EmbeddingRow> =
                rows.iter().filter(|r| r.speaker_id == s && r.phoneme_id == p).collect();
            let c = centroid(&group);
            let var =
                group.iter().map(|r| euclidean(&r.values, &c).powi(2)).sum::<f64>() / group.len() as f64;
            subs.push(c);
            stds.push(var.sqrt());
        }
        if subs.len() < 2 {
            continue;
        }
        let mean_std = stds.iter().sum::<f64>() / stds.len() as f64;
        let mut separated = 0usize;
        let mut pairs = 0usize;
        for i in 0..subs.len() {
            for j in (i + 1)..subs.len() {
                pairs += 1;
                if euclidean(&subs[i], &subs[j]) > mean_std {
                    separated += 1;
                }
            }
        }
        min_sep = min_sep.min(separated as f64 / pairs as f64);
    }

    Ok(EmbeddingStructure {
        mean_within_speaker: within / n_within as f64,
        mean_cross_speaker: cross / n_cross as f64,
        min_subcentroid_separation: min_sep,
    })
}

/// The whole evaluation battery over a record set (eval phase, unshuffled
/// references; mel error teacher-forced so frames align with ground truth).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    /// Frame-level phoneme classifier accuracy.
    pub phoneme_accuracy: f64,
    /// Utterance-level speaker classifier accuracy.
    pub speaker_accuracy: f64,
    /// Teacher-forced mel reconstruction MAE.
    pub mel_mae: f64,
    /// Mean |predicted − ground-truth| duration in frames.
    pub duration_mae: f64,
    /// Mean cosine between the speaker vectors of synthesized and
    /// ground-truth mels (this model's own vectors stand in for an external
    /// speaker-verification system).
    pub cosine_similarity: f64,
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap()
}

/// Evaluate a trained model over `records`.
pub fn evaluate(model: &Model, store: &ParamStore, records: &[UtteranceRecord]) -> Result<EvalMetrics> {
    if records.is_empty() {
        return Err(Error::InvalidInput("evaluation needs at least one utterance".into()));
    }
    let (mut frames_right, mut frames) = (0usize, 0usize);
    let mut speakers_right = 0usize;
    let (mut mel_err, mut mel_cells) = (0.0f64, 0usize);
    let (mut dur_err, mut dur_n) = (0.0f64, 0usize);
    let mut cos_sum = 0.0f64;
    for rec in records {
        let mut tape = crate::model::inference_tape(store);
        let out = model.forward(&mut tape, &rec.mel.frames, &rec.phonemes, Some(&rec.durations))?;

        let logits = tape.value(out.reference.phoneme_logits);
        for (t, &tag) in rec.alignment.frame_tags().iter().enumerate() {
            frames_right += (argmax(logits.row(t)) == tag) as usize;
            frames += 1;
        }
        let sp = tape.value(out.reference.speaker_logits);
        speakers_right += (argmax(sp.row(0)) == rec.speaker_id) as usize;

        let pred = tape.value(out.mel);
        for (p, g) in pred.data().iter().zip(rec.mel.frames.data()) {
            mel_err += (p - g).abs();
        }
        mel_cells += pred.numel();

        let log_d = tape.value(out.log_durations);
        let predicted = crate::backbone::durations_from_log(log_d);
        for (&p, &g) in predicted.iter().zip(&rec.durations) {
            dur_err += (p as f64 - g as f64).abs();
        }
        dur_n += predicted.len();
        let gt_vector = tape.value(out.reference.utterance_vector).row(0).to_vec();
        drop(tape);

        let synth = model.synthesize(store, &rec.mel.frames, &rec.phonemes)?;
        let mut tape = crate::model::inference_tape(store);
        let synth_ref = model.refenc.encode(&mut tape, &synth.mel)?;
        let synth_vector = tape.value(synth_ref.utterance_vector).row(0).to_vec();
        cos_sum += cosine_similarity(&synth_vector, &gt_vector)?;
    }
    Ok(EvalMetrics {
        phoneme_accuracy: frames_right as f64 / frames as f64,
        speaker_accuracy: speakers_right as f64 / records.len() as f64,
        mel_mae: mel_err / mel_cells as f64,
        duration_mae: dur_err / dur_n as f64,
        cosine_similarity: cos_sum / records.len() as f64,
    })
}

/// One row of the granularity ablation report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorReport {
    pub factor: usize,
    pub cosine_similarity: f64,
    pub duration_mae: f64,
    pub phoneme_accuracy: f64,
}

/// Train one model at the given factor (same seed and corpus as any other
/// factor) and evaluate it on the held-out records. One grid cell of the
/// ablation.
pub fn ablate_factor(
    base: &Config,
    factor: usize,
    train_records: &[UtteranceRecord],
    eval_records: &[UtteranceRecord],
) -> Result<FactorReport> {
    let mut cfg = base.clone();
    cfg.model = cfg.model.with_factor(factor)?;
    let mut trainer = Trainer::new(cfg, train_records.to_vec())?;
    while !trainer.finished() {
        trainer.step()?;
    }
    let m = evaluate(trainer.model(), trainer.store(), eval_records)?;
    Ok(FactorReport {
        factor,
        cosine_similarity: m.cosine_similarity,
        duration_mae: m.duration_mae,
        phoneme_accuracy: m.phoneme_accuracy,
    })
}

/// Run [`ablate_factor`] over the whole grid, failing fast on the first
/// factor that errors.
pub fn run_ablation(
    base: &Config,
    factors: &[usize],
    train_records: &[UtteranceRecord],
    eval_records: &[UtteranceRecord],
) -> Result<Vec<FactorReport>> {
    if factors.is_empty() {
        return Err(Error::InvalidInput("ablation needs at least one factor".into()));
    }
    factors
        .iter()
        .map(|&f| ablate_factor(base, f, train_records, eval_records))
        .collect()
}

/// Render the ablation report table. The header records the metric
/// substitutions this artifact makes at desk scale.
pub fn render_ablation_report(reports: &[FactorReport]) -> String {
    let mut out = String::new();
    out.push_str("# granularity ablation: one model per downsampling factor, shared seed/corpus\n");
    out.push_str(
        "# speaker similarity = cosine between this model's own utterance speaker vectors\n\
         #   of synthesized and ground-truth mels (no external speaker-verification system),\n\
         #   averaged over the held-out synthetic split standing in for real recordings\n",
    );
    out.push_str("# factor cosine_similarity duration_mae phoneme_accuracy\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{} {} {} {}",
            r.factor, r.cosine_similarity, r.duration_mae, r.phoneme_accuracy
        );
    }
    out
}

/// Parse [`render_ablation_report`] output.
pub fn parse_ablation_report(text: &str, origin: &str) -> Result<Vec<FactorReport>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 {
            return Err(Error::format(origin, idx + 1, format!("expected 4 columns, got {}", toks.len())));
        }
        let bad = |what: &str, tok: &str| Error::format(origin, idx + 1, format!("bad {what} `{tok}`"));
        out.push(FactorReport {
            factor: toks[0].parse().map_err(|_| bad("factor", toks[0]))?,
            cosine_similarity: toks[1].parse().map_err(|_| bad("cosine", toks[1]))?,
            duration_mae: toks[2].parse().map_err(|_| bad("duration mae", toks[2]))?,
            phoneme_accuracy: toks[3].parse().map_err(|_| bad("accuracy", toks[3]))?,
        });
    }
    Ok(out)
}

/// Write a string to `path` with I/O context on failure.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ConditioningMode, ModelConfig};
    use crate::frontend::{generate_synthetic_corpus, SyntheticCorpusSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_basics() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let scaled = cosine_similarity(&[1.0, -2.0], &[2.0, -4.0]).unwrap();
        assert!((scaled - 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]).unwrap_err().is_invalid_input());
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn column_labels_use_majority_with_low_id_ties() {
        let align = AlignmentTrack::new(4, vec![0, 0, 0, 1, 1, 1, 2, 2, 3]).unwrap();
        assert_eq!(column_phoneme_labels(&align, 4), vec![0, 1, 3]);
        // Tie inside the middle column: 1,1,2,2 → smaller id wins.
        assert_eq!(column_phoneme_labels(&align, 1), align.frame_tags().to_vec());
    }

    #[test]
    fn attention_scoring_on_handcrafted_weights() {
        let labels = [5, 7, 5];
        let weights = Tensor::from_rows(&[
            vec![0.2, 0.5, 0.3], // argmax label 7; mass: 5 → 0.5, 7 → 0.5 (tie, low id wins)
            vec![0.6, 0.3, 0.1], // argmax label 5; mass favors 5
        ])
        .unwrap();
        assert_eq!(argmax_column_labels(&weights, &labels).unwrap(), vec![7, 5]);
        let hits = plurality_mass_matches(&weights, &[7, 5], &labels).unwrap();
        assert_eq!(hits, vec![false, true]);
        let hits = plurality_mass_matches(&weights, &[5, 5], &labels).unwrap();
        assert_eq!(hits, vec![true, true]);
    }

    #[test]
    fn attention_matrix_round_trips_bit_exactly() {
        let weights = Tensor::from_rows(&[
            vec![0.125, 0.5, 0.375],
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        ])
        .unwrap();
        let text = render_attention_matrix(&[4, 0], &[1, 2, 1], &weights);
        let (ph, labels, back) = parse_attention_matrix(&text, "test").unwrap();
        assert_eq!(ph, vec![4, 0]);
        assert_eq!(labels, vec![1, 2, 1]);
        assert_eq!(back.data(), weights.data());
        assert_eq!(render_attention_matrix(&ph, &labels, &back), text);
    }

    #[test]
    fn attention_matrix_parser_rejects_malformed_input() {
        assert!(parse_attention_matrix("", "t").is_err());
        assert!(parse_attention_matrix("#query_phonemes p0\n#ref_segments q1\n0.5\n", "t").is_err());
        let short = "#query_phonemes p0 p1\n#ref_segments p0\n0.5\n";
        let err = parse_attention_matrix(short, "t").err().unwrap();
        assert!(err.to_string().contains("2 query phonemes"), "{err}");
    }

    #[test]
    fn embedding_rows_round_trip_bit_exactly() {
        let rows = vec![
            EmbeddingRow { speaker_id: 0, phoneme_id: 3, values: vec![0.1, -0.7] },
            EmbeddingRow { speaker_id: 1, phoneme_id: 0, values: vec![1.0 / 3.0, 2.0 / 7.0] },
        ];
        let text = render_embedding_rows(&rows);
        let back = parse_embedding_rows(&text, "test").unwrap();
        assert_eq!(back, rows);
        let ragged = "0 1 0.5 0.5\n0 1 0.5\n";
        assert!(parse_embedding_rows(ragged, "test").is_err());
    }

    #[test]
    fn embedding_structure_separates_planted_clusters() {
        // Two speakers far apart; within each, two phoneme clusters offset on
        // another axis with tiny within-cluster noise.
        let mut rows = Vec::new();
        for (s, base) in [(0usize, -10.0), (1usize, 10.0)] {
            for (p, off) in [(0usize, -1.0), (1usize, 1.0)] {
                for k in 0..5 {
                    rows.push(EmbeddingRow {
                        speaker_id: s,
                        phoneme_id: p,
                        values: vec![base, off, 0.01 * k as f64],
                    });
                }
            }
        }
        let m = embedding_structure(&rows).unwrap();
        assert!(m.mean_within_speaker < m.mean_cross_speaker);
        assert_eq!(m.min_subcentroid_separation, 1.0);

        // Collapsed sub-clusters: separation fraction drops to zero.
        let collapsed: Vec<EmbeddingRow> = rows
            .iter()
            .map(|r| EmbeddingRow { phoneme_id: r.phoneme_id, speaker_id: r.speaker_id, values: vec![r.values[0], 0.0, r.values[2]] })
            .collect();
        let m = embedding_structure(&collapsed).unwrap();
        assert_eq!(m.min_subcentroid_separation, 0.0);

        assert!(embedding_structure(&rows[..5]).is_err(), "single speaker rejected");
    }

    #[test]
    fn ablation_report_round_trips() {
        let reports = vec![
            FactorReport { factor: 1, cosine_similarity: 0.5, duration_mae: 1.25, phoneme_accuracy: 0.75 },
            FactorReport { factor: 16, cosine_similarity: 1.0 / 3.0, duration_mae: 0.5, phoneme_accuracy: 0.9375 },
        ];
        let text = render_ablation_report(&reports);
        assert!(text.contains("speaker-verification"), "substitution note present");
        let back = parse_ablation_report(&text, "test").unwrap();
        assert_eq!(back, reports);
    }

    fn tiny_model() -> (ModelConfig, ParamStore, Model, Vec<UtteranceRecord>) {
        let cfg = ModelConfig {
            n_phonemes: 5,
            n_speakers: 2,
            n_mels: 80,
            mode: ConditioningMode::Cdfse,
            pool_stages: 2,
            prenet_channels: 4,
            content_blocks: 1,
            content_dim: 8,
            downsample_channels: [4, 4, 4, 4],
            out_dim: 10,
            attention_dim: 4,
            hidden: 8,
            encoder_blocks: 1,
            decoder_blocks: 1,
            ffn_mult: 2,
            ffn_kernel1: 3,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::new(&mut store, &cfg, &mut rng).unwrap();
        // Length floor matters: the battery re-encodes free-running synthesis,
        // and an untrained duration predictor emits one frame per phoneme. The
        // synthesized mel must still survive the reference stack's pooling
        // pyramid with at least two rows at every stage — and with at least
        // three wherever a batchnorm feeds the pooled utterance mean, because
        // normalizing exactly two rows yields exact negatives that a zero-bias
        // head cancels to a zero vector.
        let records = generate_synthetic_corpus(&SyntheticCorpusSpec {
            n_speakers: 2,
            n_phonemes: 5,
            utterances_per_speaker: 2,
            utterance_len_range: (9, 12),
            duration_range: (4, 6),
            seed: 9,
            ..SyntheticCorpusSpec::default()
        })
        .unwrap();
        (cfg, store, model, records)
    }

    #[test]
    fn evaluation_battery_is_finite_and_bounded_untrained() {
        let (_cfg, store, model, records) = tiny_model();
        let m = evaluate(&model, &store, &records).unwrap();
        assert!((0.0..=1.0).contains(&m.phoneme_accuracy));
        assert!((0.0..=1.0).contains(&m.speaker_accuracy));
        assert!(m.mel_mae.is_finite() && m.mel_mae >= 0.0);
        assert!(m.duration_mae.is_finite() && m.duration_mae >= 0.0);
        assert!((-1.0..=1.0).contains(&m.cosine_similarity));
    }

    #[test]
    fn attention_dump_labels_every_column() {
        let (cfg, store, model, records) = tiny_model();
        let rec = &records[0];
        let (weights, labels) =
            attention_dump(&model, &store, &rec.mel.frames, &rec.alignment, &rec.phonemes).unwrap();
        assert_eq!(weights.rows(), rec.phonemes.len());
        assert_eq!(weights.cols(), downsampled_len(rec.t_len(), cfg.factor()));
        assert_eq!(labels.len(), weights.cols());
        for r in 0..weights.rows() {
            let s: f64 = weights.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
