//! `cdfse`: train fine-grained speaker-embedding TTS models on synthetic
//! corpora, synthesize mels against a reference utterance, export attention
//! matrices and embeddings for inspection, and run the granularity ablation.
//!
//! Exit codes: 0 success, 1 runtime failure (I/O and friends), 2 invalid
//! input (bad flags, malformed files, vocabulary mismatches).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cdfse_core::config::load_config;
use cdfse_core::{ConditioningMode, Config, Error, Result};

mod commands;

#[derive(Parser)]
#[command(name = "cdfse", version, about = "Fine-grained speaker embedding TTS workbench")]
struct Cli {
    /// Override the seed in the active config (training batch draws; also
    /// seeds `gen-corpus`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Flat `key=value` config file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for multi-model commands (`ablate` trains up to this
    /// many factors concurrently).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on a corpus manifest and write a checkpoint.
    Train {
        /// Corpus manifest (see `gen-corpus`).
        corpus: PathBuf,
        /// Checkpoint path; rewritten every `checkpoint_every` steps and at
        /// the end.
        out_checkpoint: PathBuf,
        /// Conditioning override: `cdfse` or `cls`.
        #[arg(long)]
        mode: Option<ConditioningMode>,
        /// Downsampling-factor override (power of two, at most 64).
        #[arg(long)]
        factor: Option<usize>,
        /// Log file copy of the step lines; defaults to `<out_checkpoint>.log`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Resume from an existing checkpoint instead of a fresh start.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Synthesize a mel for a phoneme sequence in the voice of a reference.
    Synth {
        checkpoint: PathBuf,
        /// Comma-separated phoneme ids, e.g. `3,1,4` (a leading `p` per id is
        /// accepted, matching alignment files).
        phonemes: String,
        reference_mel: PathBuf,
        out_mel: PathBuf,
    },
    /// Dump the reference-attention matrix with phoneme-labeled columns.
    AlignDump {
        checkpoint: PathBuf,
        /// Comma-separated phoneme ids of the query text.
        phonemes: String,
        reference_mel: PathBuf,
        /// Frame alignment of the reference (labels the downsampled columns).
        alignment: PathBuf,
        out_matrix: PathBuf,
    },
    /// Export fine-grained embeddings: one line per utterance phoneme position.
    EmbedDump {
        checkpoint: PathBuf,
        corpus: PathBuf,
        out: PathBuf,
    },
    /// Train one model per downsampling factor and tabulate speaker-similarity,
    /// duration, and phoneme-accuracy metrics on the held-out split.
    Ablate {
        corpus: PathBuf,
        out_report: PathBuf,
        /// Subset of the canonical grid 1,4,16,64.
        #[arg(long, value_delimiter = ',', default_value = "1,4,16,64")]
        factors: Vec<usize>,
    },
    /// Cosine similarity between two whitespace-separated vector files.
    Cosine { a: PathBuf, b: PathBuf },
    /// Generate a synthetic corpus and write it with its manifest.
    GenCorpus {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 4)]
        speakers: usize,
        #[arg(long, default_value_t = 12)]
        phonemes: usize,
        #[arg(long, default_value_t = 50)]
        utterances_per_speaker: usize,
        /// Phonemes per utterance, inclusive.
        #[arg(long, default_value_t = 4)]
        len_min: usize,
        #[arg(long, default_value_t = 7)]
        len_max: usize,
        /// Frames per phoneme instance, inclusive.
        #[arg(long, default_value_t = 8)]
        dur_min: usize,
        #[arg(long, default_value_t = 16)]
        dur_max: usize,
        /// Weight of the per-(speaker,phoneme) signature component.
        #[arg(long, default_value_t = 1.0)]
        content_strength: f64,
        /// Per-frame i.i.d. noise level.
        #[arg(long, default_value_t = 0.05)]
        noise_std: f64,
    },
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::InvalidInput("--threads must be at least 1".into()));
    }
    // Commands that train need a config; track whether the user pinned any
    // part of it so `--resume` can tell "use the checkpoint's own config"
    // apart from "verify mine matches".
    let explicit = cli.config.is_some() || cli.seed.is_some();
    let mut cfg = match &cli.config {
        Some(path) => {
            commands::require_file(path, "config file")?;
            load_config(path)?
        }
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }

    match cli.cmd {
        Cmd::Train { corpus, out_checkpoint, mode, factor, log, resume } => commands::train(
            cfg,
            explicit,
            &corpus,
            &out_checkpoint,
            commands::TrainOpts { mode, factor, log, resume },
        ),
        Cmd::Synth { checkpoint, phonemes, reference_mel, out_mel } => {
            commands::synth(&checkpoint, &phonemes, &reference_mel, &out_mel)
        }
        Cmd::AlignDump { checkpoint, phonemes, reference_mel, alignment, out_matrix } => {
            commands::align_dump(&checkpoint, &phonemes, &reference_mel, &alignment, &out_matrix)
        }
        Cmd::EmbedDump { checkpoint, corpus, out } => commands::embed_dump(&checkpoint, &corpus, &out),
        Cmd::Ablate { corpus, out_report, factors } => {
            commands::ablate(cfg, &corpus, &factors, &out_report, cli.threads)
        }
        Cmd::Cosine { a, b } => commands::cosine(&a, &b),
        Cmd::GenCorpus {
            out_dir,
            speakers,
            phonemes,
            utterances_per_speaker,
            len_min,
            len_max,
            dur_min,
            dur_max,
            content_strength,
            noise_std,
        } => commands::gen_corpus(
            &out_dir,
            cdfse_core::frontend::SyntheticCorpusSpec {
                n_speakers: speakers,
                n_phonemes: phonemes,
                utterances_per_speaker,
                utterance_len_range: (len_min, len_max),
                duration_range: (dur_min, dur_max),
                content_strength,
                noise_std,
                seed: cli.seed.unwrap_or(cfg.train.seed),
            },
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_invalid_input() { 2 } else { 1 })
        }
    }
}
