//! Implementations behind the `cdfse` subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cdfse_core::error::{Error, Result};
use cdfse_core::eval::{
    ablate_factor, attention_dump, cosine_similarity, fine_grained_rows, render_attention_matrix,
    render_embedding_rows, write_text, FactorReport,
};
use cdfse_core::frontend::{
    generate_synthetic_corpus, load_alignment, load_corpus, load_mel, save_corpus, save_mel,
    MelSpectrogram, SyntheticCorpusSpec,
};
use cdfse_core::train::{
    check_config_compatible, load_checkpoint, require_mode, Restored, Trainer, LOG_HEADER,
};
use cdfse_core::{ConditioningMode, Config};

/// Missing input files are the operator's problem, not a runtime failure, so
/// surface them as invalid input with the path in the message.
pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} not found: {}", path.display())))
    }
}

/// `3,1,4` or `p3,p1,p4` → ids, each checked against the vocabulary.
fn parse_phoneme_list(text: &str, n_phonemes: usize) -> Result<Vec<usize>> {
    let ids: Vec<usize> = text
        .split(',')
        .map(|tok| {
            let tok = tok.trim();
            tok.strip_prefix('p')
                .unwrap_or(tok)
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad phoneme id `{tok}`")))
        })
        .collect::<Result<_>>()?;
    if ids.is_empty() {
        return Err(Error::InvalidInput("empty phoneme sequence".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&p| p >= n_phonemes) {
        return Err(Error::InvalidInput(format!(
            "phoneme id {bad} is outside the model's vocabulary of {n_phonemes}"
        )));
    }
    Ok(ids)
}

pub struct TrainOpts {
    pub mode: Option<ConditioningMode>,
    pub factor: Option<usize>,
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

pub fn train(
    mut cfg: Config,
    cfg_pinned: bool,
    corpus: &Path,
    out_checkpoint: &Path,
    opts: TrainOpts,
) -> Result<()> {
    if let Some(mode) = opts.mode {
        cfg.model.mode = mode;
    }
    if let Some(factor) = opts.factor {
        cfg.model = cfg.model.with_factor(factor)?;
    }
    require_file(corpus, "corpus manifest")?;
    let records = load_corpus(corpus)?;

    let mut trainer = match &opts.resume {
        Some(ckpt_path) => {
            require_file(ckpt_path, "checkpoint")?;
            let ckpt = load_checkpoint(ckpt_path)?;
            if cfg_pinned || opts.mode.is_some() || opts.factor.is_some() {
                check_config_compatible(&cfg, &ckpt)?;
            }
            Trainer::resume(&ckpt, records)?
        }
        None => Trainer::new(cfg, records)?,
    };

    let log_path = opts.log.unwrap_or_else(|| {
        let mut os = out_checkpoint.as_os_str().to_owned();
        os.push(".log");
        PathBuf::from(os)
    });
    let mut log_file = BufWriter::new(
        File::create(&log_path)
            .map_err(|e| Error::io(format!("creating log file {}", log_path.display()), e))?,
    );
    let mut emit = |line: &str| -> Result<()> {
        println!("{line}");
        writeln!(log_file, "{line}")
            .map_err(|e| Error::io(format!("writing log file {}", log_path.display()), e))
    };

    emit(LOG_HEADER)?;
    let every = trainer.config().train.checkpoint_every;
    while !trainer.finished() {
        let record = trainer.step()?;
        emit(&record.log_line())?;
        if record.step % every == 0 {
            trainer.save(out_checkpoint)?;
        }
    }
    trainer.save(out_checkpoint)?;
    log_file
        .flush()
        .map_err(|e| Error::io(format!("writing log file {}", log_path.display()), e))
}

pub fn synth(checkpoint: &Path, phonemes: &str, reference_mel: &Path, out_mel: &Path) -> Result<()> {
    require_file(checkpoint, "checkpoint")?;
    require_file(reference_mel, "reference mel")?;
    let ckpt = load_checkpoint(checkpoint)?;
    let Restored { config, model, store, .. } = ckpt.restore()?;
    let ids = parse_phoneme_list(phonemes, config.model.n_phonemes)?;
    let reference = load_mel(reference_mel)?;
    let synth = model.synthesize(&store, &reference.frames, &ids)?;
    // Quantize before writing so the file reloads to exactly this matrix.
    let mel = MelSpectrogram::new(synth.mel).quantized();
    save_mel(out_mel, &mel)?;
    println!("predicted_frames {}", mel.t_len());
    Ok(())
}

pub fn align_dump(
    checkpoint: &Path,
    phonemes: &str,
    reference_mel: &Path,
    alignment: &Path,
    out_matrix: &Path,
) -> Result<()> {
    require_file(checkpoint, "checkpoint")?;
    require_file(reference_mel, "reference mel")?;
    require_file(alignment, "alignment")?;
    let ckpt = load_checkpoint(checkpoint)?;
    require_mode(&ckpt, ConditioningMode::Cdfse)?;
    let Restored { config, model, store, .. } = ckpt.restore()?;
    let ids = parse_phoneme_list(phonemes, config.model.n_phonemes)?;
    let reference = load_mel(reference_mel)?;
    let align = load_alignment(alignment)?;
    let (weights, labels) = attention_dump(&model, &store, &reference.frames, &align, &ids)?;
    write_text(out_matrix, &render_attention_matrix(&ids, &labels, &weights))
}

pub fn embed_dump(checkpoint: &Path, corpus: &Path, out: &Path) -> Result<()> {
    require_file(checkpoint, "checkpoint")?;
    require_file(corpus, "corpus manifest")?;
    let ckpt = load_checkpoint(checkpoint)?;
    require_mode(&ckpt, ConditioningMode::Cdfse)?;
    let Restored { model, store, .. } = ckpt.restore()?;
    let records = load_corpus(corpus)?;
    let mut rows = Vec::new();
    for record in &records {
        rows.extend(fine_grained_rows(&model, &store, record)?);
    }
    write_text(out, &render_embedding_rows(&rows))
}

const CANONICAL_FACTORS: [usize; 4] = [1, 4, 16, 64];

pub fn ablate(
    cfg: Config,
    corpus: &Path,
    factors: &[usize],
    out_report: &Path,
    threads: usize,
) -> Result<()> {
    if factors.is_empty() {
        return Err(Error::InvalidInput("ablation needs at least one factor".into()));
    }
    for &f in factors {
        if !CANONICAL_FACTORS.contains(&f) {
            return Err(Error::InvalidInput(format!(
                "ablation factor must be one of 1, 4, 16, 64; got {f}"
            )));
        }
    }
    if factors.iter().collect::<std::collections::BTreeSet<_>>().len() != factors.len() {
        return Err(Error::InvalidInput("duplicate ablation factor".into()));
    }
    require_file(corpus, "corpus manifest")?;
    let records = load_corpus(corpus)?;
    let (train_recs, eval_recs) =
        cdfse_core::frontend::split_corpus(records, cfg.train.holdout_per_speaker)?;

    let mut results: Vec<(usize, Result<FactorReport>)> = Vec::with_capacity(factors.len());
    if threads <= 1 {
        for &f in factors {
            results.push((f, ablate_factor(&cfg, f, &train_recs, &eval_recs)));
        }
    } else {
        // Factor runs are independent models; run up to `threads` at a time
        // and collect in factor order so output stays deterministic.
        let (cfg, train_recs, eval_recs) = (&cfg, &train_recs, &eval_recs);
        for chunk in factors.chunks(threads) {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&f| (f, scope.spawn(move || ablate_factor(cfg, f, train_recs, eval_recs))))
                    .collect();
                for (f, handle) in handles {
                    results.push((f, handle.join().expect("ablation worker panicked")));
                }
            });
        }
    }

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (f, result) in results {
        match result {
            Ok(report) => reports.push(report),
            Err(e) => failures.push((f, e)),
        }
    }
    let mut text = cdfse_core::eval::render_ablation_report(&reports);
    for (f, e) in &failures {
        text.push_str(&format!("# factor {f} failed: {e}\n"));
    }
    write_text(out_report, &text)?;
    print!("{text}");
    match failures.into_iter().next() {
        Some((_, e)) => Err(e),
        None => Ok(()),
    }
}

fn read_vector(path: &Path) -> Result<Vec<f64>> {
    require_file(path, "vector file")?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading vector file {}", path.display()), e))?;
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|tok| {
            tok.parse().map_err(|_| {
                Error::format(path.display().to_string(), 0, format!("bad decimal `{tok}`"))
            })
        })
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(Error::InvalidInput(format!(
            "vector file {} holds no values",
            path.display()
        )));
    }
    Ok(v)
}

pub fn cosine(a: &Path, b: &Path) -> Result<()> {
    let similarity = cosine_similarity(&read_vector(a)?, &read_vector(b)?)?;
    println!("{similarity}");
    Ok(())
}

pub fn gen_corpus(out_dir: &Path, spec: SyntheticCorpusSpec) -> Result<()> {
    let records = generate_synthetic_corpus(&spec)?;
    let manifest = save_corpus(out_dir, &records)?;
    println!("{}", manifest.display());
    Ok(())
}
