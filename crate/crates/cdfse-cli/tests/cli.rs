//! End-to-end checks of the `cdfse` binary: command plumbing, exit codes,
//! and byte-level determinism of everything it writes.

use std::path::PathBuf;
use std::process::Command;
use std::sync::LazyLock;

use cdfse_core::config::{save_config, Config, ModelConfig, TrainConfig};
use cdfse_core::eval::{evaluate, parse_ablation_report, parse_attention_matrix};
use cdfse_core::frontend::{load_corpus, load_mel, save_corpus, split_corpus};
use cdfse_core::train::{load_checkpoint, Trainer};
use cdfse_core::ConditioningMode;

const BIN: &str = env!("CARGO_BIN_EXE_cdfse");

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).output().expect("spawning cdfse");
    (
        out.status.code().expect("exit code"),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn run_ok(args: &[&str]) -> String {
    let (code, stdout, stderr) = run(args);
    assert_eq!(code, 0, "command {args:?} failed: {stderr}");
    stdout
}

fn micro_config() -> Config {
    Config {
        model: ModelConfig {
            n_phonemes: 12,
            n_speakers: 4,
            pool_stages: 4,
            prenet_channels: 8,
            content_blocks: 1,
            content_dim: 16,
            downsample_channels: [8, 8, 8, 8],
            out_dim: 16,
            attention_dim: 8,
            hidden: 16,
            encoder_blocks: 1,
            decoder_blocks: 1,
            ffn_mult: 2,
            ffn_kernel1: 3,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            batch_size: 2,
            max_steps: 6,
            warmup_steps: 4,
            checkpoint_every: 3,
            holdout_per_speaker: 1,
            ..TrainConfig::default()
        },
    }
}

/// Corpus, config file, and one trained checkpoint shared by every test.
struct Fixture {
    _dir: tempfile::TempDir,
    manifest: PathBuf,
    config: PathBuf,
    checkpoint: PathBuf,
}

static FIXTURE: LazyLock<Fixture> = LazyLock::new(|| {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    // Utterance length floor: ablation re-encodes free-running synthesis, and
    // a six-step model emits roughly one frame per phoneme. Nine phonemes is
    // the shortest output that still leaves two rows at every stage of the
    // deepest (factor-16) pooling pyramid these tests exercise.
    let manifest_out = run_ok(&[
        "gen-corpus",
        root.join("corpus").to_str().unwrap(),
        "--utterances-per-speaker",
        "3",
        "--len-min",
        "9",
        "--len-max",
        "12",
        "--dur-min",
        "5",
        "--dur-max",
        "7",
    ]);
    let manifest = PathBuf::from(manifest_out.trim());
    assert!(manifest.is_file(), "gen-corpus printed the manifest path");

    let config = root.join("micro.cfg");
    save_config(&config, &micro_config()).unwrap();

    let checkpoint = root.join("model.ckpt");
    run_ok(&[
        "--config",
        config.to_str().unwrap(),
        "train",
        manifest.to_str().unwrap(),
        checkpoint.to_str().unwrap(),
    ]);
    Fixture { _dir: dir, manifest, config, checkpoint }
});

fn fixture_mel(name: &str) -> PathBuf {
    FIXTURE.manifest.parent().unwrap().join("mels").join(name)
}

fn fixture_align(name: &str) -> PathBuf {
    FIXTURE.manifest.parent().unwrap().join("align").join(name)
}

#[test]
fn train_output_is_byte_identical_across_reruns() {
    let f = &*FIXTURE;
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = (f.config.to_str().unwrap(), f.manifest.to_str().unwrap());
    let mut outputs = Vec::new();
    for name in ["a.ckpt", "b.ckpt"] {
        let ck = dir.path().join(name);
        let stdout = run_ok(&["--config", cfg, "train", manifest, ck.to_str().unwrap()]);
        outputs.push((std::fs::read(&ck).unwrap(), std::fs::read(ck.with_extension("ckpt.log")).unwrap(), stdout));
    }
    assert_eq!(outputs[0].0, outputs[1].0, "checkpoints differ");
    assert_eq!(outputs[0].1, outputs[1].1, "log files differ");
    assert_eq!(outputs[0].2, outputs[1].2, "stdout differs");

    let log = String::from_utf8(outputs[0].1.clone()).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 7, "header plus one line per step");
    assert_eq!(lines[0], "# step total mel dur pce sce lr");
    assert_eq!(log, outputs[0].2, "log file mirrors stdout");
}

#[test]
fn synth_is_deterministic_and_round_trips() {
    let f = &*FIXTURE;
    let dir = tempfile::tempdir().unwrap();
    let reference = fixture_mel("u0000.mel");
    let out_a = dir.path().join("a.mel");
    let out_b = dir.path().join("b.mel");
    let stdout_a = run_ok(&[
        "synth",
        f.checkpoint.to_str().unwrap(),
        "3,1,4",
        reference.to_str().unwrap(),
        out_a.to_str().unwrap(),
    ]);
    let stdout_b = run_ok(&[
        "synth",
        f.checkpoint.to_str().unwrap(),
        "p3,p1,p4",
        reference.to_str().unwrap(),
        out_b.to_str().unwrap(),
    ]);
    assert_eq!(std::fs::read(&out_a).unwrap(), std::fs::read(&out_b).unwrap());
    assert_eq!(stdout_a, stdout_b);

    let frames: usize = stdout_a
        .trim()
        .strip_prefix("predicted_frames ")
        .expect("frame-count line")
        .parse()
        .unwrap();
    let mel = load_mel(&out_a).unwrap();
    assert_eq!(mel.t_len(), frames, "printed count matches the file");
}

#[test]
fn align_dump_writes_a_labeled_stochastic_matrix() {
    let f = &*FIXTURE;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("att.txt");
    run_ok(&[
        "align-dump",
        f.checkpoint.to_str().unwrap(),
        "3,1,4,2",
        fixture_mel("u0001.mel").to_str().unwrap(),
        fixture_align("u0001.align").to_str().unwrap(),
        out.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    let (phonemes, labels, weights) = parse_attention_matrix(&text, "att.txt").unwrap();
    assert_eq!(phonemes, vec![3, 1, 4, 2]);
    assert_eq!(weights.rows(), 4);
    assert_eq!(weights.cols(), labels.len());
    for r in 0..weights.rows() {
        let sum: f64 = weights.row(r).iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "row {r} sums to {sum}");
    }
}

#[test]
fn embed_dump_writes_one_line_per_phoneme_position() {
    let f = &*FIXTURE;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("emb.txt");
    run_ok(&[
        "embed-dump",
        f.checkpoint.to_str().unwrap(),
        f.manifest.to_str().unwrap(),
        out.to_str().unwrap(),
    ]);
    let expected: usize = load_corpus(&f.manifest)
        .unwrap()
        .iter()
        .map(|r| r.phonemes.len())
        .sum();
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), expected);
}

#[test]
fn resume_continues_to_the_same_checkpoint_and_log_tail() {
    let f = &*FIXTURE;
    let dir = tempfile::tempdir().unwrap();
    // Stage a mid-run snapshot the way a crash would leave one: three of the
    // six configured steps done.
    let records = load_corpus(&f.manifest).unwrap();
    let mut trainer = Trainer::new(micro_config(), records).unwrap();
    for _ in 0..3 {
        trainer.step().unwrap();
    }
    let partial = dir.path().join("partial.ckpt");
    trainer.save(&partial).unwrap();

    let resumed = dir.path().join("resumed.ckpt");
    let stdout = run_ok(&[
        "train",
        f.manifest.to_str().unwrap(),
        resumed.to_str().unwrap(),
        "--resume",
        partial.to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(&resumed).unwrap(),
        std::fs::read(&f.checkpoint).unwrap(),
        "resumed run ends at the uninterrupted run's exact checkpoint"
    );

    let full_log = std::fs::read_to_string(f.checkpoint.with_extension("ckpt.log")).unwrap();
    let full: Vec<&str> = full_log.lines().collect();
    let tail: Vec<&str> = stdout.lines().collect();
    assert_eq!(tail[0], full[0], "header repeated");
    assert_eq!(&tail[1..], &full[4..], "resumed log continues at step 4");
}

#[test]
fn resume_rejects_a_conflicting_config() {
    let f = &*FIXTURE;
    let (code, _, stderr) = run(&[
        "--seed",
        "99",
        "train",
        f.manifest.to_str().unwrap(),
        "/dev/null",
        "--resume",
        f.checkpoint.to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "{stderr}");
    assert!(stderr.contains("differs"), "{stderr}");
}

#[test]
fn cls_mode_trains_but_refuses_attention_dumps() {
    let f = &*FIXTURE;
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("cls.ckpt");
    run_ok(&[
        "--config",
        f.config.to_str().unwrap(),
        "train",
        f.manifest.to_str().unwrap(),
        ck.to_str().unwrap(),
        "--mode",
        "cls",
    ]);
    assert_eq!(
        load_checkpoint(&ck).unwrap().config.model.mode,
        ConditioningMode::Cls
    );
    let (code, _, stderr) = run(&[
        "align-dump",
        ck.to_str().unwrap(),
        "1,2",
        fixture_mel("u0000.mel").to_str().unwrap(),
        fixture_align("u0000.align").to_str().unwrap(),
        "/dev/null",
    ]);
    assert_eq!(code, 2);
    assert!(stderr.contains("mode mismatch"), "{stderr}");
}

#[test]
fn ablate_single_factor_matches_train_plus_manual_evaluation() {
    let f = &*FIXTURE;
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("report.txt");
    run_ok(&[
        "--config",
        f.config.to_str().unwrap(),
        "ablate",
        f.manifest.to_str().unwrap(),
        report_path.to_str().unwrap(),
        "--factors",
        "16",
    ]);
    let text = std::fs::read_to_string(&report_path).unwrap();
    let rows = parse_ablation_report(&text, "report").unwrap();
    assert_eq!(rows.len(), 1);
    let row = rows[0];
    assert_eq!(row.factor, 16);
    assert!((-1.0..=1.0).contains(&row.cosine_similarity));

    // The same factor by hand: train on the split's training half via the
    // CLI, then evaluate the restored model on the held-out half.
    let cfg = micro_config();
    let records = load_corpus(&f.manifest).unwrap();
    let (train_recs, eval_recs) = split_corpus(records, cfg.train.holdout_per_speaker).unwrap();
    let split_manifest = save_corpus(&dir.path().join("split"), &train_recs).unwrap();
    let ck = dir.path().join("manual.ckpt");
    run_ok(&[
        "--config",
        f.config.to_str().unwrap(),
        "train",
        split_manifest.to_str().unwrap(),
        ck.to_str().unwrap(),
        "--factor",
        "16",
    ]);
    let restored = load_checkpoint(&ck).unwrap().restore().unwrap();
    let manual = evaluate(&restored.model, &restored.store, &eval_recs).unwrap();
    assert_eq!(manual.cosine_similarity.to_bits(), row.cosine_similarity.to_bits());
    assert_eq!(manual.duration_mae.to_bits(), row.duration_mae.to_bits());
    assert_eq!(manual.phoneme_accuracy.to_bits(), row.phoneme_accuracy.to_bits());
}

#[test]
fn ablate_threads_do_not_change_the_report() {
    let f = &*FIXTURE;
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq.txt");
    let par = dir.path().join("par.txt");
    let manifest = f.manifest.to_str().unwrap();
    let cfg = f.config.to_str().unwrap();
    run_ok(&["--config", cfg, "ablate", manifest, seq.to_str().unwrap(), "--factors", "1,16"]);
    run_ok(&[
        "--config", cfg, "--threads", "2", "ablate", manifest, par.to_str().unwrap(),
        "--factors", "1,16",
    ]);
    assert_eq!(std::fs::read(&seq).unwrap(), std::fs::read(&par).unwrap());
}

#[test]
fn cosine_command_prints_similarity_and_rejects_zero_vectors() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.vec");
    let b = dir.path().join("b.vec");
    let z = dir.path().join("z.vec");
    std::fs::write(&a, "1 0 2\n").unwrap();
    std::fs::write(&b, "2 0 4\n").unwrap();
    std::fs::write(&z, "0 0 0\n").unwrap();
    let stdout = run_ok(&["cosine", a.to_str().unwrap(), b.to_str().unwrap()]);
    let v: f64 = stdout.trim().parse().unwrap();
    assert!((v - 1.0).abs() < 1e-12, "scale invariance: {v}");
    let (code, _, stderr) = run(&["cosine", a.to_str().unwrap(), z.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(stderr.contains("zero vector"), "{stderr}");
}

#[test]
fn invalid_inputs_exit_with_code_two_and_name_the_problem() {
    let f = &*FIXTURE;
    let mel = fixture_mel("u0000.mel");
    let cases: Vec<(Vec<&str>, &str)> = vec![
        (vec!["train", "/no/such/manifest.txt", "/dev/null"], "/no/such/manifest.txt"),
        (
            vec!["--config", "/no/such.cfg", "train", f.manifest.to_str().unwrap(), "/dev/null"],
            "/no/such.cfg",
        ),
        (
            vec![
                "--config",
                f.config.to_str().unwrap(),
                "ablate",
                f.manifest.to_str().unwrap(),
                "/dev/null",
                "--factors",
                "2",
            ],
            "must be one of",
        ),
        (
            vec![
                "synth",
                f.checkpoint.to_str().unwrap(),
                "900",
                mel.to_str().unwrap(),
                "/dev/null",
            ],
            "vocabulary",
        ),
        (
            vec![
                "--threads",
                "0",
                "cosine",
                f.config.to_str().unwrap(),
                f.config.to_str().unwrap(),
            ],
            "--threads",
        ),
    ];
    for (args, needle) in cases {
        let (code, _, stderr) = run(&args);
        assert_eq!(code, 2, "args {args:?}: {stderr}");
        assert!(stderr.contains(needle), "args {args:?}: {stderr}");
    }
}
