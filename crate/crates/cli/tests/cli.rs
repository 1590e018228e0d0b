//! End-to-end tests of the `sumlm` binary: exit codes, file outputs, and
//! determinism of each subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sumlm_core::model::{load_checkpoint, ModelConfig, SummarizerLM};
use sumlm_core::tokenizer::Vocabulary;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sumlm"))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_exit(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

/// Writes a small dataset directory with train/validation splits drawn from
/// the bundled synthetic fixture.
fn small_data_dir(dir: &Path, train: usize, validation: usize) {
    let src = fs::read_to_string(fixtures().join("synthetic/train.jsonl")).unwrap();
    let lines: Vec<&str> = src.lines().collect();
    assert!(lines.len() >= train + validation);
    fs::write(
        dir.join("train.jsonl"),
        lines[..train].join("\n") + "\n",
    )
    .unwrap();
    fs::write(
        dir.join("validation.jsonl"),
        lines[train..train + validation].join("\n") + "\n",
    )
    .unwrap();
}

fn train_small_vocab(dir: &Path) -> PathBuf {
    let vocab_path = dir.join("vocab.txt");
    let output = run(&[
        "train-bpe",
        "--data",
        dir.to_str().unwrap(),
        "--vocab-size",
        "256",
        "--out",
        vocab_path.to_str().unwrap(),
    ]);
    assert_exit(&output, 0);
    vocab_path
}

#[test]
fn stats_reports_hand_enumerated_fixture_values() {
    let output = run(&["stats", "--data", fixtures().join("stats").to_str().unwrap()]);
    assert_exit(&output, 0);
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(report["split_sizes"]["train"], 5);
    let fractions = report["novel_ngram_fraction"].as_array().unwrap();
    let expected = [
        (0.0 + 1.0 / 5.0 + 0.0 + 3.0 / 4.0 + 0.0) / 5.0,
        (1.0 / 4.0 + 1.0 / 4.0 + 0.0 + 1.0 + 1.0 / 4.0) / 5.0,
        (1.0 / 3.0 + 1.0 / 3.0 + 1.0 + 1.0 / 3.0) / 4.0,
        (1.0 / 2.0 + 1.0 / 2.0 + 1.0 + 1.0 / 2.0) / 4.0,
    ];
    for (got, want) in fractions.iter().zip(expected) {
        assert_eq!(got.as_f64().unwrap(), want);
    }
    assert_eq!(report["mean_article_words"].as_f64().unwrap(), 34.0 / 5.0);
    assert_eq!(report["mean_summary_words"].as_f64().unwrap(), 21.0 / 5.0);
}

#[test]
fn stats_is_deterministic_across_runs() {
    let args = ["stats", "--data"];
    let path = fixtures().join("stats");
    let a = run(&[args[0], args[1], path.to_str().unwrap()]);
    let b = run(&[args[0], args[1], path.to_str().unwrap()]);
    assert_exit(&a, 0);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn stats_on_missing_path_exits_two() {
    let output = run(&["stats", "--data", "/definitely/not/here"]);
    assert_exit(&output, 2);
}

#[test]
fn stats_on_empty_directory_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(&["stats", "--data", dir.path().to_str().unwrap()]);
    assert_exit(&output, 2);
    assert!(String::from_utf8_lossy(&output.stderr).contains("no train.jsonl"));
}

#[test]
fn train_bpe_writes_a_loadable_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    small_data_dir(dir.path(), 8, 2);
    let vocab_path = train_small_vocab(dir.path());
    let vocab = Vocabulary::load(&vocab_path).unwrap();
    assert!(vocab.vocab_size() > 50);
    let ids = vocab.encode("the council said");
    assert_eq!(vocab.decode(&ids.ids).unwrap(), "the council said");
}

#[test]
fn train_writes_checkpoints_metrics_and_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    small_data_dir(dir.path(), 8, 4);
    let vocab_path = train_small_vocab(dir.path());
    let out_dir = dir.path().join("run");
    let args = [
        "train",
        "--data",
        dir.path().to_str().unwrap(),
        "--vocab",
        vocab_path.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--schedule",
        "DAT+ETT",
        "--dat-epochs",
        "1",
        "--ett-epochs",
        "1",
        "--batch-size",
        "4",
        "--learning-rate",
        "1e-3",
        "--seed",
        "3",
        "--eval-subset-size",
        "2",
        "--d-model",
        "32",
        "--quiet",
    ];
    let output = bin().args(args).output().unwrap();
    assert_exit(&output, 0);
    for file in ["last.ckpt", "best.ckpt", "metrics.jsonl", "run_config.json", "train_config.txt"] {
        assert!(out_dir.join(file).is_file(), "{file} missing");
    }
    let metrics_a = fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics_a.lines().count(), 4); // 2 steps per epoch, 2 phases

    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("run_config.json")).unwrap())
            .unwrap();
    assert_eq!(echoed["train_config"]["schedule"], "DAT+ETT");
    assert_eq!(echoed["model_config"]["d_model"], 32);

    // fixed-seed rerun reproduces the metric history byte for byte
    let out_dir2 = dir.path().join("run2");
    let mut args2: Vec<&str> = args.to_vec();
    let pos = args2.iter().position(|a| *a == out_dir.to_str().unwrap()).unwrap();
    let out_dir2_str = out_dir2.to_str().unwrap().to_string();
    let leaked: &'static str = Box::leak(out_dir2_str.into_boxed_str());
    args2[pos] = leaked;
    let output2 = bin().args(&args2).output().unwrap();
    assert_exit(&output2, 0);
    let metrics_b = fs::read_to_string(out_dir2.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics_a, metrics_b);
}

#[test]
fn zero_epoch_train_leaves_initialization_untouched() {
    let dir = tempfile::tempdir().unwrap();
    small_data_dir(dir.path(), 6, 2);
    let vocab_path = train_small_vocab(dir.path());
    let out_dir = dir.path().join("run");
    let output = run(&[
        "train",
        "--data",
        dir.path().to_str().unwrap(),
        "--vocab",
        vocab_path.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--schedule",
        "ETT",
        "--dat-epochs",
        "0",
        "--ett-epochs",
        "0",
        "--seed",
        "11",
        "--d-model",
        "32",
        "--quiet",
    ]);
    assert_exit(&output, 0);

    let vocab = Vocabulary::load(&vocab_path).unwrap();
    let expected_config = ModelConfig {
        n_blocks: 2,
        n_heads: 2,
        d_model: 32,
        vocab_size: vocab.vocab_size(),
        max_positions: 130,
        dropout: 0.0,
        max_article_tokens: 128,
        max_summary_tokens: 24,
    };
    let expected =
        SummarizerLM::init_parameters(expected_config, 11, &vocab.special()).unwrap();
    let loaded = load_checkpoint(&out_dir.join("last.ckpt")).unwrap();
    for ((_, a), (_, b)) in expected.params().iter().zip(loaded.model.params().iter()) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.value.values().iter().zip(b.value.values()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn pt_schedule_without_generic_corpus_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    small_data_dir(dir.path(), 6, 2);
    let vocab_path = train_small_vocab(dir.path());
    let output = run(&[
        "train",
        "--data",
        dir.path().to_str().unwrap(),
        "--vocab",
        vocab_path.to_str().unwrap(),
        "--out-dir",
        dir.path().join("run").to_str().unwrap(),
        "--schedule",
        "PT+ETT",
        "--quiet",
    ]);
    assert_exit(&output, 2);
}

#[test]
fn invalid_schedule_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    small_data_dir(dir.path(), 6, 2);
    let vocab_path = train_small_vocab(dir.path());
    let output = run(&[
        "train",
        "--data",
        dir.path().to_str().unwrap(),
        "--vocab",
        vocab_path.to_str().unwrap(),
        "--out-dir",
        dir.path().join("run").to_str().unwrap(),
        "--schedule",
        "DAT",
    ]);
    assert_exit(&output, 2);
}

fn quick_checkpoint(dir: &Path) -> (PathBuf, PathBuf) {
    small_data_dir(dir, 6, 2);
    let vocab_path = train_small_vocab(dir);
    let out_dir = dir.join("run");
    let output = run(&[
        "train",
        "--data",
        dir.to_str().unwrap(),
        "--vocab",
        vocab_path.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--schedule",
        "ETT",
        "--dat-epochs",
        "0",
        "--ett-epochs",
        "1",
        "--batch-size",
        "6",
        "--seed",
        "5",
        "--d-model",
        "32",
        "--eval-subset-size",
        "1",
        "--quiet",
    ]);
    assert_exit(&output, 0);
    (out_dir.join("best.ckpt"), vocab_path)
}

#[test]
fn generate_on_empty_input_writes_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, vocab) = quick_checkpoint(dir.path());
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = dir.path().join("gen.jsonl");
    let output = run(&[
        "generate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--data",
        empty.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--quiet",
    ]);
    assert_exit(&output, 0);
    assert_eq!(fs::read_to_string(&out).unwrap(), "");
}

#[test]
fn generate_orders_records_like_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, vocab) = quick_checkpoint(dir.path());
    let data = dir.path().join("train.jsonl");
    let out = dir.path().join("gen.jsonl");
    let output = run(&[
        "generate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--beam-size",
        "1",
        "--quiet",
    ]);
    assert_exit(&output, 0);
    let input_ids: Vec<String> = fs::read_to_string(&data)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["id"]
            .as_str()
            .unwrap()
            .to_string())
        .collect();
    let output_ids: Vec<String> = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["id"]
            .as_str()
            .unwrap()
            .to_string())
        .collect();
    assert_eq!(input_ids, output_ids);
}

#[test]
fn generate_with_mismatched_vocabulary_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = quick_checkpoint(dir.path());
    // a different vocabulary trained on different text
    let other_dir = tempfile::tempdir().unwrap();
    fs::write(
        other_dir.path().join("train.jsonl"),
        "{\"article\": \"zq zx zr zs\", \"summary\": \"zq zx\"}\n",
    )
    .unwrap();
    let other_vocab = train_small_vocab(other_dir.path());
    let out = dir.path().join("gen.jsonl");
    let output = run(&[
        "generate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--vocab",
        other_vocab.to_str().unwrap(),
        "--data",
        dir.path().join("train.jsonl").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--quiet",
    ]);
    assert_exit(&output, 2);
    assert!(String::from_utf8_lossy(&output.stderr).contains("vocabulary"));
}

fn write_candidates_from_references(references: &Path, out: &Path) {
    let mut lines = Vec::new();
    for line in fs::read_to_string(references).unwrap().lines() {
        let doc: serde_json::Value = serde_json::from_str(line).unwrap();
        lines.push(
            serde_json::json!({
                "id": doc["id"],
                "summary_text": doc["summary"],
                "log_prob": -1.0,
                "length": doc["summary"].as_str().unwrap().split_whitespace().count(),
            })
            .to_string(),
        );
    }
    fs::write(out, lines.join("\n") + "\n").unwrap();
}

#[test]
fn evaluate_identical_texts_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    small_data_dir(dir.path(), 6, 0);
    let references = dir.path().join("train.jsonl");
    let candidates = dir.path().join("cands.jsonl");
    write_candidates_from_references(&references, &candidates);
    let output = run(&[
        "evaluate",
        "--candidates",
        candidates.to_str().unwrap(),
        "--references",
        references.to_str().unwrap(),
    ]);
    assert_exit(&output, 0);
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    for metric in ["r1", "r2", "rl"] {
        assert_eq!(report[metric]["f1"].as_f64().unwrap(), 1.0, "{metric}");
    }
}

#[test]
fn evaluate_misaligned_counts_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    small_data_dir(dir.path(), 6, 0);
    let references = dir.path().join("train.jsonl");
    let candidates = dir.path().join("cands.jsonl");
    write_candidates_from_references(&references, &candidates);
    // drop one candidate line
    let content = fs::read_to_string(&candidates).unwrap();
    let shorter: Vec<&str> = content.lines().skip(1).collect();
    fs::write(&candidates, shorter.join("\n") + "\n").unwrap();
    let output = run(&[
        "evaluate",
        "--candidates",
        candidates.to_str().unwrap(),
        "--references",
        references.to_str().unwrap(),
    ]);
    assert_exit(&output, 2);
}

#[test]
fn evaluate_length_bins_counts_sum_to_documents() {
    let dir = tempfile::tempdir().unwrap();
    small_data_dir(dir.path(), 8, 0);
    let references = dir.path().join("train.jsonl");
    let candidates = dir.path().join("cands.jsonl");
    write_candidates_from_references(&references, &candidates);
    let output = run(&[
        "evaluate",
        "--candidates",
        candidates.to_str().unwrap(),
        "--references",
        references.to_str().unwrap(),
        "--length-bins",
        "3",
        "--efficiency",
    ]);
    assert_exit(&output, 0);
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    let total: u64 = report["length_bins"]["bins"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["count"].as_u64().unwrap())
        .sum();
    assert_eq!(total, 8);
    assert!(report["efficiency"]["rouge_l_vs_article"]["p"].is_number());
}
