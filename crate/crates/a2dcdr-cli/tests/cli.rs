//! End-to-end tests of the command-line pipeline, driving the compiled
//! binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_a2dcdr"))
}

fn run(args: &[&str]) -> Output {
    binary().args(args).output().expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn prepare_tiny(dir: &Path, seed: u64) -> PathBuf {
    let data = dir.join(format!("data{seed}"));
    let out = run(&[
        "prepare",
        "--synthetic",
        "--users",
        "40",
        "--items-a",
        "50",
        "--items-b",
        "45",
        "--interactions-per-user",
        "5",
        "--negatives",
        "25",
        "--seed",
        &seed.to_string(),
        "--out",
        data.to_str().unwrap(),
        "--quiet",
    ]);
    assert_success(&out);
    data
}

const TINY_TRAIN: &[&str] = &[
    "--dim",
    "6",
    "--layers",
    "1",
    "--batch-size",
    "32",
    "--epochs",
    "2",
    "--eval-every",
    "2",
    "--learning-rate",
    "0.01",
    "--club-inner-steps",
    "1",
    "--seed",
    "5",
];

fn train_tiny(data: &Path, runs: &Path) -> PathBuf {
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        runs.to_str().unwrap(),
        "--quiet",
    ];
    args.extend_from_slice(TINY_TRAIN);
    let out = run(&args);
    assert_success(&out);
    // Exactly one run directory.
    let entries: Vec<_> = fs::read_dir(runs)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(entries.len(), 1, "expected one run dir, got {entries:?}");
    entries.into_iter().next().unwrap()
}

#[test]
fn prepare_writes_dataset_candidates_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare_tiny(dir.path(), 7);
    for name in [
        "manifest.json",
        "train_a.tsv",
        "train_b.tsv",
        "test_a.tsv",
        "test_b.tsv",
        "candidates_a.tsv",
        "candidates_b.tsv",
        "prepare_manifest.json",
    ] {
        assert!(data.join(name).exists(), "missing {name}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data.join("prepare_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["command"], "prepare");
    assert!(manifest["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .any(|a| a.as_str().unwrap().ends_with("candidates_a.tsv")));
}

#[test]
fn prepare_requires_an_input_mode() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["prepare", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("--synthetic") || stderr.contains("--input-a"),
        "{stderr}"
    );
}

#[test]
fn conflicting_input_modes_are_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("a.tsv");
    fs::write(&file, "u\ti\n").unwrap();
    let out = run(&[
        "prepare",
        "--synthetic",
        "--input-a",
        file.to_str().unwrap(),
        "--input-b",
        file.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn prepare_is_idempotent_with_identical_fingerprints() {
    let dir = tempfile::tempdir().unwrap();
    let d1 = prepare_tiny(dir.path(), 11);
    let manifest1 = fs::read_to_string(d1.join("manifest.json")).unwrap();
    let cands1 = fs::read_to_string(d1.join("candidates_a.tsv")).unwrap();
    // Rewrite into a different directory with the same flags.
    let d2dir = tempfile::tempdir().unwrap();
    let d2 = prepare_tiny(d2dir.path(), 11);
    assert_eq!(manifest1, fs::read_to_string(d2.join("manifest.json")).unwrap());
    assert_eq!(cands1, fs::read_to_string(d2.join("candidates_a.tsv")).unwrap());
}

#[test]
fn train_writes_run_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare_tiny(dir.path(), 3);
    let run1 = train_tiny(&data, &dir.path().join("runs1"));
    for name in [
        "config.json",
        "trainlog.json",
        "timings.csv",
        "eval_report.json",
        "run_manifest.json",
        "checkpoint_best/manifest.json",
        "checkpoint_best/params.bin",
        "checkpoint_best/config.json",
        "checkpoint_final/params.bin",
    ] {
        assert!(run1.join(name).exists(), "missing {name}");
    }
    // Run-directory name embeds the config hash.
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run1.join("run_manifest.json")).unwrap())
            .unwrap();
    let hash = manifest["config_hash"].as_str().unwrap();
    assert!(run1.file_name().unwrap().to_str().unwrap().starts_with(hash));

    let run2 = train_tiny(&data, &dir.path().join("runs2"));
    assert_eq!(
        fs::read(run1.join("trainlog.json")).unwrap(),
        fs::read(run2.join("trainlog.json")).unwrap(),
        "train logs must be byte-identical for the same config and seed"
    );
    assert_eq!(
        fs::read(run1.join("checkpoint_final/params.bin")).unwrap(),
        fs::read(run2.join("checkpoint_final/params.bin")).unwrap()
    );
}

#[test]
fn invalid_config_values_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare_tiny(dir.path(), 9);
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("runs").to_str().unwrap(),
        "--epochs",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));
}

#[test]
fn eval_reads_a_checkpoint_and_reports_both_domains() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare_tiny(dir.path(), 13);
    let run_dir = train_tiny(&data, &dir.path().join("runs"));
    let eval_dir = dir.path().join("eval");
    let out = run(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        run_dir.join("checkpoint_best").to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
        "--sparsity",
        "--export-reps",
        eval_dir.join("reps.tsv").to_str().unwrap(),
        "--sample-size",
        "8",
    ]);
    assert_success(&out);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("eval_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["domains"].as_array().unwrap().len(), 2);
    assert!(report["sparsity"].is_array());
    let reps = fs::read_to_string(eval_dir.join("reps.tsv")).unwrap();
    assert_eq!(reps.lines().count(), 1 + 3 * 8);

    // The train-time best report and a fresh eval of the best checkpoint
    // agree because both use the prepared candidate sets.
    let trained: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("eval_report.json")).unwrap())
            .unwrap();
    assert_eq!(trained["domains"], report["domains"]);
}

#[test]
fn ablate_emits_all_four_variants() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare_tiny(dir.path(), 17);
    let out_dir = dir.path().join("ablate");
    let mut args = vec![
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--quiet",
    ];
    args.extend_from_slice(TINY_TRAIN);
    let out = run(&args);
    assert_success(&out);
    let table: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("ablation.json")).unwrap()).unwrap();
    let rows = table.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let variants: Vec<&str> = rows
        .iter()
        .map(|r| r["variant"].as_str().unwrap())
        .collect();
    assert_eq!(variants, ["inter_only", "intra_inter", "wo_tafc", "full"]);
}

#[test]
fn gradcheck_passes_and_prints_per_term_errors() {
    let out = run(&["gradcheck"]);
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for term in [
        "propagate",
        "dc_mmd",
        "club",
        "variational_likelihood",
        "reconstruction",
        "tafc_bce",
    ] {
        assert!(stdout.contains(term), "missing {term} in:\n{stdout}");
    }
    assert!(stdout.contains("PASS"));
}

#[test]
fn ingestion_path_reproduces_known_counts() {
    // Documented format: per-domain tab-separated user/item[/timestamp]
    // files with fully shared users; leave-one-out split.
    let dir = tempfile::tempdir().unwrap();
    let mut a = String::new();
    let mut b = String::new();
    // 4 users; user counts: a = (3, 2, 2, 1), b = (2, 2, 2, 2).
    for (u, items) in [(0, 3), (1, 2), (2, 2), (3, 1)] {
        for i in 0..items {
            a.push_str(&format!("u{u}\ta{i}\t{i}\n"));
        }
    }
    for u in 0..4 {
        for i in 0..2 {
            b.push_str(&format!("u{u}\tb{}\t{i}\n", (u + i) % 3));
        }
    }
    let fa = dir.path().join("a.tsv");
    let fb = dir.path().join("b.tsv");
    fs::write(&fa, a).unwrap();
    fs::write(&fb, b).unwrap();
    let data = dir.path().join("data");
    let out = run(&[
        "prepare",
        "--input-a",
        fa.to_str().unwrap(),
        "--input-b",
        fb.to_str().unwrap(),
        "--negatives",
        "1",
        "--out",
        data.to_str().unwrap(),
        "--quiet",
    ]);
    assert_success(&out);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["user_count"], 4);
    assert_eq!(manifest["item_counts"][0], 3);
    assert_eq!(manifest["item_counts"][1], 3);
    // Leave-one-out: users with >= 2 interactions contribute one test row.
    assert_eq!(manifest["train_sizes"][0], 8 - 3);
    assert_eq!(manifest["test_sizes"][0], 3);
    assert_eq!(manifest["train_sizes"][1], 4);
    assert_eq!(manifest["test_sizes"][1], 4);
}
