use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use spiralcluster::formats;
use spiralcluster::pipeline::ImageGrid;

fn spiralcluster(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spiralcluster")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = spiralcluster(dir, args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn stage_commands_chain_into_a_scored_clustering() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "3", "--out", "data/ev.jsonl", "simulate", "--proton", "20", "--carbon", "20"]);
    assert!(d.join("data/ev.labels.csv").is_file());
    ok(d, &["--out", "img.atc", "preprocess", "--events", "data/ev.jsonl", "--resolution", "32"]);
    let images = formats::read_images(&d.join("img.atc")).unwrap();
    assert_eq!(images.len(), 40);
    assert_eq!((images[0].height, images[0].width), (32, 32));

    ok(d, &["--seed", "1", "--out", "z.atl", "features", "--images", "img.atc", "--out-dim", "32", "--pca", "8"]);
    let z = formats::read_latents(&d.join("z.atl")).unwrap();
    assert_eq!((z.rows, z.dim), (40, 8));

    ok(
        d,
        &[
            "--seed",
            "1",
            "--out",
            "km.json",
            "kmeans",
            "--latents",
            "z.atl",
            "--labels",
            "img.labels.csv",
            "--pred",
            "pred.csv",
            "--n-runs",
            "3",
        ],
    );
    let stats = json(&d.join("km.json"));
    assert_eq!(stats["runs"].as_array().unwrap().len(), 3);

    ok(d, &["--out", "report.json", "evaluate", "--truth", "img.labels.csv", "--pred", "pred.csv"]);
    let report = json(&d.join("report.json"));
    assert_eq!(report["n"], 40);
    // The saved assignments are the top-1 run, so rescoring them reproduces it.
    assert_eq!(report["ari"], stats["top1"]["ari"]);
    assert_eq!(report["accuracy"], stats["top1"]["accuracy"]);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = spiralcluster(d, &["--out", "x.json", "evaluate", "--truth", "nope.csv", "--pred", "nope.csv"]);
    assert_eq!(code(&missing), 4);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.csv"));

    ok(d, &["--out", "ev.jsonl", "simulate", "--proton", "3", "--carbon", "3"]);
    assert_eq!(
        code(&spiralcluster(d, &["--out", "img.atc", "preprocess", "--events", "ev.jsonl", "--resolution", "0"])),
        2
    );
    assert_eq!(code(&spiralcluster(d, &["preprocess", "--events", "ev.jsonl"])), 2, "missing --out");
    assert_eq!(code(&spiralcluster(d, &["pipeline"])), 2, "missing --manifest");
    assert_eq!(code(&spiralcluster(d, &["simulate", "--bogus"])), 2, "unknown flag");
    fs::write(d.join("garbage.atc"), b"NOPE").unwrap();
    assert_eq!(code(&spiralcluster(d, &["--out", "z.atl", "features", "--images", "garbage.atc"])), 4);
}

#[test]
fn collapsed_training_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut img = ImageGrid::zeros(16, 16);
    img.values[5 * 16 + 7] = 1.0;
    img.values[6 * 16 + 8] = 0.5;
    formats::write_images(&d.join("same.atc"), &vec![img; 40]).unwrap();
    let out = spiralcluster(
        d,
        &[
            "--seed",
            "1",
            "--out",
            "run",
            "mixae",
            "train",
            "--images",
            "same.atc",
            "--filters",
            "4,3",
            "--latent-dim",
            "6",
            "--epochs",
            "6",
            "--batch",
            "16",
        ],
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(json(&d.join("run/run.json"))["status"], "collapsed");
    assert!(d.join("run/history.csv").is_file() && d.join("run/checkpoint.atm").is_file());
}

#[test]
fn mixae_stability_writes_one_run_directory_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "4", "--out", "ev.jsonl", "simulate", "--proton", "12", "--carbon", "12"]);
    ok(d, &["--out", "img.atc", "preprocess", "--events", "ev.jsonl", "--resolution", "16"]);
    let stdout = ok(
        d,
        &[
            "--seed",
            "9",
            "--out",
            "study",
            "mixae",
            "stability",
            "--images",
            "img.atc",
            "--labels",
            "img.labels.csv",
            "--filters",
            "4,3",
            "--latent-dim",
            "6",
            "--epochs",
            "2",
            "--batch",
            "8",
            "--runs",
            "2",
        ],
    );
    assert!(stdout.contains("Top 1"));
    let report = json(&d.join("study/stability.json"));
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);
    assert!(d.join("study/run00/history.csv").is_file() && d.join("study/run01/run.json").is_file());
}

const MANIFEST: &str = r#"{
  "name": "cli-smoke",
  "seed": 7,
  "output_dir": "out",
  "dataset": { "kind": "simulate", "config": { "counts": { "proton": 30, "carbon": 30 } } },
  "preprocess": { "resolution": 32 },
  "labelled_fraction": 0.5,
  "features": { "kind": "standin", "out_dim": 32 },
  "clustering": { "kind": "kmeans", "config": { "k": 2, "m_inits": 3, "n_runs": 3 } }
}"#;

#[test]
fn pipeline_reports_replay_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("m.json"), MANIFEST).unwrap();
    ok(d, &["--manifest", "m.json", "pipeline"]);
    let first = fs::read(d.join("out/report.json")).unwrap();
    ok(d, &["--manifest", "m.json", "--out", "again", "pipeline"]);
    assert_eq!(first, fs::read(d.join("again/report.json")).unwrap());

    ok(d, &["--manifest", "m.json", "--seed", "8", "--out", "reseeded", "pipeline"]);
    assert_eq!(json(&d.join("reseeded/report.json"))["seed"], 8);

    let stdout = ok(d, &["--manifest", "m.json", "--out", "stab", "stability", "--runs", "5"]);
    assert_eq!(stdout.matches("run ").count(), 5);
    assert_eq!(json(&d.join("stab/report.json"))["stability"]["runs"].as_array().unwrap().len(), 5);
}
