use std::path::{Path, PathBuf};
use std::process::Command;

use mope::layout::{build_layout, build_stage1_mask};
use mope_cli::run;

fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn tiny() -> PathBuf {
    workspace_file("configs/tiny.toml")
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("mope-baf").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(cli(&["--help"]).0, 0);
    assert_eq!(cli(&["--version"]).0, 0);
    assert_eq!(cli(&["frobnicate"]).0, 2);
    assert_eq!(cli(&["train"]).0, 2);
    assert_eq!(cli(&["dump-mask", "--stage", "3"]).0, 2);
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_mope-baf");
    let ok = Command::new(bin).args(["dump-mask"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    let bad = Command::new(bin).args(["train", "--config", "/nonexistent.toml"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn dump_mask_matches_layout_oracle() {
    let (code, out, _) = cli(&["dump-mask", "--vp", "1", "--lp", "1", "--img", "1", "--txt", "1"]);
    assert_eq!(code, 0);
    let expected = "     VP  LP IMG TXT
VP    1   0   1   0
LP    0   1   0   1
IMG   1   0   1   1
TXT   0   1   1   1
";
    assert_eq!(out, expected);

    let (_, out, _) = cli(&["dump-mask", "--vp", "2", "--lp", "3", "--img", "4", "--txt", "2"]);
    let layout = build_layout(2, 3, 4, 2, 1).unwrap();
    let mask = build_stage1_mask(&layout);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 1 + layout.total_len());
    for (r, line) in lines[1..].iter().enumerate() {
        let cells: Vec<bool> = line.split_whitespace().skip(1).map(|c| c == "1").collect();
        assert_eq!(cells.len(), layout.total_len());
        assert_eq!(cells, mask.row(r));
    }
}

#[test]
fn dump_mask_stage_two_is_all_ones() {
    let (code, out, _) = cli(&["dump-mask", "--stage", "2", "--vlp", "2", "--img", "3", "--txt", "2"]);
    assert_eq!(code, 0);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 8);
    for line in &lines[1..] {
        let cells: Vec<&str> = line.split_whitespace().skip(1).collect();
        assert_eq!(cells.len(), 7);
        assert!(cells.iter().all(|&c| c == "1"));
    }
}

#[test]
fn dump_mask_reads_config_lengths() {
    let (code, out, _) = cli(&["dump-mask", "--config", p(&tiny())]);
    assert_eq!(code, 0);
    // 2 + 2 prompts, 4 patches, 8 text slots
    assert_eq!(out.lines().count(), 1 + 16);
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let (code, out, err) = cli(&["train", "--config", p(&tiny()), "--out", p(&a)]);
    assert_eq!(code, 0, "{err}");
    let printed: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(printed["dev"]["accuracy"].is_number());
    for f in ["best.ckpt", "final.ckpt", "trace.csv", "metrics.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(cli(&["train", "--config", p(&tiny()), "--out", p(&b)]).0, 0);
    let trace_a = std::fs::read_to_string(a.join("trace.csv")).unwrap();
    assert_eq!(trace_a, std::fs::read_to_string(b.join("trace.csv")).unwrap());
    assert_eq!(
        std::fs::read(a.join("final.ckpt")).unwrap(),
        std::fs::read(b.join("final.ckpt")).unwrap()
    );
    assert!(trace_a.starts_with("step,"));
}

#[test]
fn invalid_config_is_rejected_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(
        &cfg,
        "[model]\nstage1_layers = 6\nblock_count = 7\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let (code, _, err) = cli(&["train", "--config", p(&cfg), "--out", p(&out_dir)]);
    assert_eq!(code, 2);
    assert!(err.contains("block"), "{err}");
    assert!(!out_dir.exists());

    std::fs::write(&cfg, "[train]\npeak_lr = 1e-3\nlearning_rate = 1.0\n").unwrap();
    let (code, _, err) = cli(&["train", "--config", p(&cfg)]);
    assert_eq!(code, 2);
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn multi_run_train_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, err) = cli(&["train", "--config", p(&tiny()), "--runs", "2", "--seed", "5", "--out", p(dir.path())]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["runs"], 2);
    assert!(v["summary"]["accuracy"].as_str().unwrap().contains('('));
    assert!(dir.path().join("seed-5/best.ckpt").exists());
    assert!(dir.path().join("seed-6/best.ckpt").exists());
}

#[test]
fn eval_reproduces_dev_metrics_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, _) = cli(&["train", "--config", p(&tiny()), "--out", p(dir.path())]);
    assert_eq!(code, 0);
    let trained: serde_json::Value = serde_json::from_str(&out).unwrap();
    let best = dir.path().join("best.ckpt");

    let (code, out, _) = cli(&["eval", "--checkpoint", p(&best), "--split", "dev"]);
    assert_eq!(code, 0);
    let dev: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(dev, trained["dev"]);

    let (_, out, _) = cli(&["eval", "--checkpoint", p(&best)]);
    let test: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(test, trained["test"]);

    let (code, out, _) = cli(&["eval", "--checkpoint", p(&best), "--runs", "3", "--seeds", "1,2,3"]);
    assert_eq!(code, 0);
    let agg: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(agg["runs"], 3);
    assert_eq!(agg["seeds"], serde_json::json!([1, 2, 3]));
    assert!(agg["summary"]["f1"].is_string());
}

#[test]
fn corrupted_checkpoint_fails_with_checksum_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["train", "--config", p(&tiny()), "--out", p(dir.path())]).0, 0);
    let path = dir.path().join("final.ckpt");
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 20] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    let (code, _, err) = cli(&["eval", "--checkpoint", p(&path)]);
    assert_eq!(code, 1);
    assert!(err.to_lowercase().contains("checksum"), "{err}");
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let (code, out, _) = cli(&["gradcheck", "--config", p(&tiny())]);
    assert_eq!(code, 0, "{out}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["max_rel_error"].as_f64().unwrap() <= 1e-4);
    assert!(v["worst_param"].is_string());

    let (code, out, err) = cli(&["gradcheck", "--config", p(&tiny()), "--corrupt-backward"]);
    assert_eq!(code, 1);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["worst_param"].as_str().unwrap().contains("fc1"), "{v}");
    assert!(err.contains("fc1"));
}

#[test]
fn gradcheck_refuses_large_models() {
    let (code, _, err) = cli(&["gradcheck", "--config", p(&workspace_file("configs/desk.toml"))]);
    assert_eq!(code, 2);
    assert!(err.contains("refusing"), "{err}");
}

#[test]
fn ablate_emits_one_row_per_value_and_survives_failures() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, err) = cli(&[
        "ablate", "--config", p(&tiny()), "--axis", "block_count", "--values", "1,2,3", "--out", p(dir.path()),
    ]);
    assert_eq!(code, 0, "{err}");
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "value,mean_f1,sd,runs_ok,runs_failed");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1,") && lines[1].ends_with(",1,0"));
    assert!(lines[2].starts_with("2,") && lines[2].ends_with(",1,0"));
    // two stage-1 layers cannot form three blocks
    assert!(lines[3].starts_with("3,NaN,NaN,0,1"), "{}", lines[3]);
    assert!(err.contains("block_count=3"));
    assert_eq!(std::fs::read_to_string(dir.path().join("ablate-block_count.csv")).unwrap(), out);
}

#[test]
fn ablate_prompt_length_zero_is_base_model_row() {
    let (code, out, err) = cli(&[
        "ablate", "--config", p(&tiny()), "--axis", "prompt_length", "--values", "0,2", "--runs", "2",
    ]);
    assert_eq!(code, 0, "{err}");
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "0");
    assert_eq!(rows[0][3], "2");
    let f: f64 = rows[0][1].parse().unwrap();
    assert!((0.0..=1.0).contains(&f));
}
