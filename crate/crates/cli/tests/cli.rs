use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
[crop]
out_resolution = [64, 64]

[synthetic]
frame_size = [64, 64]
target_size = [10.0, 10.0]
length = 16

[seg]
iter_init = 2

[inst]
iter_init = 2

[tracker]
augmentations = 1
"#;

fn segtrack(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segtrack"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Temp dir with a tiny config, a one-step checkpoint and one sequence.
fn setup() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    fs::write(root.join("config.toml"), TINY_CONFIG).unwrap();
    ok(&segtrack(&["train", "--config", "config.toml", "--out", "model", "--steps", "2", "--sequential"], &root));
    ok(&segtrack(&["gen", "--config", "config.toml", "--out", "seq"], &root));
    (tmp, root)
}

#[test]
fn train_writes_checkpoint_log_and_config() {
    let (_tmp, root) = setup();
    for f in ["checkpoint.json", "train_log.csv", "config.toml"] {
        assert!(root.join("model").join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(root.join("model/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn track_is_reproducible_and_writes_one_box_per_frame() {
    let (_tmp, root) = setup();
    let args = |out: &str| {
        vec![
            "track", "seq", "--config", "config.toml", "--checkpoint", "model/checkpoint.json", "--out", out, "--masks", "on",
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>()
    };
    let run = |out: &str| {
        let a = args(out);
        ok(&segtrack(&a.iter().map(String::as_str).collect::<Vec<_>>(), &root));
        fs::read_to_string(root.join(out).join("boxes.txt")).unwrap()
    };
    let first = run("a");
    assert_eq!(first.lines().count(), 16);
    assert_eq!(first, run("b"));
    assert_eq!(fs::read_dir(root.join("a/masks")).unwrap().count(), 16);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("a/manifest.json")).unwrap()).unwrap();
    assert!(manifest["config_hash"].as_str().is_some_and(|h| h.len() == 64));
    assert_eq!(manifest["frames"].as_array().map(Vec::len), Some(16));
}

#[test]
fn missing_inputs_exit_with_code_two() {
    let (_tmp, root) = setup();
    let out = segtrack(&["track", "seq", "--checkpoint", "nope.json", "--out", "x"], &root);
    assert_eq!(out.status.code(), Some(2));
    let out = segtrack(&["track", "missing_seq", "--checkpoint", "model/checkpoint.json", "--out", "x"], &root);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_of_ground_truth_scores_every_threshold_but_the_last() {
    let (_tmp, root) = setup();
    fs::create_dir(root.join("perfect")).unwrap();
    fs::copy(root.join("seq/groundtruth.txt"), root.join("perfect/boxes.txt")).unwrap();
    let text = ok(&segtrack(&["eval", "perfect", "seq"], &root));
    let auc: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("auc="))
        .expect("auc line")
        .parse()
        .unwrap();
    assert!((auc - 20.0 / 21.0).abs() < 1e-12, "{auc}");
    assert!(root.join("perfect/metrics.txt").exists());
    assert!(root.join("perfect/success_curve.csv").exists());

    fs::create_dir(root.join("empty")).unwrap();
    let out = segtrack(&["eval", "empty", "seq"], &root);
    assert!(!out.status.success());
}

#[test]
fn ablate_prints_one_row_per_variant_and_rejects_unknown_axes() {
    let (_tmp, root) = setup();
    let text = ok(&segtrack(
        &["ablate", "tsc", "--config", "config.toml", "--checkpoint", "model/checkpoint.json", "--sequences", "1", "--out", "abl"],
        &root,
    ));
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].contains("0.20") && rows[2].contains("0.40"));
    assert!(root.join("abl/ablation.json").exists());

    let out = segtrack(&["ablate", "sideways", "--config", "config.toml", "--checkpoint", "model/checkpoint.json"], &root);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown ablation axis"));
}

#[test]
fn environment_overrides_reach_the_config() {
    let (_tmp, root) = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_segtrack"))
        .args(["track", "seq", "--config", "config.toml", "--checkpoint", "model/checkpoint.json", "--out", "env"])
        .env("SEGTRACK_TRACKER__T_SC", "0.45")
        .current_dir(&root)
        .output()
        .unwrap();
    ok(&out);
    let cfg = fs::read_to_string(root.join("env/config.toml")).unwrap();
    assert!(cfg.contains("t_sc = 0.45"), "{cfg}");
}
