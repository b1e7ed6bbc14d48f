//! Exit-code and artifact contract of the command-line binary: exit 0 on
//! success, 1 on runtime failure, 2 on usage errors, with the documented
//! files appearing in the output directories.

use std::path::{Path, PathBuf};
use std::process::Output;

use mgproto::config::ExperimentConfig;

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_mgproto")
}

fn run(args: &[&str]) -> Output {
    std::process::Command::new(binary())
        .args(args)
        .output()
        .expect("spawn mgproto")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_value(out: &Output, key: &str) -> f64 {
    let text = String::from_utf8_lossy(&out.stdout);
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix(key) {
            return rest.trim().parse().expect("numeric field");
        }
    }
    panic!("no `{key}` line in stdout: {text}");
}

/// A deliberately tiny two-class experiment so the whole flow stays fast.
fn tiny_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        num_classes: 2,
        parts_per_class: 1,
        raw_dim: 8,
        grid_height: 5,
        grid_width: 5,
        train_per_class: 12,
        test_per_class: 10,
        ood_per_class: 8,
        proto_dim: 6,
        num_prototypes: 2,
        memory_capacity: 200,
        epochs: 4,
        batch_size: 12,
        mining_levels: 4,
        ..ExperimentConfig::default()
    }
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).expect("json")).expect("write config");
    path
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let out = run(&[
        "train",
        "--config",
        "/definitely/absent-config.json",
        "--out",
        "/tmp/unused",
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(
        stderr(&out).contains("absent-config.json"),
        "stderr must name the missing path: {}",
        stderr(&out)
    );
}

#[test]
fn corrupt_checkpoint_magic_exits_2() {
    let dir = tempfile::tempdir().expect("temp dir");
    let fake = dir.path().join("fake.mgp");
    std::fs::write(&fake, b"NOTPROTO-garbage").expect("write");
    let out = run(&[
        "eval",
        "--checkpoint",
        fake.to_str().expect("utf8"),
        "--dataset",
        "irrelevant.bin",
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(
        stderr(&out).contains("bad magic"),
        "stderr must report the bad magic: {}",
        stderr(&out)
    );
}

#[test]
fn gen_data_train_eval_ood_prune_roundtrip() {
    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = tiny_config(5);
    let cfg_path = write_config(dir.path(), &cfg);
    let cfg_str = cfg_path.to_str().expect("utf8");

    // gen-data twice: byte-identical split files.
    let d1 = dir.path().join("data-1");
    let d2 = dir.path().join("data-2");
    for d in [&d1, &d2] {
        let out = run(&["gen-data", "--config", cfg_str, "--out", d.to_str().expect("utf8")]);
        assert!(out.status.success(), "gen-data failed: {}", stderr(&out));
    }
    let mut compared = 0usize;
    for entry in std::fs::read_dir(&d1).expect("read dir") {
        let name = entry.expect("entry").file_name();
        let a = std::fs::read(d1.join(&name)).expect("first file");
        let b = std::fs::read(d2.join(&name)).expect("second file");
        assert_eq!(a, b, "{name:?} differs between identical gen-data runs");
        compared += 1;
    }
    assert!(compared >= 3, "expected files for all three splits");

    // train: exit 0 and the documented artifacts.
    let run_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        cfg_str,
        "--out",
        run_dir.to_str().expect("utf8"),
    ]);
    assert!(out.status.success(), "train failed: {}", stderr(&out));
    for file in ["checkpoint.mgp", "metrics.csv", "grounding.json", "summary.json"] {
        assert!(run_dir.join(file).exists(), "missing artifact {file}");
    }
    let checkpoint = run_dir.join("checkpoint.mgp");
    let checkpoint_str = checkpoint.to_str().expect("utf8");

    // eval on the test split reproduces the accuracy logged by training.
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("summary.json")).expect("read"))
            .expect("summary json");
    let logged = summary["grounded_test_accuracy"]
        .as_f64()
        .expect("grounded test accuracy");
    let test_bin = d1.join("test.bin");
    let test_str = test_bin.to_str().expect("utf8");
    let out = run(&["eval", "--checkpoint", checkpoint_str, "--dataset", test_str]);
    assert!(out.status.success(), "eval failed: {}", stderr(&out));
    let acc = stdout_value(&out, "accuracy ");
    assert!(
        (acc - logged).abs() <= 1e-12,
        "eval accuracy {acc} vs training log {logged}"
    );

    // ood with identical ID and OoD files: exchangeable scores, AUROC 1/2.
    let out = run(&[
        "ood",
        "--checkpoint",
        checkpoint_str,
        "--id-data",
        test_str,
        "--ood-data",
        test_str,
    ]);
    assert!(out.status.success(), "ood failed: {}", stderr(&out));
    let area = stdout_value(&out, "auroc ");
    assert!(
        (area - 0.5).abs() <= 1e-12,
        "identical score sets must give AUROC exactly 1/2, got {area}"
    );

    // ood with a missing file: usage error.
    let out = run(&[
        "ood",
        "--checkpoint",
        checkpoint_str,
        "--id-data",
        test_str,
        "--ood-data",
        dir.path().join("no-such.bin").to_str().expect("utf8"),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));

    // prune keep=M: identical accuracy, reloadable checkpoint with M kept.
    let prune_dir = dir.path().join("pruned");
    let out = run(&[
        "prune",
        "--checkpoint",
        checkpoint_str,
        "--keep",
        "2",
        "--dataset",
        test_str,
        "--out",
        prune_dir.to_str().expect("utf8"),
    ]);
    assert!(out.status.success(), "prune failed: {}", stderr(&out));
    let comparison =
        std::fs::read_to_string(prune_dir.join("comparison.csv")).expect("comparison table");
    let row = comparison.lines().nth(1).expect("data row");
    let (before, after) = row.split_once(',').expect("two columns");
    assert_eq!(before, after, "keep=M must not change accuracy");
    let reloaded = mgproto::checkpoint::load(&prune_dir.join("pruned.mgp")).expect("reload");
    assert_eq!(reloaded.head.num_components(), 2);

    // prune keep out of range: usage errors both ways.
    for keep in ["0", "3"] {
        let out = run(&[
            "prune",
            "--checkpoint",
            checkpoint_str,
            "--keep",
            keep,
            "--out",
            dir.path().join("invalid").to_str().expect("utf8"),
        ]);
        assert_eq!(
            out.status.code(),
            Some(2),
            "keep {keep} must be a usage error: {}",
            stderr(&out)
        );
    }
}
