//! End-to-end exercises of the `gkd` binary at miniature scale: exit codes,
//! idempotency guards, and a full corpus -> teacher -> run -> eval -> report
//! round trip.

use std::path::Path;
use std::process::{Command, Output};

fn gkd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gkd"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY_MANIFEST: &str = r#"
corpus_seed = 11
image_size = 16
classes = 5
proxy_count = 10
source_count = 8
target_count = 3
label_fraction = 1.0
"#;

const TINY_CONFIG: &str = r#"
corpus_dir = "corpus"
out_dir = "out"
seeds = [1]
eval_source_count = 4

[teacher.model]
image_size = 16
patch_size = 8
depth = 1
dim = 12
heads = 2
mlp_ratio = 2.0

[teacher.train]
steps = 6
batch_size = 4
pool_per_style = 2
val_count = 4

[student]
image_size = 16
patch_size = 8
depth = 1
dim = 8
heads = 2
mlp_ratio = 2.0

[protocol]
stage1_steps = 5
stage2_steps = 5
stage3_steps = 5
joint_steps = 8
batch_size = 4
"#;

fn full_manifest(dir: &Path) -> std::path::PathBuf {
    // The tiny manifest reuses the default style roster.
    let styles = {
        let manifest = gkd_core::datagen::SplitManifest::default();
        toml::to_string_pretty(&manifest).unwrap()
    };
    let styles_section = styles.split("[[styles]]").skip(1).collect::<Vec<_>>();
    let mut text = TINY_MANIFEST.to_string();
    for s in styles_section {
        text.push_str("[[styles]]");
        text.push_str(s);
    }
    let path = dir.join("manifest.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_manifest_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gkd(
        &["build-corpus", "--manifest", "nope.toml", "--out", "corpus"],
        dir.path(),
    );
    assert_exit(&out, 2);
}

#[test]
fn missing_teacher_names_pretrain_command() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = full_manifest(dir.path());
    std::fs::write(dir.path().join("config.toml"), TINY_CONFIG).unwrap();
    let out = gkd(
        &[
            "build-corpus",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            "corpus",
        ],
        dir.path(),
    );
    assert_exit(&out, 0);
    let out = gkd(
        &["run", "--config", "config.toml", "--method", "gkd"],
        dir.path(),
    );
    assert_exit(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("pretrain-teacher"), "{stderr}");
}

#[test]
fn unknown_method_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.toml"), TINY_CONFIG).unwrap();
    let out = gkd(
        &["run", "--config", "config.toml", "--method", "mystery"],
        dir.path(),
    );
    assert_exit(&out, 2);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = gkd(&["gradcheck"], dir.path());
    assert_exit(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("0 failures"), "{stdout}");
}

#[test]
fn tiny_pipeline_round_trip_with_overwrite_guards() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = full_manifest(dir.path());
    std::fs::write(dir.path().join("config.toml"), TINY_CONFIG).unwrap();

    // Corpus: build, refuse rebuild, allow with --overwrite (same hash).
    let out = gkd(
        &[
            "build-corpus",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            "corpus",
        ],
        dir.path(),
    );
    assert_exit(&out, 0);
    let first = String::from_utf8_lossy(&out.stdout).to_string();
    let hash_line = first.lines().find(|l| l.contains("hash:")).unwrap().to_string();

    let out = gkd(
        &[
            "build-corpus",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            "corpus",
        ],
        dir.path(),
    );
    assert_exit(&out, 2);

    let out = gkd(
        &[
            "build-corpus",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            "corpus",
            "--overwrite",
        ],
        dir.path(),
    );
    assert_exit(&out, 0);
    let second = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(second.contains(&hash_line), "hash changed across rebuilds");

    // Teacher.
    let out = gkd(&["pretrain-teacher", "--config", "config.toml"], dir.path());
    assert_exit(&out, 0);
    let out = gkd(&["pretrain-teacher", "--config", "config.toml"], dir.path());
    assert_exit(&out, 2);

    // One run of each family.
    for method in ["gkd", "no_distill"] {
        let out = gkd(
            &["run", "--config", "config.toml", "--method", method],
            dir.path(),
        );
        assert_exit(&out, 0);
    }
    let gkd_dir = dir.path().join("out/gkd-s1");
    assert!(gkd_dir.join("record.jsonl").exists());
    assert!(gkd_dir.join("report.json").exists());
    assert!(gkd_dir.join("features.gkdc").exists());
    // Three stage-boundary student snapshots.
    for stage in ["distill-proxy", "distill-source", "task-probe"] {
        assert!(gkd_dir.join(format!("student_{stage}.gkdc")).exists(), "{stage}");
    }

    // Refuse clobbering an existing run without --overwrite.
    let out = gkd(
        &["run", "--config", "config.toml", "--method", "gkd"],
        dir.path(),
    );
    assert_exit(&out, 2);

    // Rerun with --overwrite reproduces per-step losses bit-exactly.
    let record_before = std::fs::read_to_string(gkd_dir.join("record.jsonl")).unwrap();
    let out = gkd(
        &[
            "run",
            "--config",
            "config.toml",
            "--method",
            "gkd",
            "--overwrite",
        ],
        dir.path(),
    );
    assert_exit(&out, 0);
    let record_after = std::fs::read_to_string(gkd_dir.join("record.jsonl")).unwrap();
    let losses = |text: &str| -> Vec<String> {
        text.lines()
            .filter(|l| l.contains("\"type\":\"step\""))
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                v["losses"].to_string()
            })
            .collect()
    };
    assert_eq!(losses(&record_before), losses(&record_after));

    // Eval on an existing run directory.
    let out = gkd(
        &[
            "eval",
            "--config",
            "config.toml",
            "--run",
            gkd_dir.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_exit(&out, 0);

    // Report over both runs.
    let out = gkd(
        &[
            "report",
            "--out",
            "reports",
            "out/gkd-s1",
            "out/no_distill-s1",
        ],
        dir.path(),
    );
    assert_exit(&out, 0);
    for file in [
        "methods.csv",
        "label_fractions.csv",
        "smoothness.csv",
        "diagnostics.csv",
        "summary.txt",
    ] {
        assert!(dir.path().join("reports").join(file).exists(), "{file}");
    }

    // Report skips incomplete run directories with a warning.
    std::fs::create_dir_all(dir.path().join("out/broken")).unwrap();
    let out = gkd(
        &[
            "report",
            "--out",
            "reports2",
            "out/gkd-s1",
            "out/broken",
        ],
        dir.path(),
    );
    assert_exit(&out, 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipping"));
}
