use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldcformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"
[train]
steps = 4
batch_size = 8

[train.model]
height = 16
width = 16
patch = 4
dim = 8
heads = 2
n_ldc = 1
n_vit = 1
mlp_width = 16

[train.aux]
stages = [4, 8]

[train.estimator]
width = 4
"#;

fn gen(dir: &Path, seed: &str) {
    ok(&[
        "gen-data",
        "--seed",
        seed,
        "--domains",
        "A,B",
        "--n-per-class",
        "4",
        "--size",
        "16",
        "--out",
        p(dir),
    ]);
}

#[test]
fn gen_data_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen(a.path(), "7");
    gen(b.path(), "7");
    let m = fs::read_to_string(a.path().join("manifest.tsv")).unwrap();
    assert_eq!(m, fs::read_to_string(b.path().join("manifest.tsv")).unwrap());
    assert!(m.contains("A/live_0000.png\t1\tnone\tA"));
    assert_eq!(
        fs::read(a.path().join("B/print_0002.png")).unwrap(),
        fs::read(b.path().join("B/print_0002.png")).unwrap()
    );
}

#[test]
fn train_eval_export_and_preview_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "3");
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, TINY).unwrap();
    let run_dir = dir.path().join("run");
    let manifest = data.join("manifest.tsv");
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&manifest),
        "--protocol",
        "cross:B",
        "--seed",
        "5",
        "--out",
        p(&run_dir),
    ]);
    let effective = fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(effective.contains("seed = 5") && effective.contains("spec = \"cross:B\""), "{effective}");
    assert_eq!(fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap().lines().count(), 4);
    let ckpt = run_dir.join("last.ckpt");
    assert_eq!(&fs::read(&ckpt).unwrap()[..4], b"LDCF");

    let report = ok(&["eval", "--checkpoint", p(&ckpt), "--protocol", "cross:B"]);
    assert!(report.contains("cross(B)"), "{report}");
    let eval_dir = run_dir.join("eval");
    let scores = fs::read_to_string(eval_dir.join("scores.tsv")).unwrap();
    assert_eq!(scores.lines().count(), 8);
    assert!(scores.lines().all(|l| l.split('\t').nth(1) == Some("B")));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["step"], 4);
    assert!(summary["result"]["aggregate"]["auc"].as_f64().is_some());

    let feats = dir.path().join("features.tsv");
    ok(&["export-features", "--checkpoint", p(&ckpt), "--out", p(&feats)]);
    let text = fs::read_to_string(&feats).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 16);
    assert_eq!(rows[0].split('\t').count(), 4 + 8);

    let prev = dir.path().join("preview");
    let out = ok(&["mix-preview", "--checkpoint", p(&ckpt), "--pairs", "2", "--out", p(&prev)]);
    assert!(out.contains("mixed samples written"), "{out}");
    assert!(prev.join("pair_00/live.png").exists() && prev.join("pair_00/cam_live.png").exists());

    // resuming extends the same run
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&manifest),
        "--protocol",
        "cross:B",
        "--seed",
        "5",
        "--steps",
        "6",
        "--resume",
        p(&ckpt),
        "--out",
        p(&run_dir),
    ]);
    assert_eq!(fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap().lines().count(), 6);
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "4");
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, TINY).unwrap();
    let manifest = data.join("manifest.tsv");
    let train = |out: &Path| {
        ok(&["--sequential", "train", "--config", p(&cfg), "--data", p(&manifest), "--out", p(out)]);
        fs::read(out.join("last.ckpt")).unwrap()
    };
    assert!(train(&dir.path().join("r1")) == train(&dir.path().join("r2")));
}

#[test]
fn grad_check_reports_each_primitive() {
    let out = ok(&["grad-check", "--seed", "1", "--points", "2", "--filter", "conv2d"]);
    assert!(out.contains("conv2d") && out.contains("0 failed"), "{out}");
    let out = ok(&["grad-check", "--seed", "1", "--points", "1"]);
    for name in ["matmul", "softmax", "layer_norm", "ldc", "metric_losses", "training_objective"] {
        assert!(out.contains(name), "{name} missing from {out}");
    }
    let strict = run(&["grad-check", "--points", "1", "--filter", "softmax", "--tolerance", "0"]);
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["gen-data", "--out", "x"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn bad_config_fails_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[train]\nlearning_rate = 3\n").unwrap();
    let out = run(&["train", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn every_subcommand_has_help() {
    for sub in ["gen-data", "train", "eval", "grad-check", "mix-preview", "export-features"] {
        let out = ok(&[sub, "--help"]);
        assert!(out.contains("Usage"), "{sub}");
    }
    let train = ok(&["train", "--help"]);
    for flag in ["--config", "--data", "--seed", "--steps", "--protocol", "--resume", "--liveness-only"] {
        assert!(train.contains(flag), "{flag}");
    }
}
