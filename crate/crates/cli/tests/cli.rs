use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"seed = 3
[corpus]
n_scenes = 60
[model]
embed = 8
hidden = 8
min_freq = 1
[train]
pretrain_epochs = 1
finetune_epochs = 1
batch_size = 8
"#;

fn rvg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rvg"))
        .current_dir(dir)
        .env("RVG_THREADS", "2")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = rvg(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    ok(dir.path(), &["gen", "--config", "small.toml", "--out", "data"]);
    let root = dir.path().to_path_buf();
    (dir, root)
}

fn read_json(path: PathBuf) -> serde_json::Value {
    serde_json::from_slice(&fs::read(&path).unwrap()).unwrap()
}

#[test]
fn full_pipeline() {
    let (_guard, d) = setup();
    for f in ["train.exprs", "train.scenes", "train.trees", "test.exprs", "vocab.json", "dataset.json", "manifest.json"] {
        assert!(d.join("data").join(f).exists(), "missing {f}");
    }
    ok(&d, &["pretrain", "--config", "small.toml", "--data", "data", "--out", "pre"]);
    assert!(d.join("pre/train.log").exists());
    ok(
        &d,
        &["finetune", "--config", "small.toml", "--data", "data", "--init", "pre/checkpoint.json", "--out", "ft"],
    );
    let printed = ok(
        &d,
        &["eval", "--config", "small.toml", "--checkpoint", "ft/checkpoint.json", "--data", "data", "--out", "ev"],
    );
    assert!(printed.starts_with("accuracy="), "{printed}");
    let report = read_json(d.join("ev/eval.json"));
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let dot = ok(
        &d,
        &["viz", "--config", "small.toml", "--checkpoint", "ft/checkpoint.json", "--data", "data", "--out", "vz"],
    );
    assert!(dot.starts_with("digraph"), "{dot}");
    let table = fs::read_to_string(d.join("vz/roles.tsv")).unwrap();
    assert!(table.starts_with("word\tscore\tfeature\troot\ttotal"));
    let dots: Vec<_> = fs::read_dir(d.join("vz"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "dot"))
        .collect();
    assert_eq!(dots.len(), 1);
}

#[test]
fn identical_runs_are_identical() {
    let (_guard, d) = setup();
    for out in ["a", "b"] {
        ok(&d, &["pretrain", "--config", "small.toml", "--data", "data", "--out", out]);
    }
    for f in ["checkpoint.json", "train.log"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f} differs");
    }
    let ma = read_json(d.join("a/manifest.json"));
    let mb = read_json(d.join("b/manifest.json"));
    assert_eq!(ma["input_hash"], mb["input_hash"]);
    assert_eq!(ma["config"], mb["config"]);

    let again = tempfile::tempdir().unwrap();
    fs::write(again.path().join("small.toml"), SMALL).unwrap();
    ok(again.path(), &["gen", "--config", "small.toml", "--out", "data"]);
    for f in ["train.exprs", "test.scenes", "vocab.json", "manifest.json"] {
        assert_eq!(
            fs::read(d.join("data").join(f)).unwrap(),
            fs::read(again.path().join("data").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let (_guard, d) = setup();
    for (out, threads) in [("one", "1"), ("four", "4")] {
        let o = Command::new(env!("CARGO_BIN_EXE_rvg"))
            .current_dir(&d)
            .env("RVG_THREADS", threads)
            .args(["pretrain", "--config", "small.toml", "--data", "data", "--out", out])
            .output()
            .unwrap();
        assert!(o.status.success());
    }
    assert_eq!(
        fs::read(d.join("one/checkpoint.json")).unwrap(),
        fs::read(d.join("four/checkpoint.json")).unwrap()
    );
}

#[test]
fn seed_flag_overrides_file() {
    let (_guard, d) = setup();
    ok(&d, &["gen", "--config", "small.toml", "--seed", "11", "--out", "other"]);
    let m = read_json(d.join("other/manifest.json"));
    assert_eq!(m["seed"], 11);
    assert_ne!(
        fs::read(d.join("data/train.exprs")).unwrap(),
        fs::read(d.join("other/train.exprs")).unwrap()
    );
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[train]\nlrr = 0.1\n").unwrap();
    let out = rvg(dir.path(), &["gen", "--config", "bad.toml", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.lrr"), "{err}");
}

#[test]
fn invalid_config_value_is_named() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[train]\nlr = -1.0\n").unwrap();
    let out = rvg(dir.path(), &["gen", "--config", "bad.toml", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lr"));
}

#[test]
fn missing_trees_file_is_reported() {
    let (_guard, d) = setup();
    fs::remove_file(d.join("data/train.trees")).unwrap();
    let out = rvg(&d, &["pretrain", "--config", "small.toml", "--data", "data", "--out", "pre"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.trees"), "{err}");
}

#[test]
fn feature_dim_mismatch_is_rejected() {
    let (_guard, d) = setup();
    ok(&d, &["pretrain", "--config", "small.toml", "--data", "data", "--out", "pre"]);
    let wide = SMALL.replace("n_scenes = 60", "n_scenes = 60\nfeature_dim = 40");
    fs::write(d.join("wide.toml"), wide).unwrap();
    ok(&d, &["gen", "--config", "wide.toml", "--out", "wide"]);
    let out = rvg(&d, &["eval", "--checkpoint", "pre/checkpoint.json", "--data", "wide", "--out", "ev"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("feature"), "{err}");
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let (_guard, d) = setup();
    ok(&d, &["ablate", "--config", "small.toml", "--data", "data", "--variants", "full,nonode,chain", "--out", "ab"]);
    let tsv = fs::read_to_string(d.join("ab/metrics.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().collect();
    assert_eq!(rows[0], "variant\taccuracy\tcorrect\ttotal");
    let names: Vec<&str> = rows[1..].iter().map(|r| r.split('\t').next().unwrap()).collect();
    assert_eq!(names, ["full", "nonode", "chain"]);
}

#[test]
fn gradcheck_passes_and_fails_by_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gradcheck", "--configs", "3", "--dim", "4", "--out", "gc"]);
    let report = read_json(dir.path().join("gc/gradcheck.json"));
    assert!(report.is_object() || report.is_array());
    let out = rvg(dir.path(), &["gradcheck", "--configs", "2", "--dim", "4", "--tol", "1e-30", "--out", "gc2"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rvg(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(rvg(dir.path(), &["gen", "--variant", "bogus"]).status.code(), Some(1));
    assert_eq!(rvg(dir.path(), &["--help"]).status.code(), Some(0));
    let bad_threads = Command::new(env!("CARGO_BIN_EXE_rvg"))
        .current_dir(dir.path())
        .env("RVG_THREADS", "zero")
        .args(["gradcheck", "--configs", "1", "--out", "g"])
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(1));
}
