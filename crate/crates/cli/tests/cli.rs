use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_causal-vqa"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SPEC: &str = r#"{"num_samples":16,"vocab_size":4,"answer_space":3,"bias_strength":0.9,
"clip_shape":[2,2],"feature_dims":[12,10],"seed":1}"#;

const TOY: [&str; 8] = ["--preset", "toy", "--set", "epochs=2", "--set", "batch_size=4", "--set", "dim=16"];

fn dataset(dir: &Path) {
    fs::write(dir.join("spec.json"), SPEC).unwrap();
    let o = bin(&["gen-data", "--spec", "spec.json", "--out", "data"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn help_lists_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for sub in ["gen-data", "build-vocab", "build-codebook", "train", "eval", "ablate", "gradcheck"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    let o = bin(&["train", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one_with_category() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let o = bin(&["train", "--data", "data", "--out", "r", "--set", "nope=1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert_eq!(report["error"], "config");

    let o = bin(&["eval", "--checkpoint", "missing.ckpt", "--data", "data"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("\"io\""));
}

#[test]
fn train_eval_and_reproduce_from_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);

    let mut args = vec!["train", "--data", "data", "--out", "run"];
    args.extend(TOY);
    let o = bin(&args, d);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.json", "trace.csv", "model.ckpt", "summary.json"] {
        assert!(d.join("run").join(f).exists(), "{f} not written");
    }
    let trace = fs::read_to_string(d.join("run/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);

    // the snapshot alone reproduces the run
    let o = bin(&["train", "--data", "data", "--out", "again", "--config", "run/config.json"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(trace, fs::read_to_string(d.join("again/trace.csv")).unwrap());

    let o = bin(
        &["eval", "--checkpoint", "run/model.ckpt", "--data", "data", "--split", "test_anti", "--out", "ev"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(report["split"], "test_anti");
    assert!(report["metrics"]["accuracy"].is_number());
    assert_eq!(fs::read_to_string(d.join("ev/predictions.csv")).unwrap().lines().count(), 5);

    // resuming under a different model shape is refused
    let o = bin(
        &["train", "--data", "data", "--out", "bad", "--config", "run/config.json", "--set", "dim=8", "--resume", "run/model.ckpt"],
        d,
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fingerprint"));
}

#[test]
fn vocab_and_codebook_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    let o = bin(&["build-vocab", "--data", "data", "--out", "v", "--preset", "toy"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("v/vocab.json").exists() && d.join("v/confounders.json").exists());

    let o = bin(&["build-codebook", "--data", "data", "--out", "c", "--preset", "toy", "--set", "codebook_k=3"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let cb: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("c/codebook_motion.json")).unwrap()).unwrap();
    assert_eq!(cb["centroids"]["dim"][0], 3);
    assert!(d.join("c/config.json").exists());
}

#[test]
fn ablate_tabulates_requested_variants() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    let mut args = vec!["ablate", "--data", "data", "--out", "ab", "--variant", "full", "--variant", "wo_sge"];
    args.extend(TOY);
    let o = bin(&args, d);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(d.join("ab/table.txt")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].contains("test_anti") && rows[0].contains("test_iid"));
    assert!(rows[1].starts_with("full") && rows[2].starts_with("wo_sge"));

    let mut args = vec!["ablate", "--data", "data", "--out", "ab2", "--variant", "wo_nothing"];
    args.extend(TOY);
    assert_eq!(bin(&args, d).status.code(), Some(1));
}

#[test]
fn gradcheck_single_component() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["gradcheck", "--component", "semantic_gcn", "--out", "gc"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("semantic_gcn"));
    assert!(dir.path().join("gc/gradcheck.json").exists());
    let o = bin(&["gradcheck", "--component", "semantic_gcn", "--tolerance", "0"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("\"gradient\""));
}
