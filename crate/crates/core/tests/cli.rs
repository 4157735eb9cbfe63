//! End-to-end runs of the `propmlp` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn toy() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy")
}

fn propmlp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_propmlp"))
        .args(args)
        .env_remove("PROPMLP_OUTPUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_run(out: &Path) -> Vec<String> {
    [
        "--dataset",
        toy().to_str().unwrap(),
        "--output-dir",
        out.to_str().unwrap(),
        "--hops",
        "3",
        "--hidden",
        "8",
        "--stages",
        "5,5",
        "--batch-size",
        "4",
        "--set",
        "threshold=0.5",
    ]
    .map(String::from)
    .to_vec()
}

fn run(cmd: &str, base: &[String], extra: &[&str]) -> Output {
    let mut args = vec![cmd];
    args.extend(base.iter().map(String::as_str));
    args.extend(extra);
    propmlp(&args)
}

#[test]
fn full_pipeline_on_the_toy_graph() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let base = small_run(&out);

    let o = run("train", &base, &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error[E_MISSING]"), "{}", stderr(&o));

    let o = run("preprocess", &base, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("preprocessed"));
    let o = run("preprocess", &base, &[]);
    assert!(stdout(&o).starts_with("up-to-date"), "{}", stdout(&o));

    let o = run("train", &base, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3, "{}", stdout(&o));
    assert!(out.join("train/stage-2/metrics.csv").exists());

    let o = run("evaluate", &base, &["--stage", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for split in ["train", "valid", "test"] {
        assert!(text.contains(&format!("stage 1 {split} accuracy")), "{text}");
    }

    let report = tmp.path().join("report.csv");
    let o = run(
        "inspect-attention",
        &base,
        &["--buckets", "1-2,3-3", "--report", report.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "bucket,nodes,stat,step_0,step_1,step_2,step_3");
    assert_eq!(csv.lines().count(), 5);

    // Changing a preprocessing key makes the stack stale.
    let o = run("evaluate", &base, &["--set", "hops=2"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error[E_CONFIG]"), "{}", stderr(&o));
}

#[test]
fn show_config_resolves_file_then_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("run.conf");
    std::fs::write(&file, "# comment\npreset = papers100m\nhidden = 32\nlr = 0.01\n").unwrap();
    let o = propmlp(&["show-config", "--config", file.to_str().unwrap(), "--hidden", "48"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("hidden = 48"), "{text}");
    assert!(text.contains("lr = 0.01"), "{text}");
    assert!(text.contains("attention = jk"), "{text}");

    let o = Command::new(env!("CARGO_BIN_EXE_propmlp"))
        .args(["show-config"])
        .env("PROPMLP_OUTPUT_DIR", "/tmp/elsewhere")
        .output()
        .unwrap();
    assert!(stdout(&o).contains("output_dir = /tmp/elsewhere"), "{}", stdout(&o));
}

#[test]
fn bad_input_reports_a_code() {
    let o = propmlp(&["show-config", "--set", "nonsense=1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error[E_CONFIG]"), "{}", stderr(&o));

    let o = propmlp(&["show-config", "--temperature", "2"]);
    assert!(stderr(&o).contains("error[E_CONFIG]"), "{}", stderr(&o));

    let tmp = tempfile::tempdir().unwrap();
    let o = propmlp(&[
        "preprocess",
        "--dataset",
        tmp.path().to_str().unwrap(),
        "--output-dir",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert!(stderr(&o).contains("error[E_IO]"), "{}", stderr(&o));
}

#[test]
fn synth_sbm_writes_a_loadable_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("sbm");
    let o = propmlp(&[
        "synth-sbm",
        "--out",
        data.to_str().unwrap(),
        "--nodes",
        "200",
        "--train-per-class",
        "5",
        "--seed",
        "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("N=200"), "{}", stdout(&o));
    assert!(stdout(&o).contains("train=25"), "{}", stdout(&o));
    let o = propmlp(&[
        "preprocess",
        "--dataset",
        data.to_str().unwrap(),
        "--output-dir",
        tmp.path().join("out").to_str().unwrap(),
        "--hops",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}
