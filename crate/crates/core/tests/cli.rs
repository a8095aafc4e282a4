use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{"model":{"levels":2,"filters":8},"train":{"max_epochs":2,"batch_size":16}}"#;

fn mhnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mhnn")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn trained(dir: &Path) -> (String, String, String) {
    let data = dir.join("set.bin");
    let cfg = dir.join("tiny.json");
    let model = dir.join("model.ckpt");
    fs::write(&cfg, TINY).unwrap();
    let out = mhnn(&[
        "synth",
        "--out",
        p(&data),
        "--n-per-class",
        "12",
        "--channels",
        "3",
        "--window",
        "16",
        "--classes",
        "2",
        "--seed",
        "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = mhnn(&["train", "--data", p(&data), "--out", p(&model), "--config", p(&cfg), "--seed", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (p(&data).to_string(), p(&cfg).to_string(), p(&model).to_string())
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(mhnn(&[]).status.code(), Some(2));
    assert_eq!(mhnn(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(mhnn(&["--precision", "16", "synth", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing.bin");
    let out = mhnn(&["eval", "--model", p(&missing), "--data", p(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing.bin"));
}

#[test]
fn train_writes_checkpoint_and_history() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    assert!(dir.path().join("model.ckpt").is_file());
    let history: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("history.json")).unwrap()).unwrap();
    assert_eq!(history["epochs"].as_array().unwrap().len(), 2);
}

#[test]
fn eval_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _, model) = trained(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let res = mhnn(&[
            "eval",
            "--model",
            &model,
            "--data",
            &data,
            "--perturb",
            "noise:-5",
            "--seed",
            "9",
            "--out",
            p(&out),
        ]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        fs::read(out).unwrap()
    };
    let a = run("a.json");
    assert_eq!(a, run("b.json"));
    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["perturbation"]["kind"], "noise");
}

#[test]
fn missing_sweep_has_one_row_per_kind_and_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _, model) = trained(dir.path());
    let csv = dir.path().join("missing.csv");
    let res = mhnn(&["sweep", "missing", "--data", &data, "--model", &model, "--ratios", "0.1,0.5", "--out", p(&csv)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    let md = mhnn(&["report", "--input", p(&csv)]);
    assert!(md.status.success());
    assert!(String::from_utf8_lossy(&md.stdout).contains("mask_random"));
}

#[test]
fn decompose_writes_every_component() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("set.bin");
    assert!(mhnn(&[
        "synth",
        "--out",
        p(&data),
        "--n-per-class",
        "1",
        "--channels",
        "2",
        "--window",
        "20",
        "--classes",
        "2"
    ])
    .status
    .success());
    let out = dir.path().join("parts");
    assert!(mhnn(&["decompose", "--data", p(&data), "--out-dir", p(&out), "--levels", "2"]).status.success());
    for (name, cols) in [("X.csv", 20), ("H1.csv", 10), ("H2.csv", 5), ("L2.csv", 5)] {
        let text = fs::read_to_string(out.join(name)).unwrap();
        assert_eq!(text.lines().count(), 2, "{name}");
        assert_eq!(text.lines().next().unwrap().split(',').count(), cols, "{name}");
    }
}
