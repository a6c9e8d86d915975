use std::path::Path;
use std::process::{Command, Output};

use dynst::causal::AteReport;
use dynst::model::SurvivalModel;
use dynst::simulator::read_cohort;

fn dynst(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynst"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("DYNST_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SIM: [&str; 8] = [
    "--set",
    "n_patients=80",
    "--set",
    "t_max=12",
    "--set",
    "taus=[4,8]",
    "--seed",
    "3",
];

const SMALL: [&str; 8] = [
    "--set",
    "d_model=8",
    "--set",
    "n_layers=1",
    "--set",
    "epochs=1",
    "--set",
    "batch_size=16",
];

fn simulate(dir: &Path) {
    let mut args = vec!["simulate", "--out", "data.jsonl", "--oracle", "oracle.jsonl"];
    args.extend(SIM);
    let summary: serde_json::Value = serde_json::from_str(&ok(&dynst(dir, &args))).unwrap();
    assert_eq!(summary["n_patients"], 80);
    assert!(summary["true_ate"]["8"].as_f64().unwrap() > 0.0);
}

#[test]
fn simulate_is_reproducible_and_honours_overrides() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let first = std::fs::read(dir.path().join("data.jsonl")).unwrap();
    simulate(dir.path());
    assert_eq!(first, std::fs::read(dir.path().join("data.jsonl")).unwrap());
    let cohort = read_cohort(&dir.path().join("data.jsonl")).unwrap();
    assert_eq!((cohort.len(), cohort.t_max), (80, 12));
}

#[test]
fn output_directory_variable_roots_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let mut args = vec!["simulate", "--out", "d.jsonl", "--oracle", "o.jsonl", "--summary", "s.json"];
    args.extend(SIM);
    let status = Command::new(env!("CARGO_BIN_EXE_dynst"))
        .args(&args)
        .current_dir(dir.path())
        .env("DYNST_OUT_DIR", &out)
        .output()
        .unwrap();
    assert!(status.status.success());
    for f in ["d.jsonl", "o.jsonl", "s.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

#[test]
fn train_evaluate_and_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d);
    for kind in ["dynst", "linear"] {
        let ckpt = format!("{kind}.json");
        let mut args = vec!["train", "--data", "data.jsonl", "--model", kind, "--out", &ckpt];
        args.extend(SMALL);
        let summary: serde_json::Value = serde_json::from_str(&ok(&dynst(d, &args))).unwrap();
        assert_eq!(summary["model"], kind);
        let model = SurvivalModel::load(&d.join(&ckpt)).unwrap();
        assert_eq!(model.kind().name(), kind);
        let text = std::fs::read_to_string(d.join(&ckpt)).unwrap();
        let raw: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(raw["format"], "dynst-checkpoint");

        let eval = ok(&dynst(
            d,
            &["evaluate", "--data", "data.jsonl", "--model", &ckpt, "--split", "0.7,0.15,0.15", "--curves", "curves"],
        ));
        let eval: serde_json::Value = serde_json::from_str(&eval).unwrap();
        assert_eq!(eval["patients"], 12);
        assert!(eval["censored_mae"].as_f64().unwrap() >= 0.0);
        assert!(d.join(format!("curves/{kind}_mean.csv")).exists());
    }
    ok(&dynst(
        d,
        &[
            "estimate-ate", "--data", "data.jsonl", "--oracle", "oracle.jsonl", "--model", "dynst.json", "--tau", "4,8",
            "--out", "ate.json",
        ],
    ));
    let reports: Vec<AteReport> = serde_json::from_slice(&std::fs::read(d.join("ate.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 8);
    assert!(reports.iter().all(|r| r.bias.is_some() && r.estimate.is_finite()));

    ok(&dynst(
        d,
        &[
            "estimate-ate", "--data", "data.jsonl", "--oracle", "oracle.jsonl", "--methods", "ipw", "--true-propensity",
            "--tau", "8", "--out", "ipw.json",
        ],
    ));
    let reports: Vec<AteReport> = serde_json::from_slice(&std::fs::read(d.join("ipw.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 1);
}

#[test]
fn outcome_methods_without_a_model_fail() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let out = dynst(
        dir.path(),
        &["estimate-ate", "--data", "data.jsonl", "--methods", "or", "--out", "x.json"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dynst(
        dir.path(),
        &["simulate", "--out", "d.jsonl", "--oracle", "o.jsonl", "--set", "no_such_field=1"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_field"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&dynst(dir.path(), &["gradcheck", "--seed", "5"]));
    assert!(text.lines().count() > 20);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}
