use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "stem_channels=2",
    "--set",
    "stage_channels=2,4",
    "--set",
    "fc_width=8",
    "--epochs",
    "1",
    "--steps-per-epoch",
    "2",
];

fn gazecal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gazecal"))
        .args(args)
        .env_remove("GAZECAL_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> Output {
    let out = gazecal(args);
    assert_eq!(
        code(&out),
        0,
        "gazecal {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn synth(dir: &Path, persons: usize, seed: &str) {
    ok(&[
        "synth",
        "--persons",
        &persons.to_string(),
        "--samples",
        "20",
        "--bias-scale",
        "0.05",
        "--noise",
        "0.01",
        "--seed",
        seed,
        "--out",
        dir.to_str().unwrap(),
    ]);
}

fn study(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "study",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "4",
    ];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    gazecal(&args)
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&gazecal(&["frobnicate"])), 1);
    assert_eq!(code(&gazecal(&["synth", "--persons"])), 1);
    assert_eq!(code(&gazecal(&["--help"])), 0);
}

#[test]
fn invalid_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let args = [
        "synth",
        "--persons",
        "2",
        "--samples",
        "21",
        "--out",
        out.to_str().unwrap(),
    ];
    assert_eq!(code(&gazecal(&args)), 2);
    let missing = dir.path().join("missing");
    let r = gazecal(&[
        "eval",
        "--data",
        missing.to_str().unwrap(),
        "--checkpoint",
        "nope.ckpt",
    ]);
    assert_eq!(code(&r), 2);
    let r = gazecal(&[
        "train",
        "--data",
        out.to_str().unwrap(),
        "--checkpoint",
        "x",
        "--set",
        "width=3",
    ]);
    assert_eq!(code(&r), 2);
}

#[test]
fn synth_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 2, "3");
    assert!(data.join("synth.json").exists());
    assert!(data.join("p00.partitions.json").exists());
    assert!(data.join("run_manifest.json").exists());

    let ckpt = dir.path().join("net.ckpt");
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--persons",
        "p00",
        "--validate",
        "p01",
    ];
    args.extend_from_slice(TINY);
    Command::new(env!("CARGO_BIN_EXE_gazecal"))
        .args(&args)
        .env("GAZECAL_SEED", "11")
        .env("RUST_LOG", "warn")
        .output()
        .map(|o| assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)))
        .unwrap();
    let record = read(&dir.path().join("net.ckpt.record.csv"));
    assert!(record.starts_with("epoch,loss,val_error"), "{record}");
    assert_eq!(record.lines().count(), 2);
    let run: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("net.ckpt.run.json"))).unwrap();
    assert_eq!(run["command"], "train");
    assert_eq!(run["seeds"]["base"], 11);
    assert_eq!(run["config"]["seed"], 11);

    let out = ok(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--persons",
        "p01",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("mean_error"), "{text}");
    assert!(text.lines().any(|l| l == "samples 20"), "{text}");
    assert!(dir.path().join("net.ckpt.eval.json").exists());
}

#[test]
fn study_report_resume_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 2, "8");
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let out = study(&data, &first, &["--share-baseline", "--jobs", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in [
        "study.json",
        "detail.csv",
        "aggregate.csv",
        "plot_data.csv",
        "run_manifest.json",
    ] {
        assert!(first.join(name).exists(), "missing {name}");
    }
    assert_eq!(read(&first.join("detail.csv")).lines().count(), 21);
    assert_eq!(read(&first.join("aggregate.csv")).lines().count(), 3);
    assert!(read(&first.join("plot_data.csv"))
        .starts_with("person,mean_without,std_without,mean_with,std_with"));

    assert_eq!(code(&study(&data, &first, &["--share-baseline"])), 2);

    let out = study(&data, &first, &["--share-baseline", "--resume"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = study(&data, &first, &["--resume", "--calib-weight", "5"]);
    assert_eq!(code(&out), 2, "changed settings on resume must be rejected");

    let out = study(&data, &second, &["--share-baseline"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        read(&first.join("detail.csv")),
        read(&second.join("detail.csv"))
    );
    assert_eq!(
        read(&first.join("aggregate.csv")),
        read(&second.join("aggregate.csv"))
    );

    let json = dir.path().join("report.json");
    ok(&[
        "report",
        "--manifest",
        first.join("study.json").to_str().unwrap(),
        "--format",
        "json",
        "--out",
        json.to_str().unwrap(),
    ]);
    let report: serde_json::Value = serde_json::from_str(&read(&json)).unwrap();
    assert_eq!(report["persons"].as_array().unwrap().len(), 2);
    assert_eq!(report["experiments"].as_array().unwrap().len(), 20);
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 2, "1");
    let out = study(
        &data,
        &dir.path().join("s"),
        &["--share-baseline", "--lr", "1e300"],
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}
