use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn lmnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmnet"))
        .args(args)
        .env_remove("LMN_DATA_DIR")
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Full-size CIFAR-10 layout with the label encoded in the mean brightness.
/// Shared by every test in this binary and reused across runs.
fn cifar10_dir() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-cifar10");
        std::fs::create_dir_all(&dir).unwrap();
        let files = [
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
            "test_batch.bin",
        ];
        let mut state = 0x9E37_79B9_7F4A_7C15u64;
        for name in files {
            let path = dir.join(name);
            if std::fs::metadata(&path)
                .map(|m| m.len() == 10_000 * 3073)
                .unwrap_or(false)
            {
                continue;
            }
            let mut bytes = Vec::with_capacity(10_000 * 3073);
            for i in 0..10_000 {
                let label = (i % 10) as u8;
                bytes.push(label);
                for _ in 0..3072 {
                    state ^= state << 13;
                    state ^= state >> 7;
                    state ^= state << 17;
                    bytes.push((label as u64 * 20 + state % 64) as u8);
                }
            }
            std::fs::write(path, bytes).unwrap();
        }
        dir
    })
}

#[test]
fn analyze_reports_preset_totals() {
    let v = stdout_json(&lmnet(&[
        "analyze",
        "--preset",
        "l-mobilenet",
        "--classes",
        "100",
    ]));
    assert_eq!(v["totals"]["params"], 943_876);
    let c = &v["census"];
    assert_eq!(
        (c["batch_norm"].as_u64(), c["relu"].as_u64()),
        (Some(46), Some(35))
    );
    assert_eq!(
        (c["eltwise"].as_u64(), c["concat"].as_u64()),
        (Some(7), Some(11))
    );

    let v = stdout_json(&lmnet(&["analyze", "--preset", "shufflenetv2"]));
    assert_eq!(v["totals"]["params"], 2_278_604);
    assert_eq!(v["census"]["eltwise"], 0);

    let out = lmnet(&["analyze", "--preset", "mobilenetv2", "--format", "csv"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() > 10);
}

#[test]
fn analyze_writes_to_file_and_prints_summary() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cost.json");
    let out = lmnet(&[
        "analyze",
        "--preset",
        "l-mobilenet-narrow",
        "--classes",
        "2",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let summary = String::from_utf8(out.stdout).unwrap();
    assert!(summary.contains("params 12914"), "{summary}");
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(v["totals"]["params"], 12_914);
}

#[test]
fn usage_errors_exit_two_and_runtime_errors_exit_one() {
    let out = lmnet(&["analyze", "--preset", "resnet50"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("resnet50"));

    let out = lmnet(&[
        "analyze",
        "--preset",
        "l-mobilenet",
        "--input-shape",
        "3x32",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(
        &cfg,
        "{\n  \"name\": \"x\",\n  \"input\": [3, 8, 8],\n  \"rows\": [\n    {\"op\": \"conv5x5\", \"expand\": 1, \"c\": 4, \"n\": 1, \"s\": 1}\n  ],\n  \"head\": {\"classes\": 2}\n}\n",
    )
    .unwrap();
    let out = lmnet(&["analyze", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("conv5x5") && err.contains("line "), "{err}");

    let out = lmnet(&[
        "analyze",
        "--config",
        dir.path().join("missing.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn preset_exported_as_config_analyzes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("narrow.json");
    let arch = lmnet_core::graph::presets::preset_config("l-mobilenet-narrow", Some(5)).unwrap();
    std::fs::write(&cfg, arch.to_json()).unwrap();
    let a = stdout_json(&lmnet(&["analyze", "--config", cfg.to_str().unwrap()]));
    let b = stdout_json(&lmnet(&[
        "analyze",
        "--preset",
        "l-mobilenet-narrow",
        "--classes",
        "5",
    ]));
    assert_eq!(a["totals"], b["totals"]);
    assert_eq!(a["census"], b["census"]);
}

#[test]
fn bench_reports_per_kind_timings() {
    let out = lmnet(&[
        "bench",
        "--preset",
        "l-mobilenet-narrow",
        "--classes",
        "10",
        "--batch",
        "2",
        "--reps",
        "3",
        "--warmup",
        "1",
    ]);
    let v = stdout_json(&out);
    let kinds: Vec<&str> = v["kinds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|k| k["kind"].as_str().unwrap())
        .collect();
    assert!(
        kinds.contains(&"batch-norm") && kinds.contains(&"conv"),
        "{kinds:?}"
    );
    assert_eq!(v["reps"], 3);

    let out = lmnet(&["bench", "--preset", "l-mobilenet", "--reps", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_fails_on_impossible_tolerance() {
    let out = lmnet(&["gradcheck", "--samples", "20"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(
        text.lines().count() >= 5 && text.lines().all(|l| l.starts_with("PASS")),
        "{text}"
    );

    let out = lmnet(&["gradcheck", "--samples", "5", "--tol", "1e-12"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("exceed tolerance"));
}

fn train_narrow(out: &Path, epochs: &str) -> Output {
    let data = cifar10_dir();
    lmnet(&[
        "train",
        "--preset",
        "l-mobilenet-narrow",
        "--data",
        data.to_str().unwrap(),
        "--only-classes",
        "0,3",
        "--subset",
        "16",
        "--epochs",
        epochs,
        "--batch-size",
        "8",
        "--seed",
        "4",
        "--kernel",
        "gemm",
        "--out",
        out.to_str().unwrap(),
    ])
}

fn strip_wall_time(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_owned())
        .collect()
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let out = train_narrow(&a, "2");
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(a.exists() && dir.path().join("a.ckpt.json").exists());
    let log_a = std::fs::read_to_string(dir.path().join("a.ckpt.log.csv")).unwrap();
    assert_eq!(log_a.lines().count(), 3, "{log_a}");

    let b = dir.path().join("b.ckpt");
    assert!(train_narrow(&b, "2").status.success());
    let log_b = std::fs::read_to_string(dir.path().join("b.ckpt.log.csv")).unwrap();
    assert_eq!(strip_wall_time(&log_a), strip_wall_time(&log_b));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let data = cifar10_dir().to_str().unwrap();
    let report = stdout_json(&lmnet(&[
        "eval",
        "--ckpt",
        a.to_str().unwrap(),
        "--data",
        data,
    ]));
    assert_eq!(report["samples"], 2_000);
    let top1 = report["top1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));
    assert!((report["top1_error"].as_f64().unwrap() - (1.0 - top1)).abs() < 1e-12);

    // A model built for a different class count cannot take these weights.
    let out = lmnet(&[
        "eval",
        "--ckpt",
        a.to_str().unwrap(),
        "--preset",
        "l-mobilenet-narrow",
        "--data",
        data,
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!stderr(&out).is_empty());
}

#[test]
fn train_reports_missing_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmnet(&[
        "train",
        "--preset",
        "l-mobilenet-narrow",
        "--data",
        dir.path().to_str().unwrap(),
        "--epochs",
        "1",
        "--out",
        dir.path().join("x.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("data_batch_1.bin"),
        "{}",
        stderr(&out)
    );
}
