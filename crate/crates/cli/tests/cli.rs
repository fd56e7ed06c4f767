use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use cgnet::analysis::count_flops;
use cgnet_cli::commands::{load_datasets, prepare_model};
use cgnet_cli::data::{encode_idx, read_idx_pair, read_raw, synthetic_digits, DatasetSource};
use cgnet_cli::{cmd_eval, CliError, ExperimentConfig, GateOptions, RunOptions};
use tempfile::TempDir;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.json")
}

fn cg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("cg runs")
}

fn run_ok(args: &[&str]) -> serde_json::Value {
    let out = cg(args);
    assert!(
        out.status.success(),
        "cg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

/// One smoke training run shared by every test in this file.
fn trained() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let cfg = smoke_config();
        run_ok(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--deterministic",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        dir
    })
    .path()
}

fn checkpoint() -> String {
    trained().join("checkpoint.cgn").to_str().unwrap().to_string()
}

#[test]
fn train_writes_checkpoint_metrics_and_summary() {
    let dir = trained();
    for f in ["checkpoint.cgn", "metrics.csv", "train.json"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header plus one row per epoch");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("train.json")).unwrap()).unwrap();
    assert_eq!(summary["command"], "train");
    assert_eq!(summary["metrics"].as_array().unwrap().len(), 2);
}

#[test]
fn every_subcommand_writes_its_outputs() {
    let out = TempDir::new().unwrap();
    let cfg = smoke_config();
    let ck = checkpoint();
    let base = [
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ck.as_str(),
        "--out",
        out.path().to_str().unwrap(),
    ];
    let eval = run_ok(&[&["eval"][..], &base].concat());
    assert_eq!(eval["command"], "eval");
    let analyze = run_ok(&[&["analyze"][..], &base].concat());
    assert_eq!(analyze["command"], "analyze");
    let perf = run_ok(&[&["perf"][..], &base, &["--rows", "8", "--cols", "8"]].concat());
    assert_eq!(perf["array"]["rows"], 8);
    for f in [
        "cost.csv",
        "eval.json",
        "correlation.csv",
        "weight_access.csv",
        "analyze.json",
        "perf.csv",
        "perf.json",
        "intensity/sample0_aggregate.pgm",
    ] {
        assert!(out.path().join(f).is_file(), "{f} missing");
    }
    let pgm = std::fs::read(out.path().join("intensity/sample0_aggregate.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n28 28\n255\n"));
}

#[test]
fn malformed_config_names_the_field() {
    let good = std::fs::read_to_string(smoke_config()).unwrap();
    let bad = good.replace("\"epochs\": 2", "\"epochs\": \"two\"");
    let err = ExperimentConfig::from_json(&bad, Path::new("x.json")).unwrap_err();
    match &err {
        CliError::Config { field, .. } => assert_eq!(field, "train.schedule.epochs"),
        other => panic!("unexpected error {other}"),
    }
    assert!(err.to_string().contains("train.schedule.epochs"));

    let unknown = good.replace("\"seed\": 3", "\"seed\": 3, \"sede\": 4");
    let err = ExperimentConfig::from_json(&unknown, Path::new("x.json")).unwrap_err();
    assert!(err.to_string().contains("sede"), "{err}");

    let schema = good.replace("cgnet.experiment/1", "cgnet.experiment/0");
    match ExperimentConfig::from_json(&schema, Path::new("x.json")).unwrap_err() {
        CliError::Config { field, .. } => assert_eq!(field, "schema"),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn malformed_config_fails_the_binary() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("bad.json");
    let good = std::fs::read_to_string(smoke_config()).unwrap();
    std::fs::write(&p, good.replace("\"lr\": 0.05", "\"lr\": [0.05]")).unwrap();
    let out = cg(&["train", "--config", p.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("train.schedule.lr"), "{stderr}");
}

#[test]
fn missing_checkpoint_is_a_clean_error() {
    let dir = TempDir::new().unwrap();
    let cfg = smoke_config();
    let missing = dir.path().join("nope.cgn");
    let out = cg(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        missing.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error: ") && stderr.contains("nope.cgn"), "{stderr}");
    assert!(!stderr.contains("panicked"));
}

#[test]
fn corrupt_checkpoint_is_a_clean_error() {
    let dir = TempDir::new().unwrap();
    let bytes = std::fs::read(trained().join("checkpoint.cgn")).unwrap();
    let p = dir.path().join("cut.cgn");
    std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    let cfg = smoke_config();
    let out = cg(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        p.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).contains("panicked"));
}

#[test]
fn opening_every_gate_matches_the_dense_network() {
    let dir = TempDir::new().unwrap();
    let cfg = smoke_config();
    let ck = checkpoint();
    let base = [
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ck.as_str(),
        "--out",
        dir.path().to_str().unwrap(),
    ];
    let open = run_ok(&[&base[..], &["--delta-override", "-1e6"]].concat());
    let dense = run_ok(&[&base[..], &["--dense"]].concat());
    assert_eq!(open["accuracy"], dense["accuracy"]);
    assert_eq!(open["cost"]["executed_flops"], open["cost"]["dense_flops"]);
    assert_eq!(dense["cost"]["executed_flops"], dense["cost"]["dense_flops"]);
    assert_eq!(open["cost"]["dense_flops"], dense["cost"]["dense_flops"]);
}

#[test]
fn eval_totals_equal_recounted_flops() {
    let dir = TempDir::new().unwrap();
    let cfg = ExperimentConfig::load(&smoke_config()).unwrap();
    let opts = RunOptions {
        out: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let ck = trained().join("checkpoint.cgn");
    let gates = GateOptions::default();
    let ev = cmd_eval::<f32>(&cfg, &ck, &gates, &opts).unwrap();

    let (_, val) = load_datasets::<f32>(&cfg, cfg.seed).unwrap();
    let model = prepare_model::<f32>(&ck, &gates, &[]).unwrap();
    let traces = model.infer_batch(&val.samples(), false).unwrap();
    let recount = count_flops(&model.geometries(), &traces).unwrap();
    assert_eq!(ev.samples, val.len());
    assert_eq!(ev.cost.executed_flops, recount.executed_flops);
    assert_eq!(ev.cost.dense_flops, recount.dense_flops);
    assert_eq!(ev.cost.gate_comparisons, recount.gate_comparisons);
    assert!(ev.cost.executed_flops < ev.cost.dense_flops);
}

#[test]
fn idx_round_trip() {
    let dir = TempDir::new().unwrap();
    let pixels: Vec<u8> = (0..4 * 3 * 2).map(|i| (i * 10) as u8).collect();
    let labels = [3u8, 0, 9, 3];
    let ip = dir.path().join("images.idx");
    let lp = dir.path().join("labels.idx");
    std::fs::write(&ip, encode_idx(&[4, 3, 2], &pixels)).unwrap();
    std::fs::write(&lp, encode_idx(&[4], &labels)).unwrap();
    let ds = read_idx_pair(&ip, &lp).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.sample_shape, [1, 3, 2]);
    assert_eq!(ds.labels, vec![3, 0, 9, 3]);
    assert_eq!(ds.classes, 10);
    for (v, &p) in ds.images.iter().zip(&pixels) {
        assert_eq!(*v, p as f64 / 255.0);
    }

    let source: DatasetSource =
        serde_json::from_str(r#"{ "format": "idx", "images": "images.idx", "labels": "labels.idx" }"#).unwrap();
    let mut source = source;
    source.rebase(dir.path());
    assert_eq!(source.load().unwrap(), ds);
}

#[test]
fn truncated_idx_is_rejected() {
    let dir = TempDir::new().unwrap();
    let full = encode_idx(&[2, 2, 2], &[1; 8]);
    let ip = dir.path().join("images.idx");
    let lp = dir.path().join("labels.idx");
    std::fs::write(&lp, encode_idx(&[2], &[0, 1])).unwrap();

    std::fs::write(&ip, &full[..full.len() - 1]).unwrap();
    let err = read_idx_pair(&ip, &lp).unwrap_err();
    assert!(err.to_string().contains("truncated"), "{err}");

    std::fs::write(&ip, &full[..6]).unwrap();
    assert!(read_idx_pair(&ip, &lp).is_err());

    std::fs::write(&ip, &full).unwrap();
    std::fs::write(&lp, encode_idx(&[3], &[0, 1, 1])).unwrap();
    assert!(read_idx_pair(&ip, &lp).is_err(), "label count mismatch");
}

#[test]
fn raw_samples_follow_the_sidecar() {
    let dir = TempDir::new().unwrap();
    let values: Vec<f32> = vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75];
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let p = dir.path().join("x.bin");
    let side = dir.path().join("x.bin.json");
    std::fs::write(&p, &bytes).unwrap();
    std::fs::write(&side, r#"{ "shape": [1, 1, 3], "dtype": "f32", "classes": 2, "labels": [1, 0] }"#).unwrap();
    let ds = read_raw(&p, &side).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.images, values.iter().map(|&v| v as f64).collect::<Vec<_>>());

    std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
    assert!(read_raw(&p, &side).is_err());
}

#[test]
fn synthetic_digits_are_reproducible() {
    let a = synthetic_digits(50, 9, 0.3);
    assert_eq!(a, synthetic_digits(50, 9, 0.3));
    assert_ne!(a.images, synthetic_digits(50, 10, 0.3).images);
    assert!(a.images.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(a.labels.iter().all(|&l| l < 10));
}

#[test]
fn bundled_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}
