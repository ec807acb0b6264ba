use std::path::Path;
use std::process::Command;

use imbalance_cli::config::{ExperimentConfig, ExperimentKind};
use imbalance_cli::report::{collect_metrics, write_report};
use imbalance_cli::runner::run_experiment;
use imbalance_core::eval::relative_gap;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_imbalance"))
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn small_toy(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(
        r#"
kind = "toy-theorem"
master_seed = 11
trial_count = 2
[toy_theorem]
d_grid = [256]
n_frequent = 400
ssl_rank = 2
"#,
    )
    .unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

const SMALL_GAP: &str = r#"
kind = "gap-study"
master_seed = 5
trial_count = 2
[gap_study]
dim = 128
classes = 4
base_count = 30
shape = "exponential"
ratios = [0.1]
signal_scale = 3.0
noise_scale = 1.0
ssl_rank = 4
probe_train_per_class = 20
probe_test_per_class = 40
"#;

const SMALL_RWSAM: &str = r#"
kind = "rwsam-pipeline"
master_seed = 9
trial_count = 2
[rwsam]
dim = 16
frequent_classes = 2
rare_classes = 2
n_frequent = 40
n_rare = 3
heldout_per_class = 20
rank = 3
probe_per_class = 10
[rwsam.stage1]
steps = 30
batch_size = 16
[rwsam.stage2]
steps = 30
batch_size = 16
"#;

#[test]
fn toy_sweep_writes_the_run_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_toy(dir.path());
    let record = run_experiment(&cfg, 2).unwrap();
    assert_eq!(record.failed(), 0);
    assert_eq!(record.trials.len(), 2);
    for name in ["config.toml", "run.json", "results.csv", "trial-000/result.csv", "trial-001/metrics.csv"] {
        assert!(dir.path().join(name).is_file(), "missing {name}");
    }
    let results = read(&dir.path().join("results.csv"));
    let lines: Vec<&str> = results.lines().collect();
    assert_eq!(lines[0], "trial,seed,d,sl_leakage,ssl_capture,capture_deficit,qp_converged");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("1,"));

    // The written config reloads to the same hash.
    let reloaded = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(reloaded.hash(), record.config_hash);
}

#[test]
fn reruns_are_byte_identical() {
    let configs = [SMALL_GAP, SMALL_RWSAM];
    for text in configs {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::from_toml(text).unwrap();
        cfg.output_dir = a.path().to_path_buf();
        run_experiment(&cfg, 2).unwrap().status().unwrap();
        cfg.output_dir = b.path().to_path_buf();
        run_experiment(&cfg, 1).unwrap().status().unwrap();
        for name in [
            "results.csv",
            "trial-000/result.csv",
            "trial-000/metrics.csv",
            "trial-001/result.csv",
            "trial-001/metrics.csv",
        ] {
            assert_eq!(read(&a.path().join(name)), read(&b.path().join(name)), "{name} differs");
        }
    }
}

#[test]
fn gap_deltas_recompute_from_accuracies() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::from_toml(SMALL_GAP).unwrap();
    cfg.output_dir = dir.path().to_path_buf();
    run_experiment(&cfg, 1).unwrap().status().unwrap();
    let mut reader = csv::Reader::from_path(dir.path().join("results.csv")).unwrap();
    let mut rows = 0;
    for row in reader.records() {
        let row = row.unwrap();
        let r: f64 = row[3].parse().unwrap();
        let n: usize = row[4].parse().unwrap();
        let a_bal: f64 = row[5].parse().unwrap();
        let a_imb: f64 = row[6].parse().unwrap();
        let delta: f64 = row[7].parse().unwrap();
        assert_eq!(delta, (a_bal - a_imb) / a_bal);
        assert_eq!(relative_gap(a_bal, a_imb, n, r).unwrap().delta, delta);
        rows += 1;
    }
    assert_eq!(rows, 4);
}

#[test]
fn report_summarizes_every_trial() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_toy(dir.path());
    run_experiment(&cfg, 1).unwrap();
    let records = collect_metrics(dir.path()).unwrap();
    assert!(records.iter().any(|r| r.trial == 1));
    write_report(dir.path()).unwrap();
    let summary = read(&dir.path().join("summary.csv"));
    assert!(summary.starts_with("group,metric,trials,median,q1,q3,iqr,min,max"));
    for line in summary.lines().skip(1) {
        assert_eq!(line.split(',').nth(2), Some("2"), "{line}");
    }
}

#[test]
fn binary_runs_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("toy.toml");
    std::fs::write(&config, "kind = \"toy-theorem\"\n[toy_theorem]\nd_grid = [128]\nn_frequent = 200\n").unwrap();
    let out = dir.path().join("run");
    let status = bin()
        .args(["sweep", "--trials", "2", "--jobs", "1", "--seed", "3"])
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&status.stdout).unwrap();
    assert_eq!(summary["trials"], 2);
    assert_eq!(summary["failed"], 0);

    let status = bin().arg("report").arg(&out).status().unwrap();
    assert!(status.success());
    assert!(out.join("summary.json").is_file());
}

#[test]
fn binary_solves_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("gap.toml");
    std::fs::write(&config, SMALL_GAP).unwrap();
    let gen = dir.path().join("gen");
    let status = bin()
        .args(["gen", "--trials", "1", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&gen)
        .status()
        .unwrap();
    assert!(status.success());
    let data = gen.join("trial-000/data");
    assert!(data.join("imbalanced-r0.1.manifest.json").is_file());

    let solved = dir.path().join("ssl");
    let status = bin()
        .args(["solve-ssl", "--rank", "4", "--data"])
        .arg(data.join("balanced-r0.1.csv"))
        .arg("--out")
        .arg(&solved)
        .status()
        .unwrap();
    assert!(status.success());

    let output = bin()
        .arg("probe")
        .arg("--features")
        .arg(solved.join("features.csv"))
        .arg("--train")
        .arg(data.join("probe-train.csv"))
        .arg("--test")
        .arg(data.join("probe-test.csv"))
        .arg("--out")
        .arg(&solved)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let probe: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    let acc = probe["top1_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let sl = dir.path().join("sl");
    let output = bin()
        .arg("solve-sl")
        .arg("--data")
        .arg(data.join("imbalanced-r0.1.csv"))
        .arg("--out")
        .arg(&sl)
        .output()
        .unwrap();
    assert!(output.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert!(summary["min_margin"].as_f64().unwrap() >= 1.0 - 1e-4);
    assert!(sl.join("features.csv").is_file());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "kind = \"toy-theorem\"\nunknown_key = 1\n").unwrap();
    let code = |args: &[&str], config: Option<&Path>| {
        let mut cmd = bin();
        cmd.args(args).arg("--out").arg(dir.path().join("out"));
        if let Some(c) = config {
            cmd.arg("--config").arg(c);
        }
        cmd.output().unwrap().status.code()
    };
    assert_eq!(code(&["sweep"], Some(&bad)), Some(2));
    assert_eq!(code(&["gen"], None), Some(2));

    let gap = dir.path().join("gap.toml");
    std::fs::write(&gap, SMALL_GAP).unwrap();
    assert_eq!(code(&["sweep"], Some(&gap)), Some(2));
    assert_eq!(code(&["sweep", "--trials", "0"], None), Some(2));

    let missing = dir.path().join("missing.csv");
    assert_eq!(code(&["solve-sl", "--data", missing.to_str().unwrap()], None), Some(4));
    assert_eq!(code(&["report", dir.path().join("nowhere").to_str().unwrap()], None), Some(4));
}

#[test]
fn default_configs_match_their_kind() {
    for kind in [
        ExperimentKind::ToyTheorem,
        ExperimentKind::RwsamPipeline,
        ExperimentKind::GapStudy,
        ExperimentKind::LemmaChecks,
    ] {
        let cfg = ExperimentConfig::new(kind);
        cfg.validate().unwrap();
        assert_eq!(cfg.kind, kind);
    }
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert_eq!(seen, 4);
}
