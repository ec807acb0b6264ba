use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use imbalance_cli::config::{ExperimentConfig, ExperimentKind};
use imbalance_cli::error::{CliError, Result};
use imbalance_cli::report::write_report;
use imbalance_cli::runner::{generate_datasets, run_experiment, RunRecord};
use imbalance_core::eval::{rare_class_probe, train_probe, ProbeConfig};
use imbalance_core::linalg::EigenOptions;
use imbalance_core::maxmargin::{solve_maxmargin_qp, QpOptions};
use imbalance_core::persist::{load_dataset, load_feature_map, persist_feature_map};
use imbalance_core::spectral::{empirical_second_moment, solve_spectral};

#[derive(Parser, Debug)]
#[command(name = "imbalance", version, about = "Seeded experiments on representation learning under class imbalance")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `trial_count`.
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Trials run concurrently.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write each trial's datasets (CSV + manifest) for the configured experiment.
    Gen,
    /// Min-norm max-margin features of a persisted dataset.
    SolveSl {
        #[arg(long)]
        data: PathBuf,
    },
    /// Top-eigenvector features of a persisted dataset's second moment.
    SolveSsl {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2)]
        rank: usize,
    },
    /// Lemma checks on toy draws.
    Verify,
    /// Leakage/capture sweep over the toy dimension grid.
    Sweep,
    /// SGD vs SAM vs reweighted SAM on a step-imbalanced mixture.
    Rwsam,
    /// Linear probe of persisted features.
    Probe {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Restrict to the classes present in the training set.
        #[arg(long)]
        rare: bool,
    },
    /// Relative accuracy gaps from paired balanced/imbalanced data.
    Gap,
    /// Median/IQR tables over the trials of a finished run.
    Report {
        /// Run directory; defaults to --out.
        run_dir: Option<PathBuf>,
    },
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn load_config(cli: &Cli, expected: Option<ExperimentKind>) -> Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, expected) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(kind)) => ExperimentConfig::new(kind),
        (None, None) => return Err(CliError::Config("this command needs --config".into())),
    };
    if let Some(kind) = expected {
        if cfg.kind != kind {
            return Err(CliError::Config(format!(
                "config kind {} does not match this command (expects {})",
                cfg.kind.name(),
                kind.name()
            )));
        }
    }
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(trials) = cli.trials {
        cfg.trial_count = trials;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs/latest"));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

fn print_json(value: &serde_json::Value) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value).expect("json");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json");
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn summarize_run(record: &RunRecord, out: &Path) -> Result<()> {
    print_json(&serde_json::json!({
        "kind": record.kind,
        "config_hash": record.config_hash,
        "out": out.display().to_string(),
        "trials": record.trials.len(),
        "failed": record.failed(),
    }));
    record.status()
}

fn run(cli: &Cli) -> Result<()> {
    let jobs = cli.jobs.unwrap_or_else(default_jobs).max(1);
    let experiment = |kind: ExperimentKind| -> Result<()> {
        let cfg = load_config(cli, Some(kind))?;
        let record = run_experiment(&cfg, jobs)?;
        summarize_run(&record, &cfg.output_dir)
    };
    match &cli.command {
        Command::Gen => {
            let cfg = load_config(cli, None)?;
            let record = generate_datasets(&cfg, jobs)?;
            summarize_run(&record, &cfg.output_dir)
        }
        Command::Sweep => experiment(ExperimentKind::ToyTheorem),
        Command::Verify => experiment(ExperimentKind::LemmaChecks),
        Command::Rwsam => experiment(ExperimentKind::RwsamPipeline),
        Command::Gap => experiment(ExperimentKind::GapStudy),
        Command::SolveSl { data } => {
            let ds = load_dataset(data)?;
            let sol = solve_maxmargin_qp(&ds, &QpOptions::default())?;
            let out = out_dir(cli)?;
            persist_feature_map(&sol.feature_map, &out.join("features.csv"))?;
            let summary = serde_json::json!({
                "objective": sol.objective,
                "min_margin": sol.min_margin,
                "kkt_residual": sol.kkt_residual,
                "sweeps": sol.iterations,
                "converged": sol.converged,
            });
            write_json(&out.join("solve-sl.json"), &summary)?;
            print_json(&summary);
            Ok(())
        }
        Command::SolveSsl { data, rank } => {
            let ds = load_dataset(data)?;
            let moment = empirical_second_moment(&ds)?;
            let (fm, report) = solve_spectral(&moment, *rank, &EigenOptions::default())?;
            let out = out_dir(cli)?;
            persist_feature_map(&fm, &out.join("features.csv"))?;
            let summary = serde_json::to_value(&report).expect("json");
            write_json(&out.join("solve-ssl.json"), &summary)?;
            print_json(&serde_json::json!({
                "eigenvalues": report.eigenvalues,
                "eigengap": report.eigengap,
                "degenerate_gap": report.degenerate_gap,
            }));
            Ok(())
        }
        Command::Probe { features, train, test, rare } => {
            let fm = load_feature_map(features)?;
            let train = load_dataset(train)?;
            let test = load_dataset(test)?;
            let cfg = ProbeConfig::default();
            let result = if *rare {
                rare_class_probe(&fm, &train, &test, &cfg)?
            } else {
                train_probe(&fm, &train, &test, &cfg)?
            };
            let out = out_dir(cli)?;
            let value = serde_json::to_value(&result).expect("json");
            write_json(&out.join("probe.json"), &value)?;
            print_json(&serde_json::json!({
                "top1_accuracy": result.top1_accuracy,
                "per_class_accuracy": result.per_class_accuracy,
                "steps": result.steps,
            }));
            Ok(())
        }
        Command::Report { run_dir } => {
            let dir = run_dir
                .clone()
                .or_else(|| cli.out.clone())
                .unwrap_or_else(|| PathBuf::from("runs/latest"));
            let written = write_report(&dir)?;
            for path in written {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
