//! Output layout of a run:
//!
//! ```text
//! <out>/config.toml          effective config
//! <out>/run.json             RunRecord
//! <out>/results.csv          every trial's result rows, in trial order
//! <out>/trial-000/result.csv
//! <out>/trial-000/metrics.csv
//! <out>/trial-000/error.json  (failed trials only)
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use imbalance_core::persist::persist_dataset;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::experiments::{fmt, run_trial, trial_datasets, trial_seed, Metric, Table};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub kind: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub trial_count: usize,
    pub trials: Vec<TrialRecord>,
    pub outputs: Vec<String>,
}

impl RunRecord {
    pub fn failed(&self) -> usize {
        self.trials.iter().filter(|t| !t.ok).count()
    }

    /// Exit status for the run: partial failure when any trial failed.
    pub fn status(&self) -> std::result::Result<(), CliError> {
        match self.failed() {
            0 => Ok(()),
            failed => Err(CliError::PartialFailure {
                failed,
                total: self.trials.len(),
            }),
        }
    }
}

pub fn trial_dir_name(trial: usize) -> String {
    format!("trial-{trial:03}")
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Fatal(format!("{}: {e}", path.display())))?;
    w.write_record(header).map_err(|e| CliError::Fatal(e.to_string()))?;
    for row in rows {
        w.write_record(row).map_err(|e| CliError::Fatal(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Fatal(e.to_string()))?;
    Ok(pool.install(f))
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = cfg.output_dir.clone();
    create_dir(&out)?;
    let toml_text = toml::to_string(&cfg.normalized()).map_err(|e| CliError::Fatal(e.to_string()))?;
    write_text(&out.join("config.toml"), &toml_text)?;
    Ok(out)
}

fn finish(cfg: &ExperimentConfig, out: &Path, trials: Vec<TrialRecord>, outputs: Vec<String>) -> Result<RunRecord> {
    let record = RunRecord {
        version: env!("CARGO_PKG_VERSION").to_string(),
        kind: cfg.kind.name().to_string(),
        config_hash: cfg.hash(),
        master_seed: cfg.master_seed,
        trial_count: cfg.trial_count,
        trials,
        outputs,
    };
    let json = serde_json::to_string_pretty(&record).map_err(|e| CliError::Fatal(e.to_string()))?;
    write_text(&out.join("run.json"), &json)?;
    Ok(record)
}

struct Finished {
    record: TrialRecord,
    table: Option<Table>,
}

fn record_failure(dir: &Path, record: &mut TrialRecord, err: &CliError) -> Result<()> {
    log::warn!("trial {} failed: {err}", record.trial);
    record.ok = false;
    record.error = Some(err.to_string());
    let body = serde_json::json!({ "trial": record.trial, "seed": record.seed, "error": err.to_string() });
    write_text(&dir.join("error.json"), &body.to_string())?;
    record.outputs.push(format!("{}/error.json", trial_dir_name(record.trial)));
    Ok(())
}

fn execute_trial(cfg: &ExperimentConfig, out: &Path, trial: usize) -> Result<Finished> {
    let seed = trial_seed(cfg.master_seed, trial);
    let name = trial_dir_name(trial);
    let dir = out.join(&name);
    create_dir(&dir)?;
    let start = Instant::now();
    let mut record = TrialRecord {
        trial,
        seed,
        ok: true,
        error: None,
        outputs: Vec::new(),
        wall_time_s: 0.0,
    };
    let table = match run_trial(cfg, seed) {
        Ok(output) => {
            write_csv(&dir.join("result.csv"), &output.table.header, &output.table.rows)?;
            write_metrics(&dir.join("metrics.csv"), trial, seed, &output.metrics)?;
            record.outputs.push(format!("{name}/result.csv"));
            record.outputs.push(format!("{name}/metrics.csv"));
            for (file, contents) in &output.files {
                write_text(&dir.join(file), contents)?;
                record.outputs.push(format!("{name}/{file}"));
            }
            Some(output.table)
        }
        Err(err) => {
            record_failure(&dir, &mut record, &err)?;
            None
        }
    };
    record.wall_time_s = start.elapsed().as_secs_f64();
    Ok(Finished { record, table })
}

fn write_metrics(path: &Path, trial: usize, seed: u64, metrics: &[Metric]) -> Result<()> {
    let header: Vec<String> = ["trial", "seed", "group", "metric", "value"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = metrics
        .iter()
        .map(|m| vec![trial.to_string(), seed.to_string(), m.group.clone(), m.metric.clone(), fmt(m.value)])
        .collect();
    write_csv(path, &header, &rows)
}

/// Runs every trial (up to `jobs` at once) and writes the run layout.
/// Trial failures are recorded, not propagated; check
/// [`RunRecord::status`].
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<RunRecord> {
    cfg.validate()?;
    let out = prepare_out(cfg)?;
    let finished: Vec<Result<Finished>> = with_pool(jobs, || {
        (0..cfg.trial_count)
            .into_par_iter()
            .map(|t| execute_trial(cfg, &out, t))
            .collect()
    })?;
    let finished: Vec<Finished> = finished.into_iter().collect::<Result<_>>()?;

    let mut header: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for f in &finished {
        if let Some(table) = &f.table {
            header.get_or_insert_with(|| {
                let mut h = vec!["trial".to_string(), "seed".to_string()];
                h.extend(table.header.iter().cloned());
                h
            });
            for row in &table.rows {
                let mut full = vec![f.record.trial.to_string(), f.record.seed.to_string()];
                full.extend(row.iter().cloned());
                rows.push(full);
            }
        }
    }
    let mut outputs = vec!["config.toml".to_string()];
    if let Some(header) = header {
        write_csv(&out.join("results.csv"), &header, &rows)?;
        outputs.push("results.csv".into());
    }
    finish(cfg, &out, finished.into_iter().map(|f| f.record).collect(), outputs)
}

/// Writes each trial's datasets as CSV plus manifest under
/// `trial-XXX/data/`.
pub fn generate_datasets(cfg: &ExperimentConfig, jobs: usize) -> Result<RunRecord> {
    cfg.validate()?;
    let out = prepare_out(cfg)?;
    let records: Vec<Result<TrialRecord>> = with_pool(jobs, || {
        (0..cfg.trial_count)
            .into_par_iter()
            .map(|trial| {
                let seed = trial_seed(cfg.master_seed, trial);
                let name = trial_dir_name(trial);
                let dir = out.join(&name);
                create_dir(&dir)?;
                let start = Instant::now();
                let mut record = TrialRecord {
                    trial,
                    seed,
                    ok: true,
                    error: None,
                    outputs: Vec::new(),
                    wall_time_s: 0.0,
                };
                match trial_datasets(cfg, seed) {
                    Ok(sets) => {
                        for (stem, ds) in sets {
                            let rel = format!("{name}/data/{stem}.csv");
                            persist_dataset(&ds, &out.join(&rel))?;
                            record.outputs.push(rel);
                        }
                    }
                    Err(err) => record_failure(&dir, &mut record, &err)?,
                }
                record.wall_time_s = start.elapsed().as_secs_f64();
                Ok(record)
            })
            .collect()
    })?;
    let records = records.into_iter().collect::<Result<_>>()?;
    finish(cfg, &out, records, vec!["config.toml".into()])
}
