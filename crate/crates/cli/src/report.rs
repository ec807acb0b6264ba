//! Aggregation of per-trial metrics into median/IQR tables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::experiments::fmt;
use crate::runner::{write_csv, RunRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub trial: usize,
    pub seed: u64,
    pub group: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: String,
    pub metric: String,
    pub trials: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub min: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Groups by `(group, metric)` in order of first appearance once records
/// are sorted by trial; the input order of trials does not matter.
pub fn summarize(records: &[MetricRecord]) -> Vec<SummaryRow> {
    let mut sorted: Vec<&MetricRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.trial);
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for r in &sorted {
        let key = (r.group.as_str(), r.metric.as_str());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(group, metric)| {
            let mut values: Vec<f64> = sorted
                .iter()
                .filter(|r| r.group == group && r.metric == metric)
                .map(|r| r.value)
                .collect();
            values.sort_by(f64::total_cmp);
            let q1 = quantile(&values, 0.25);
            let q3 = quantile(&values, 0.75);
            SummaryRow {
                group: group.to_string(),
                metric: metric.to_string(),
                trials: values.len(),
                median: quantile(&values, 0.5),
                q1,
                q3,
                iqr: q3 - q1,
                min: values[0],
                max: values[values.len() - 1],
            }
        })
        .collect()
}

fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Fatal(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|row| row.map_err(|e| CliError::Fatal(format!("{}: {e}", path.display()))))
        .collect()
}

/// Metrics of every successful trial listed in `run.json`.
pub fn collect_metrics(run_dir: &Path) -> Result<Vec<MetricRecord>> {
    let record_path = run_dir.join("run.json");
    let text = std::fs::read_to_string(&record_path).map_err(|e| CliError::io(&record_path, e))?;
    let record: RunRecord =
        serde_json::from_str(&text).map_err(|e| CliError::Fatal(format!("{}: {e}", record_path.display())))?;
    let mut out = Vec::new();
    for trial in record.trials.iter().filter(|t| t.ok) {
        let rel = trial
            .outputs
            .iter()
            .find(|o| o.ends_with("metrics.csv"))
            .ok_or_else(|| CliError::Fatal(format!("trial {} lists no metrics.csv", trial.trial)))?;
        out.extend(read_metrics(&run_dir.join(rel))?);
    }
    if out.is_empty() {
        return Err(CliError::Fatal(format!("{}: no trial metrics to report", run_dir.display())));
    }
    Ok(out)
}

/// Writes `summary.csv`, `summary.json` and the long-format `long.csv`
/// into the run directory.
pub fn write_report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut records = collect_metrics(run_dir)?;
    records.sort_by_key(|r| r.trial);
    let summary = summarize(&records);

    let header: Vec<String> = ["group", "metric", "trials", "median", "q1", "q3", "iqr", "min", "max"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = summary
        .iter()
        .map(|s| {
            vec![
                s.group.clone(),
                s.metric.clone(),
                s.trials.to_string(),
                fmt(s.median),
                fmt(s.q1),
                fmt(s.q3),
                fmt(s.iqr),
                fmt(s.min),
                fmt(s.max),
            ]
        })
        .collect();
    let summary_csv = run_dir.join("summary.csv");
    write_csv(&summary_csv, &header, &rows)?;

    let summary_json = run_dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Fatal(e.to_string()))?;
    std::fs::write(&summary_json, json).map_err(|e| CliError::io(&summary_json, e))?;

    let long_header: Vec<String> = ["trial", "seed", "group", "metric", "value"].map(String::from).to_vec();
    let long_rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| vec![r.trial.to_string(), r.seed.to_string(), r.group.clone(), r.metric.clone(), fmt(r.value)])
        .collect();
    let long_csv = run_dir.join("long.csv");
    write_csv(&long_csv, &long_header, &long_rows)?;
    Ok(vec![summary_csv, summary_json, long_csv])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(trial: usize, metric: &str, value: f64) -> MetricRecord {
        MetricRecord {
            trial,
            seed: trial as u64,
            group: "g".into(),
            metric: metric.into(),
            value,
        }
    }

    #[test]
    fn single_trial_has_zero_iqr() {
        let s = summarize(&[rec(0, "m", 3.5)]);
        assert_eq!(s[0].median, 3.5);
        assert_eq!(s[0].iqr, 0.0);
        assert_eq!(s[0].trials, 1);
    }

    #[test]
    fn ten_trials_give_ten_values_per_cell() {
        let records: Vec<MetricRecord> = (0..10).flat_map(|t| [rec(t, "a", t as f64), rec(t, "b", 1.0)]).collect();
        let s = summarize(&records);
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|row| row.trials == 10));
        assert_eq!(s[0].median, 4.5);
        assert_eq!(s[0].q1, 2.25);
        assert_eq!(s[0].q3, 6.75);
    }

    #[test]
    fn trial_order_does_not_matter() {
        let trial = |t: usize| vec![rec(t, "x", (t * t) as f64 * 0.3), rec(t, "y", -(t as f64))];
        let forward: Vec<MetricRecord> = (0..7).flat_map(trial).collect();
        let shuffled: Vec<MetricRecord> = [4, 0, 6, 2, 5, 1, 3].into_iter().flat_map(trial).collect();
        assert_eq!(summarize(&shuffled), summarize(&forward));
    }
}
