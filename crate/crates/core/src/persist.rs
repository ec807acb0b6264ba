//! CSV + JSON-manifest persistence for datasets and feature maps.
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! a load reproduces every `f64` bit-exactly. The manifest's `sha256`
//! covers the canonical binary form of the rows: for each row the
//! one-based label (datasets only) as little-endian `u32`, followed by each
//! value's IEEE-754 bits as little-endian `u64`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMap};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub config: serde_json::Value,
    pub n: usize,
    pub d: usize,
    #[serde(rename = "C")]
    pub class_count: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureManifest {
    pub schema_version: u32,
    pub kind: FeatureKind,
    pub m: usize,
    pub d: usize,
    pub sha256: String,
}

/// `data.csv` -> `data.manifest.json`.
pub fn manifest_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("manifest.json")
}

fn hash_rows(values: &Array2<f64>, labels: Option<&[usize]>) -> String {
    let mut hasher = Sha256::new();
    for (i, row) in values.rows().into_iter().enumerate() {
        if let Some(labels) = labels {
            hasher.update((labels[i] as u32 + 1).to_le_bytes());
        }
        for v in row {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

pub fn dataset_hash(ds: &Dataset) -> String {
    hash_rows(&ds.inputs, Some(&ds.labels))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn header(prefix: Option<&str>, d: usize) -> String {
    let mut line = String::new();
    if let Some(p) = prefix {
        line.push_str(p);
        line.push(',');
    }
    for j in 0..d {
        if j > 0 {
            line.push(',');
        }
        let _ = write!(line, "x{j}");
    }
    line
}

pub fn dataset_to_csv(ds: &Dataset) -> String {
    let mut out = header(Some("label"), ds.dim());
    out.push('\n');
    for (row, &label) in ds.inputs.rows().into_iter().zip(&ds.labels) {
        let _ = write!(out, "{}", label + 1);
        for v in row {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn persist_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    write_file(path, &dataset_to_csv(ds))?;
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        config: ds.provenance.clone(),
        n: ds.n(),
        d: ds.dim(),
        class_count: ds.class_count,
        sha256: dataset_hash(ds),
    };
    write_file(&manifest_path(path), &serde_json::to_string_pretty(&manifest)?)
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses `label?,x0,...` lines into a matrix. Returns (labels, values).
fn parse_matrix(
    path: &Path,
    text: &str,
    with_label: bool,
    expected_cols: usize,
) -> Result<(Vec<usize>, Vec<f64>, usize)> {
    let mut lines = text.lines();
    let head = lines
        .next()
        .ok_or_else(|| Error::malformed(path, "empty file"))?;
    let want = header(with_label.then_some("label"), expected_cols);
    if head.trim_end() != want {
        return Err(Error::malformed(
            path,
            format!("header does not match {expected_cols} columns"),
        ));
    }
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut rows = 0;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        if with_label {
            let raw = fields.next().unwrap_or("");
            let label: usize = raw.trim().parse().map_err(|_| {
                Error::malformed(path, format!("line {}: bad label {raw:?}", lineno + 2))
            })?;
            if label == 0 {
                return Err(Error::malformed(
                    path,
                    format!("line {}: labels are one-based", lineno + 2),
                ));
            }
            labels.push(label - 1);
        }
        let before = values.len();
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| {
                Error::malformed(path, format!("line {}: bad number {f:?}", lineno + 2))
            })?;
            values.push(v);
        }
        if values.len() - before != expected_cols {
            return Err(Error::Dimension(format!(
                "{}: line {} has {} values, manifest says {}",
                path.display(),
                lineno + 2,
                values.len() - before,
                expected_cols
            )));
        }
        rows += 1;
    }
    Ok((labels, values, rows))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mpath = manifest_path(path);
    let manifest: DatasetManifest = serde_json::from_str(&read_file(&mpath)?)
        .map_err(|e| Error::malformed(&mpath, e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::malformed(
            &mpath,
            format!("unsupported schema_version {}", manifest.schema_version),
        ));
    }
    let (labels, values, rows) = parse_matrix(path, &read_file(path)?, true, manifest.d)?;
    if rows != manifest.n {
        return Err(Error::Dimension(format!(
            "{}: {} rows, manifest says {}",
            path.display(),
            rows,
            manifest.n
        )));
    }
    let inputs = Array2::from_shape_vec((rows, manifest.d), values)
        .map_err(|e| Error::malformed(path, e.to_string()))?;
    if labels.iter().any(|&l| l >= manifest.class_count) {
        return Err(Error::malformed(path, "label exceeds class count"));
    }
    let ds = Dataset::new(inputs, labels, manifest.class_count, manifest.config)?;
    let actual = dataset_hash(&ds);
    if actual != manifest.sha256 {
        return Err(Error::HashMismatch {
            path: path.to_path_buf(),
            expected: manifest.sha256,
            actual,
        });
    }
    Ok(ds)
}

pub fn persist_feature_map(fm: &FeatureMap, path: &Path) -> Result<()> {
    let mut out = header(None, fm.input_dim());
    out.push('\n');
    for row in fm.weights.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    write_file(path, &out)?;
    let manifest = FeatureManifest {
        schema_version: SCHEMA_VERSION,
        kind: fm.kind,
        m: fm.rows(),
        d: fm.input_dim(),
        sha256: hash_rows(&fm.weights, None),
    };
    write_file(&manifest_path(path), &serde_json::to_string_pretty(&manifest)?)
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    let mpath = manifest_path(path);
    let manifest: FeatureManifest = serde_json::from_str(&read_file(&mpath)?)
        .map_err(|e| Error::malformed(&mpath, e.to_string()))?;
    let (_, values, rows) = parse_matrix(path, &read_file(path)?, false, manifest.d)?;
    if rows != manifest.m {
        return Err(Error::Dimension(format!(
            "{}: {} rows, manifest says {}",
            path.display(),
            rows,
            manifest.m
        )));
    }
    let weights = Array2::from_shape_vec((rows, manifest.d), values)
        .map_err(|e| Error::malformed(path, e.to_string()))?;
    let actual = hash_rows(&weights, None);
    if actual != manifest.sha256 {
        return Err(Error::HashMismatch {
            path: path.to_path_buf(),
            expected: manifest.sha256,
            actual,
        });
    }
    FeatureMap::new(weights, manifest.kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_toy, ToyConfig};
    use ndarray::array;

    #[test]
    fn hand_written_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("tiny.csv");
        let rows = "label,x0,x1\n2,0.5,-1\n1,3,1e-3\n3,0,0\n";
        fs::write(&csv, rows).unwrap();
        let inputs = array![[0.5, -1.0], [3.0, 1e-3], [0.0, 0.0]];
        let expected = Dataset::new(inputs, vec![1, 0, 2], 3, serde_json::json!({})).unwrap();
        let manifest = DatasetManifest {
            schema_version: 1,
            config: serde_json::json!({}),
            n: 3,
            d: 2,
            class_count: 3,
            sha256: dataset_hash(&expected),
        };
        fs::write(manifest_path(&csv), serde_json::to_string(&manifest).unwrap()).unwrap();
        let ds = load_dataset(&csv).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.labels, vec![1, 0, 2]);
        assert_eq!(ds, expected);
    }

    #[test]
    fn tampered_hash_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("toy.csv");
        let ds = gen_toy(&ToyConfig::with_defaults(5, 3, 3, 1, 9)).unwrap();
        persist_dataset(&ds, &csv).unwrap();
        let mpath = manifest_path(&csv);
        let mut manifest: DatasetManifest =
            serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        manifest.sha256 = "00".repeat(32);
        fs::write(&mpath, serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(matches!(load_dataset(&csv), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn row_width_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("bad.csv");
        let ds = gen_toy(&ToyConfig::with_defaults(4, 2, 2, 1, 1)).unwrap();
        persist_dataset(&ds, &csv).unwrap();
        let text = fs::read_to_string(&csv).unwrap();
        let broken = text.replacen("\n1,", "\n1,0.0,", 1);
        fs::write(&csv, broken).unwrap();
        assert!(load_dataset(&csv).is_err());
    }

    #[test]
    fn feature_map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        let fm = FeatureMap::new(array![[0.1, 1.0 / 3.0], [-2.5e-300, 7.0]], FeatureKind::Supervised)
            .unwrap();
        persist_feature_map(&fm, &path).unwrap();
        assert_eq!(load_feature_map(&path).unwrap(), fm);
    }
}
