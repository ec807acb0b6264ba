//! Per-example weights from a Gaussian kernel density estimate over
//! representations: `w_i = density_i^{-alpha}`, rescaled to mean one.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthRule {
    MedianHeuristic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    Rule(BandwidthRule),
}

fn default_standardize() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdeConfig {
    pub bandwidth: Bandwidth,
    pub alpha: f64,
    /// Standardize each feature dimension before computing distances.
    #[serde(default = "default_standardize")]
    pub standardize: bool,
}

impl KdeConfig {
    pub fn new(bandwidth: Bandwidth, alpha: f64) -> Self {
        KdeConfig {
            bandwidth,
            alpha,
            standardize: true,
        }
    }

    /// Preset used for the CIFAR-10-LT scale setting.
    pub fn cifar_preset() -> Self {
        Self::new(Bandwidth::Rule(BandwidthRule::MedianHeuristic), 1.2)
    }

    /// Preset used for the ImageNet-LT scale setting.
    pub fn imagenet_preset() -> Self {
        Self::new(Bandwidth::Rule(BandwidthRule::MedianHeuristic), 0.5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    Raw,
    MeanOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub normalization: Normalization,
}

impl WeightVector {
    pub fn uniform(n: usize) -> Self {
        WeightVector {
            weights: vec![1.0; n],
            normalization: Normalization::MeanOne,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `index,weight` rows under a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,weight\n");
        for (i, w) in self.weights.iter().enumerate() {
            let _ = writeln!(out, "{i},{w:?}");
        }
        out
    }

    pub fn coefficient_of_variation(&self) -> f64 {
        let n = self.weights.len() as f64;
        let mean = self.weights.iter().sum::<f64>() / n;
        let var = self.weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
        var.sqrt() / mean
    }
}

pub const MEDIAN_SUBSAMPLE: usize = 1024;

fn standardized(features: ArrayView2<f64>) -> Array2<f64> {
    let n = features.nrows() as f64;
    let mut out = features.to_owned();
    for mut col in out.columns_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        col.mapv_inplace(|v| (v - mean) / sd);
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise distance over an evenly strided subsample of at most
/// [`MEDIAN_SUBSAMPLE`] rows.
pub fn median_heuristic(features: ArrayView2<f64>) -> f64 {
    let n = features.nrows();
    let s = n.min(MEDIAN_SUBSAMPLE);
    let rows: Vec<Vec<f64>> = (0..s)
        .map(|k| features.row(k * n / s).to_vec())
        .collect();
    let mut dists = Vec::with_capacity(s * s.saturating_sub(1) / 2);
    for i in 0..s {
        for j in i + 1..s {
            dists.push(sq_dist(&rows[i], &rows[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    }
}

fn prepared(features: ArrayView2<f64>, cfg: &KdeConfig) -> Result<(Array2<f64>, f64)> {
    if features.nrows() == 0 || features.ncols() == 0 {
        return Err(Error::Empty("density estimation needs n >= 1 and m >= 1".into()));
    }
    if !(cfg.alpha >= 0.0) {
        return Err(Error::Config(format!("alpha={} must be non-negative", cfg.alpha)));
    }
    let feats = if cfg.standardize {
        standardized(features)
    } else {
        features.as_standard_layout().to_owned()
    };
    let h = match cfg.bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Rule(BandwidthRule::MedianHeuristic) => median_heuristic(feats.view()),
    };
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("bandwidth resolved to {h}, must be positive")));
    }
    Ok((feats, h))
}

/// `density_i = (1/n) sum_j exp(-||f_i - f_j||^2 / (2 h^2))`, self term
/// included and the Gaussian normalizing constant omitted. Each row sums
/// over `j` in index order, so the result does not depend on how rows are
/// scheduled across threads.
pub fn estimate_density(features: ArrayView2<f64>, cfg: &KdeConfig) -> Result<Vec<f64>> {
    let (feats, h) = prepared(features, cfg)?;
    Ok(densities(&feats, h))
}

fn densities(feats: &Array2<f64>, h: f64) -> Vec<f64> {
    let n = feats.nrows();
    let inv = 1.0 / (2.0 * h * h);
    let slice = feats.as_slice().expect("standard layout");
    let m = feats.ncols();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let fi = &slice[i * m..(i + 1) * m];
            let mut acc = 0.0;
            for j in 0..n {
                acc += (-sq_dist(fi, &slice[j * m..(j + 1) * m]) * inv).exp();
            }
            acc / n as f64
        })
        .collect()
}

/// `density_i^{-alpha}` without rescaling.
pub fn raw_weights(features: ArrayView2<f64>, cfg: &KdeConfig) -> Result<WeightVector> {
    let dens = estimate_density(features, cfg)?;
    Ok(WeightVector {
        weights: dens.iter().map(|p| p.powf(-cfg.alpha)).collect(),
        normalization: Normalization::Raw,
    })
}

pub fn compute_weights(features: ArrayView2<f64>, cfg: &KdeConfig) -> Result<WeightVector> {
    let raw = raw_weights(features, cfg)?;
    let mean = raw.weights.iter().sum::<f64>() / raw.len() as f64;
    Ok(WeightVector {
        weights: raw.weights.iter().map(|w| w / mean).collect(),
        normalization: Normalization::MeanOne,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fixed(h: f64, alpha: f64) -> KdeConfig {
        KdeConfig {
            bandwidth: Bandwidth::Fixed(h),
            alpha,
            standardize: false,
        }
    }

    #[test]
    fn single_point_has_unit_density() {
        let d = estimate_density(array![[3.0, -1.0]].view(), &fixed(0.7, 1.0)).unwrap();
        assert_eq!(d, vec![1.0]);
    }

    #[test]
    fn identical_points_have_unit_density() {
        let d = estimate_density(array![[1.0], [1.0]].view(), &fixed(0.1, 1.0)).unwrap();
        assert_eq!(d, vec![1.0, 1.0]);
    }

    #[test]
    fn equilateral_triangle_formula() {
        let side = 1.3;
        let h = 0.8;
        let pts = array![
            [0.0, 0.0],
            [side, 0.0],
            [side / 2.0, side * 3f64.sqrt() / 2.0]
        ];
        let d = estimate_density(pts.view(), &fixed(h, 1.0)).unwrap();
        let expected = (1.0 + 2.0 * (-side * side / (2.0 * h * h)).exp()) / 3.0;
        for v in d {
            assert!((v - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_alpha_gives_exact_unit_weights() {
        let pts = array![[0.0], [0.1], [5.0], [5.2], [9.0]];
        let w = compute_weights(pts.view(), &fixed(0.5, 0.0)).unwrap();
        assert!(w.weights.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn isolated_point_gets_largest_weight() {
        let mut pts = Array2::<f64>::zeros((51, 2));
        pts[[50, 0]] = 100.0;
        let w = compute_weights(pts.view(), &fixed(1.0, 1.0)).unwrap();
        let iso = w.weights[50];
        assert!(w.weights[..50].iter().all(|&v| v < iso));
        // density: cluster 50/51, isolated 1/51 -> raw weights 51/50 and 51.
        let ratio = iso / w.weights[0];
        assert!((ratio - 50.0).abs() < 1e-9);
    }

    #[test]
    fn zero_bandwidth_is_rejected() {
        let err = estimate_density(array![[1.0], [1.0]].view(), &KdeConfig::cifar_preset());
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(estimate_density(array![[1.0]].view(), &fixed(0.0, 1.0)).is_err());
    }

    #[test]
    fn median_of_three_distances() {
        let pts = array![[0.0], [1.0], [3.0]];
        assert_eq!(median_heuristic(pts.view()), 2.0);
    }

    #[test]
    fn presets() {
        assert_eq!(KdeConfig::cifar_preset().alpha, 1.2);
        assert_eq!(KdeConfig::imagenet_preset().alpha, 0.5);
    }

    #[test]
    fn bandwidth_parses_from_number_or_rule() {
        let a: KdeConfig = serde_json::from_str(r#"{"bandwidth":0.5,"alpha":1.0}"#).unwrap();
        assert_eq!(a.bandwidth, Bandwidth::Fixed(0.5));
        assert!(a.standardize);
        let b: KdeConfig =
            serde_json::from_str(r#"{"bandwidth":"median-heuristic","alpha":1.0}"#).unwrap();
        assert_eq!(b.bandwidth, Bandwidth::Rule(BandwidthRule::MedianHeuristic));
    }
}
