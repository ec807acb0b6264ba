//! Synthetic data: the three-class toy model, long-tailed class-count
//! profiles, the two-block semi-synthetic construction and Gaussian
//! class-mean mixtures.
//!
//! Every generator draws from a `ChaCha8Rng` seeded with `seed_from_u64`,
//! in a fixed documented order, so that identical configs produce
//! bit-identical datasets.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Parameters of the three-class toy distribution.
///
/// Class 1 draws `e1 - q*tau*e2 + rho*xi`, class 2 draws
/// `-e1 - q*tau*e2 + rho*xi` and class 3 draws `e2 + rho*xi`, with
/// `q ~ Uniform{0,1}` and `xi ~ N(0, I_d)`. `e1`, `e2` are the first two
/// canonical basis vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub d: usize,
    pub tau: f64,
    pub rho_noise: f64,
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub seed: u64,
    /// Test override: drop the noise term entirely (`rho` treated as 0).
    #[serde(default)]
    pub zero_noise: bool,
    /// Test override: force every `q` to this value instead of drawing it.
    #[serde(default)]
    pub fixed_q: Option<bool>,
}

impl ToyConfig {
    /// `tau = d^{1/5}` and `rho = d^{-1/5}`.
    pub fn with_defaults(d: usize, n1: usize, n2: usize, n3: usize, seed: u64) -> Self {
        let df = d as f64;
        ToyConfig {
            d,
            tau: df.powf(0.2),
            rho_noise: df.powf(-0.2),
            n1,
            n2,
            n3,
            seed,
            zero_noise: false,
            fixed_q: None,
        }
    }

    /// The regime analysed for the leakage/capture separation:
    /// `n3 = ceil(d^{1/5})` rare samples.
    pub fn theorem_setting(d: usize, n_frequent: usize, seed: u64) -> Self {
        let n3 = rare_count_for(d);
        Self::with_defaults(d, n_frequent, n_frequent, n3, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 3 {
            return Err(Error::Config(format!("toy dimension d={} must be >= 3", self.d)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau={} must be positive", self.tau)));
        }
        if !self.zero_noise && !(self.rho_noise > 0.0 && self.rho_noise.is_finite()) {
            return Err(Error::Config(format!(
                "rho_noise={} must be positive",
                self.rho_noise
            )));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n1 + self.n2 + self.n3
    }

    fn effective_rho(&self) -> f64 {
        if self.zero_noise {
            0.0
        } else {
            self.rho_noise
        }
    }
}

/// `ceil(d^{1/5})`, guarding against `powf` landing a hair above an
/// exact integer root (e.g. `1024^{0.2}`).
pub fn rare_count_for(d: usize) -> usize {
    let root = (d as f64).powf(0.2);
    let rounded = root.round();
    if (root - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        root.ceil() as usize
    }
}

/// A labelled sample matrix. Labels are zero-based class indices in
/// `0..class_count`; persisted files use one-based ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub provenance: serde_json::Value,
    /// Standard-Gaussian noise vectors behind each row, kept by generators
    /// that expose them (the toy model). Not persisted.
    pub noise: Option<Array2<f64>>,
}

impl Dataset {
    pub fn new(
        inputs: Array2<f64>,
        labels: Vec<usize>,
        class_count: usize,
        provenance: serde_json::Value,
    ) -> Result<Self> {
        let ds = Dataset {
            inputs,
            labels,
            class_count,
            provenance,
            noise: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.inputs.nrows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} rows",
                self.labels.len(),
                self.inputs.nrows()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_count) {
            return Err(Error::Config(format!(
                "label {} outside 0..{}",
                bad, self.class_count
            )));
        }
        if self.inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite input entry".into()));
        }
        if let Some(noise) = &self.noise {
            if noise.dim() != self.inputs.dim() {
                return Err(Error::Dimension("noise matrix shape differs from inputs".into()));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Row indices belonging to class `c`, in row order.
    pub fn indices_of(&self, c: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect()
    }

    /// Sub-dataset of the given rows (noise rows follow along).
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let inputs = self.inputs.select(ndarray::Axis(0), rows);
        let labels = rows.iter().map(|&i| self.labels[i]).collect();
        let noise = self
            .noise
            .as_ref()
            .map(|n| n.select(ndarray::Axis(0), rows));
        Dataset {
            inputs,
            labels,
            class_count: self.class_count,
            provenance: self.provenance.clone(),
            noise,
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize) -> Array1<f64> {
    Array1::from_iter((0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draws the toy dataset. Draw order: classes 1, 2, 3 in turn; per sample
/// one `bool` for `q` (classes 1 and 2 only, skipped when `fixed_q` is
/// set), then `d` standard normals for `xi`.
pub fn gen_toy(cfg: &ToyConfig) -> Result<Dataset> {
    cfg.validate()?;
    let d = cfg.d;
    let n = cfg.n();
    let rho = cfg.effective_rho();
    let mut rng = seeded(cfg.seed);
    let mut inputs = Array2::<f64>::zeros((n, d));
    let mut noise = Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);

    let mut row = 0;
    for (class, count) in [cfg.n1, cfg.n2, cfg.n3].into_iter().enumerate() {
        for _ in 0..count {
            let q = if class < 2 {
                match cfg.fixed_q {
                    Some(v) => v,
                    None => rng.random::<bool>(),
                }
            } else {
                false
            };
            let xi = normal_vec(&mut rng, d);
            let mut x = xi.mapv(|v| rho * v);
            match class {
                0 => x[0] += 1.0,
                1 => x[0] -= 1.0,
                _ => x[1] += 1.0,
            }
            if q {
                x[1] -= cfg.tau;
            }
            inputs.row_mut(row).assign(&x);
            noise.row_mut(row).assign(&xi);
            labels.push(class);
            row += 1;
        }
    }

    let mut ds = Dataset::new(inputs, labels, 3, provenance("toy", cfg))?;
    ds.noise = Some(noise);
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileShape {
    Exponential,
    Pareto,
    Step,
    Balanced,
}

fn default_pareto_power() -> f64 {
    6.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImbalanceProfile {
    pub classes: usize,
    pub shape: ProfileShape,
    pub base_count: usize,
    pub ratio_r: f64,
    #[serde(default = "default_pareto_power")]
    pub pareto_power: f64,
}

impl ImbalanceProfile {
    pub fn new(classes: usize, shape: ProfileShape, base_count: usize, ratio_r: f64) -> Self {
        ImbalanceProfile {
            classes,
            shape,
            base_count,
            ratio_r,
            pareto_power: default_pareto_power(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.base_count == 0 {
            return Err(Error::Config("profile needs at least one class and a positive base count".into()));
        }
        if !(self.ratio_r > 0.0 && self.ratio_r <= 1.0) {
            return Err(Error::Config(format!(
                "imbalance ratio r={} outside (0, 1]",
                self.ratio_r
            )));
        }
        if (self.base_count as f64 * self.ratio_r).round() < 1.0 {
            return Err(Error::Config(format!(
                "base_count*r = {} rounds to an empty rarest class",
                self.base_count as f64 * self.ratio_r
            )));
        }
        if !(self.pareto_power > 0.0) {
            return Err(Error::Config("pareto_power must be positive".into()));
        }
        Ok(())
    }
}

/// Per-class example counts, most frequent class first. Every class is
/// rounded to the nearest integer independently.
pub fn gen_longtail_counts(profile: &ImbalanceProfile) -> Result<Vec<usize>> {
    profile.validate()?;
    let c_total = profile.classes;
    let base = profile.base_count as f64;
    let r = profile.ratio_r;
    let last = (c_total.max(2) - 1) as f64;

    let fraction = |c: usize| -> f64 {
        if c_total == 1 {
            return 1.0;
        }
        let pos = c as f64;
        match profile.shape {
            ProfileShape::Balanced => 1.0,
            ProfileShape::Exponential => r.powf(pos / last),
            ProfileShape::Step => {
                if c < c_total.div_ceil(2) {
                    1.0
                } else {
                    r
                }
            }
            ProfileShape::Pareto => {
                // Lomax curve (1 + s*c)^{-a}, with s fixed so the last class
                // lands exactly on r.
                let a = profile.pareto_power;
                let s = (r.powf(-1.0 / a) - 1.0) / last;
                (1.0 + s * pos).powf(-a)
            }
        }
    };

    Ok((0..c_total)
        .map(|c| (base * fraction(c)).round() as usize)
        .collect())
}

/// Two-block vector analog of the half-image construction: frequent classes
/// carry their label in the left block and a label-independent draw from
/// the rare-class family in the right block; rare classes have a blank left
/// block and their label in the right block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemiSynthConfig {
    pub block_dim: usize,
    pub k_frequent: usize,
    pub k_rare: usize,
    pub n_frequent: usize,
    pub n_rare: usize,
    pub signal_scale: f64,
    pub noise_scale: f64,
    /// Seeds the class means; keep fixed to draw further samples from the
    /// same distribution.
    pub means_seed: u64,
    pub seed: u64,
}

impl SemiSynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_frequent + self.k_rare < 2 {
            return Err(Error::Config("semi-synthetic data needs at least two classes".into()));
        }
        if self.k_rare == 0 {
            return Err(Error::Config("semi-synthetic data needs at least one rare class".into()));
        }
        if self.block_dim == 0 {
            return Err(Error::Config("block_dim must be positive".into()));
        }
        if !(self.signal_scale > 0.0) || !(self.noise_scale >= 0.0) {
            return Err(Error::Config("signal_scale must be positive and noise_scale non-negative".into()));
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.k_frequent + self.k_rare
    }

    /// Unit class-mean directions, one row per class (frequent classes
    /// first), each of length `block_dim`.
    pub fn class_means(&self) -> Array2<f64> {
        unit_means(self.means_seed, self.class_count(), self.block_dim)
    }

    /// Same distribution, different per-class counts and sample seed.
    pub fn resample(&self, n_frequent: usize, n_rare: usize, seed: u64) -> Self {
        SemiSynthConfig {
            n_frequent,
            n_rare,
            seed,
            ..self.clone()
        }
    }
}

fn unit_means(seed: u64, classes: usize, dim: usize) -> Array2<f64> {
    let mut rng = seeded(seed);
    let mut means = Array2::<f64>::zeros((classes, dim));
    for c in 0..classes {
        let mut v = normal_vec(&mut rng, dim);
        let norm = v.dot(&v).sqrt();
        v.mapv_inplace(|x| x / norm);
        means.row_mut(c).assign(&v);
    }
    means
}

/// Draw order per row: (frequent only) a uniform rare-class index, then
/// `block_dim` left-block normals (frequent only), then `block_dim`
/// right-block normals.
pub fn gen_semisynthetic(cfg: &SemiSynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let b = cfg.block_dim;
    let means = cfg.class_means();
    let counts: Vec<usize> = (0..cfg.class_count())
        .map(|c| if c < cfg.k_frequent { cfg.n_frequent } else { cfg.n_rare })
        .collect();
    let n: usize = counts.iter().sum();
    let mut rng = seeded(cfg.seed);
    let mut inputs = Array2::<f64>::zeros((n, 2 * b));
    let mut labels = Vec::with_capacity(n);

    let mut row = 0;
    for (c, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let mut x = inputs.row_mut(row);
            if c < cfg.k_frequent {
                let rare = cfg.k_frequent + rng.random_range(0..cfg.k_rare);
                let left = normal_vec(&mut rng, b);
                let right = normal_vec(&mut rng, b);
                for j in 0..b {
                    x[j] = cfg.signal_scale * means[[c, j]] + cfg.noise_scale * left[j];
                    x[b + j] = cfg.signal_scale * means[[rare, j]] + cfg.noise_scale * right[j];
                }
            } else {
                let right = normal_vec(&mut rng, b);
                for j in 0..b {
                    x[b + j] = cfg.signal_scale * means[[c, j]] + cfg.noise_scale * right[j];
                }
            }
            labels.push(c);
            row += 1;
        }
    }
    Dataset::new(inputs, labels, cfg.class_count(), provenance("semi-synthetic", cfg))
}

/// Isotropic Gaussian clusters around random class means of norm
/// `signal_scale`, or `class_scales[c]` when given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    pub dim: usize,
    pub class_counts: Vec<usize>,
    pub signal_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_scales: Option<Vec<f64>>,
    pub noise_scale: f64,
    pub means_seed: u64,
    pub seed: u64,
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.class_counts.len() < 2 {
            return Err(Error::Config("mixture needs dim >= 1 and at least two classes".into()));
        }
        if !(self.signal_scale >= 0.0) || !(self.noise_scale >= 0.0) {
            return Err(Error::Config("mixture scales must be non-negative".into()));
        }
        if let Some(scales) = &self.class_scales {
            if scales.len() != self.class_counts.len() {
                return Err(Error::Config("class_scales needs one entry per class".into()));
            }
            if scales.iter().any(|s| !(*s >= 0.0)) {
                return Err(Error::Config("mixture scales must be non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn scale_of(&self, class: usize) -> f64 {
        match &self.class_scales {
            Some(scales) => scales[class],
            None => self.signal_scale,
        }
    }

    pub fn class_means(&self) -> Array2<f64> {
        let mut means = unit_means(self.means_seed, self.class_counts.len(), self.dim);
        for (c, mut row) in means.rows_mut().into_iter().enumerate() {
            row *= self.scale_of(c);
        }
        means
    }

    pub fn resample(&self, class_counts: Vec<usize>, seed: u64) -> Self {
        MixtureConfig {
            class_counts,
            seed,
            ..self.clone()
        }
    }
}

/// Step-imbalanced or long-tailed Gaussian mixture. Draw order: classes in
/// index order, `dim` normals per row.
pub fn gen_mixture(cfg: &MixtureConfig) -> Result<Dataset> {
    cfg.validate()?;
    let means = cfg.class_means();
    let n: usize = cfg.class_counts.iter().sum();
    let mut rng = seeded(cfg.seed);
    let mut inputs = Array2::<f64>::zeros((n, cfg.dim));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (c, &count) in cfg.class_counts.iter().enumerate() {
        for _ in 0..count {
            let z = normal_vec(&mut rng, cfg.dim);
            let x = &means.row(c) + &(z * cfg.noise_scale);
            inputs.row_mut(row).assign(&x);
            labels.push(c);
            row += 1;
        }
    }
    Dataset::new(inputs, labels, cfg.class_counts.len(), provenance("mixture", cfg))
}

fn provenance<T: Serialize>(kind: &str, cfg: &T) -> serde_json::Value {
    serde_json::json!({
        "generator": kind,
        "config": serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null),
    })
}
