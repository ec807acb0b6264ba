//! Linear probes on frozen features, the relative accuracy gap between
//! balanced and imbalanced pre-training, and per-class generalization gaps
//! of the pre-training loss.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::linalg::{top_eigenpairs, EigenOptions};
use crate::sam::ExampleLoss;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub max_steps: usize,
    pub grad_tol: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            max_steps: 5000,
            grad_tol: 1e-6,
            l2: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// `C x m` weights of the linear head.
    pub head: Array2<f64>,
    pub bias: Vec<f64>,
    pub top1_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub steps: usize,
}

fn is_balanced(ds: &Dataset) -> bool {
    let counts: Vec<usize> = ds.class_counts().into_iter().filter(|&c| c > 0).collect();
    counts.windows(2).all(|w| w[0] == w[1])
}

/// Multinomial logistic regression with bias, fit by full-batch gradient
/// descent from zero with the fixed step `1/L`, where `L` bounds the
/// curvature of the mean cross-entropy on the given features.
pub fn fit_softmax(
    feats: ArrayView2<f64>,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<(Array2<f64>, Array1<f64>, usize)> {
    let (n, m) = feats.dim();
    if n == 0 {
        return Err(Error::Empty("probe training set is empty".into()));
    }
    let mut aug = Array2::<f64>::ones((n, m + 1));
    aug.slice_mut(ndarray::s![.., ..m]).assign(&feats);
    let cov = aug.t().dot(&aug) / n as f64;
    let top = top_eigenpairs(cov.view(), 1, None, &EigenOptions::default())?;
    let lipschitz = 0.5 * top.values[0].max(0.0) + cfg.l2;
    let step = 1.0 / lipschitz.max(1e-12);

    let mut theta = Array2::<f64>::zeros((classes, m + 1));
    let mut onehot = Array2::<f64>::zeros((n, classes));
    for (i, &y) in labels.iter().enumerate() {
        onehot[[i, y]] = 1.0;
    }
    let mut steps = 0;
    for _ in 0..cfg.max_steps {
        let mut probs = aug.dot(&theta.t());
        softmax_rows(&mut probs);
        probs -= &onehot;
        let mut grad = probs.t().dot(&aug) / n as f64;
        if cfg.l2 > 0.0 {
            grad.scaled_add(cfg.l2, &theta);
        }
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm <= cfg.grad_tol {
            break;
        }
        theta.scaled_add(-step, &grad);
        steps += 1;
    }
    let head = theta.slice(ndarray::s![.., ..m]).to_owned();
    let bias = theta.column(m).to_owned();
    Ok((head, bias, steps))
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Predicted class per row; ties go to the lowest class index.
pub fn predict(head: &Array2<f64>, bias: &Array1<f64>, feats: ArrayView2<f64>) -> Vec<usize> {
    let logits = feats.dot(&head.t()) + bias;
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn accuracy(pred: &[usize], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (&p, &y) in pred.iter().zip(labels) {
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    let per_class = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { f64::NAN } else { h as f64 / t as f64 })
        .collect();
    (correct as f64 / labels.len().max(1) as f64, per_class)
}

fn probe_on(
    fm: &FeatureMap,
    train: &Dataset,
    test: &Dataset,
    train_labels: &[usize],
    test_labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let z_train = fm.apply(train.inputs.view())?;
    let z_test = fm.apply(test.inputs.view())?;
    let (head, bias, steps) = fit_softmax(z_train.view(), train_labels, classes, cfg)?;
    let pred = predict(&head, &bias, z_test.view());
    let (top1, per_class) = accuracy(&pred, test_labels, classes);
    Ok(ProbeResult {
        head,
        bias: bias.to_vec(),
        top1_accuracy: top1,
        per_class_accuracy: per_class,
        steps,
    })
}

/// Fits a `C`-way head on `fm(train)` and reports accuracy on `fm(test)`.
pub fn train_probe(fm: &FeatureMap, train: &Dataset, test: &Dataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if train.class_count != test.class_count {
        return Err(Error::Dimension("train and test class counts differ".into()));
    }
    if !is_balanced(train) {
        log::warn!("linear probe trained on an imbalanced set: {:?}", train.class_counts());
    }
    probe_on(fm, train, test, &train.labels, &test.labels, train.class_count, cfg)
}

/// Probe restricted to the classes present in `rare_train`, relabelled
/// `0..k` in ascending class order. Test rows of other classes are
/// rejected.
pub fn rare_class_probe(
    fm: &FeatureMap,
    rare_train: &Dataset,
    rare_test: &Dataset,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let present: Vec<usize> = rare_train
        .class_counts()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(k, _)| k)
        .collect();
    if present.len() < 2 {
        return Err(Error::Config("rare probe needs at least two classes".into()));
    }
    let remap = |labels: &[usize]| -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| {
                present
                    .iter()
                    .position(|p| p == l)
                    .ok_or_else(|| Error::Config(format!("class {l} absent from the rare training set")))
            })
            .collect()
    };
    let train_labels = remap(&rare_train.labels)?;
    let test_labels = remap(&rare_test.labels)?;
    if !is_balanced(rare_train) {
        log::warn!("rare probe trained on an imbalanced set");
    }
    probe_on(fm, rare_train, rare_test, &train_labels, &test_labels, present.len(), cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub a_balanced: f64,
    pub a_imbalanced: f64,
    pub delta: f64,
    pub n: usize,
    pub r: f64,
}

/// `(a_bal - a_imb) / a_bal`.
pub fn relative_gap(a_balanced: f64, a_imbalanced: f64, n: usize, r: f64) -> Result<GapReport> {
    if a_balanced == 0.0 {
        return Err(Error::Config("balanced accuracy is zero".into()));
    }
    Ok(GapReport {
        a_balanced,
        a_imbalanced,
        delta: (a_balanced - a_imbalanced) / a_balanced,
        n,
        r,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGroups {
    pub frequent: Vec<usize>,
    pub rare: Vec<usize>,
}

impl ClassGroups {
    /// Classes with at least the median class count are frequent.
    pub fn by_median(counts: &[usize]) -> Self {
        let mut sorted = counts.to_vec();
        sorted.sort_unstable();
        let k = sorted.len();
        let median = if k % 2 == 1 {
            sorted[k / 2] as f64
        } else {
            0.5 * (sorted[k / 2 - 1] + sorted[k / 2]) as f64
        };
        let (frequent, rare) = (0..counts.len()).partition(|&c| counts[c] as f64 >= median);
        ClassGroups { frequent, rare }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenGapReport {
    pub per_class_train: Vec<f64>,
    pub per_class_val: Vec<f64>,
    pub per_class_gap: Vec<f64>,
    pub groups: ClassGroups,
    pub frequent_gap: f64,
    pub rare_gap: f64,
}

pub const GAP_DRAWS: usize = 64;

/// Mean per-example loss of each class (`NaN` for absent classes).
pub fn per_class_mean_losses(
    loss: &dyn ExampleLoss,
    params: &[f64],
    ds: &Dataset,
    draws: usize,
    seed: u64,
) -> Vec<f64> {
    let losses = loss.example_losses(params, ds.inputs.view(), draws, seed);
    let mut sums = vec![0.0; ds.class_count];
    let mut counts = vec![0usize; ds.class_count];
    for (&l, &y) in losses.iter().zip(&ds.labels) {
        sums[y] += l;
        counts[y] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect()
}

fn group_mean(values: &[f64], members: &[usize]) -> f64 {
    members.iter().map(|&c| values[c]).sum::<f64>() / members.len() as f64
}

/// Held-out minus training loss per class, with perturbations averaged
/// over [`GAP_DRAWS`] draws, and their means over the frequent and rare
/// groups. Groups default to the median-count split of `train`.
pub fn generalization_gap(
    loss: &dyn ExampleLoss,
    params: &[f64],
    train: &Dataset,
    heldout: &Dataset,
    groups: Option<ClassGroups>,
    seed: u64,
) -> Result<GenGapReport> {
    if train.class_count != heldout.class_count {
        return Err(Error::Dimension("train and held-out class counts differ".into()));
    }
    let groups = groups.unwrap_or_else(|| ClassGroups::by_median(&train.class_counts()));
    if groups.frequent.is_empty() || groups.rare.is_empty() {
        return Err(Error::Empty("frequent or rare class group is empty".into()));
    }
    let per_class_train = per_class_mean_losses(loss, params, train, GAP_DRAWS, seed);
    let per_class_val = per_class_mean_losses(loss, params, heldout, GAP_DRAWS, seed ^ 0x5A5A_5A5A);
    let per_class_gap: Vec<f64> = per_class_val
        .iter()
        .zip(&per_class_train)
        .map(|(v, t)| v - t)
        .collect();
    for &c in groups.frequent.iter().chain(&groups.rare) {
        if per_class_gap.get(c).is_none_or(|g| g.is_nan()) {
            return Err(Error::Empty(format!("class {c} has no train or held-out examples")));
        }
    }
    Ok(GenGapReport {
        frequent_gap: group_mean(&per_class_gap, &groups.frequent),
        rare_gap: group_mean(&per_class_gap, &groups.rare),
        per_class_train,
        per_class_val,
        per_class_gap,
        groups,
    })
}

/// Mean of each column over rows, convenience for reporting.
pub fn mean_rows(x: ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()))
}
