//! Empirical checks of the toy-model analysis: Gaussian concentration of
//! the noise vectors, the hand-built classifier, the spectrum of the data
//! matrix, and how supervised leakage and self-supervised capture of the
//! rare direction `e2` scale with `d`.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{gen_toy, Dataset, ToyConfig};
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMap};
use crate::linalg::{orthonormal_rows, top_eigenpairs, EigenOptions};
use crate::maxmargin::{check_margins, solve_maxmargin_qp, QpOptions};
use crate::rng::seeded;
use crate::spectral::{empirical_second_moment, solve_spectral, SecondMoment};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    /// Worst observed value of the checked quantity.
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
    /// Row (or row pair) attaining `measured`.
    pub worst: Option<(usize, usize)>,
}

impl Condition {
    fn at_most(name: &str, measured: f64, bound: f64, worst: Option<(usize, usize)>) -> Self {
        Condition {
            name: name.into(),
            measured,
            bound,
            pass: measured <= bound,
            worst,
        }
    }

    fn at_least(name: &str, measured: f64, bound: f64) -> Self {
        Condition {
            name: name.into(),
            measured,
            bound,
            pass: measured >= bound,
            worst: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheck {
    pub name: String,
    pub conditions: Vec<Condition>,
}

impl LemmaCheck {
    pub fn passed(&self) -> bool {
        self.conditions.iter().all(|c| c.pass)
    }

    pub fn condition(&self, name: &str) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

fn worst_abs(values: impl Iterator<Item = f64>) -> (f64, usize) {
    values
        .enumerate()
        .fold((0.0, 0), |(m, k), (i, v)| if v.abs() > m { (v.abs(), i) } else { (m, k) })
}

/// Checks, over the rows `xi_i` of an `n x d` noise matrix:
/// `|<xi_i, e1>| <= d^{1/10}`, `|<xi_i, e2>| <= d^{1/10}`,
/// `| ||xi_i||^2 - d | <= 4 d^{3/4}` and `|<xi_i, xi_j>| <= 3 d^{3/5}` for
/// `i != j`.
pub fn verify_gaussian_properties(xi: &Array2<f64>) -> LemmaCheck {
    let (n, d) = xi.dim();
    let df = d as f64;
    let coord_bound = df.powf(0.1);
    let (e1, e1_row) = worst_abs(xi.column(0).iter().copied());
    let (e2, e2_row) = if d > 1 {
        worst_abs(xi.column(1).iter().copied())
    } else {
        (0.0, 0)
    };
    let (norm_dev, norm_row) = worst_abs(
        xi.rows()
            .into_iter()
            .map(|r| r.dot(&r) - df),
    );
    let gram = xi.dot(&xi.t());
    let mut pair = (0.0f64, None);
    for i in 0..n {
        for j in i + 1..n {
            let v = gram[[i, j]].abs();
            if v > pair.0 {
                pair = (v, Some((i, j)));
            }
        }
    }
    let rows = |r: usize| if n == 0 { None } else { Some((r, r)) };
    LemmaCheck {
        name: "gaussian-properties".into(),
        conditions: vec![
            Condition::at_most("e1-coordinate", e1, coord_bound, rows(e1_row)),
            Condition::at_most("e2-coordinate", e2, coord_bound, rows(e2_row)),
            Condition::at_most("squared-norm", norm_dev, 4.0 * df.powf(0.75), rows(norm_row)),
            Condition::at_most("pairwise-inner", pair.0, 3.0 * df.powf(0.6), pair.1),
        ],
    }
}

/// The hand-built classifier `w1 = e1`, `w2 = -e1`,
/// `w3 = (1/(rho d)) sum_{i in class 3} xi_i`.
pub fn constructed_classifier(ds: &Dataset, cfg: &ToyConfig) -> Result<FeatureMap> {
    let noise = ds
        .noise
        .as_ref()
        .ok_or_else(|| Error::Config("dataset lacks retained noise vectors".into()))?;
    if ds.class_count != 3 || ds.dim() != cfg.d {
        return Err(Error::Dimension("dataset does not match the toy config".into()));
    }
    let d = cfg.d;
    let mut w = Array2::<f64>::zeros((3, d));
    w[[0, 0]] = 1.0;
    w[[1, 0]] = -1.0;
    if !cfg.zero_noise {
        let mut sum = Array1::<f64>::zeros(d);
        for i in ds.indices_of(2) {
            sum += &noise.row(i);
        }
        w.row_mut(2).assign(&(sum / (cfg.rho_noise * d as f64)));
    }
    FeatureMap::new(w, FeatureKind::Supervised)
}

/// Margin and norm of the constructed classifier against
/// `1 - c_m d^{-1/10}` and `2 d^{-1/10}`.
pub fn constructed_classifier_check(ds: &Dataset, cfg: &ToyConfig, c_m: f64) -> Result<LemmaCheck> {
    let fm = constructed_classifier(ds, cfg)?;
    let margin = check_margins(&fm, ds)?;
    let w3 = fm.weights.row(2);
    let norm = w3.dot(&w3).sqrt();
    let rate = (cfg.d as f64).powf(-0.1);
    Ok(LemmaCheck {
        name: "constructed-classifier".into(),
        conditions: vec![
            Condition::at_least("min-margin", margin, 1.0 - c_m * rate),
            Condition::at_most("w3-norm", norm, 2.0 * rate, None),
        ],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataMatrixBounds {
    /// Lower bound on `e2^T M e2`, typically `tau^2 / 9`.
    pub e2_lower: f64,
    /// Upper bound on `u^T M u` for unit `u` orthogonal to `e2`.
    pub orthogonal_upper: f64,
}

impl DataMatrixBounds {
    pub fn for_toy(cfg: &ToyConfig, orthogonal_upper: f64) -> Self {
        DataMatrixBounds {
            e2_lower: cfg.tau * cfg.tau / 9.0,
            orthogonal_upper,
        }
    }
}

/// `e2^T M e2`, the largest `u^T M u` over `samples_u` random unit `u`
/// orthogonal to `e2`, and the exact maximum over that complement (the top
/// eigenvalue with `e2` deflated).
pub fn data_matrix_check(
    moment: &SecondMoment,
    samples_u: usize,
    bounds: &DataMatrixBounds,
    seed: u64,
) -> Result<LemmaCheck> {
    let m = &moment.matrix;
    let d = moment.dim();
    if d < 2 {
        return Err(Error::Dimension("second moment needs d >= 2".into()));
    }
    let e2_value = m[[1, 1]];

    let mut rng = seeded(seed);
    let mut sampled: f64 = f64::NEG_INFINITY;
    for _ in 0..samples_u {
        let mut u = Array1::from_iter((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        u[1] = 0.0;
        let norm = u.dot(&u).sqrt();
        if norm == 0.0 {
            continue;
        }
        u /= norm;
        sampled = sampled.max(u.dot(&m.dot(&u)));
    }

    let mut e2 = Array2::<f64>::zeros((1, d));
    e2[[0, 1]] = 1.0;
    let opts = EigenOptions {
        seed,
        ..EigenOptions::default()
    };
    let exact = top_eigenpairs(m.view(), 1, Some(e2.view()), &opts)?.values[0];

    let mut conditions = vec![Condition::at_least("e2-quadratic-form", e2_value, bounds.e2_lower)];
    if samples_u > 0 {
        conditions.push(Condition::at_most(
            "sampled-orthogonal-max",
            sampled,
            bounds.orthogonal_upper,
            None,
        ));
    }
    conditions.push(Condition::at_most("orthogonal-max", exact, bounds.orthogonal_upper, None));
    Ok(LemmaCheck {
        name: "data-matrix".into(),
        conditions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    /// `max_i |<e2, w_i>|` over the supervised rows.
    pub sl_leakage: f64,
    /// Norm of the projection of `e2` onto the span of the SSL rows.
    pub ssl_capture: f64,
    pub d: usize,
    pub seed: Option<u64>,
}

pub fn feature_geometry(w_sl: &FeatureMap, w_ssl: &FeatureMap) -> Result<GeometryReport> {
    let d = w_sl.input_dim();
    if w_ssl.input_dim() != d || d < 2 {
        return Err(Error::Dimension("feature maps must share an input dimension >= 2".into()));
    }
    let sl_leakage = w_sl
        .weights
        .column(1)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let basis = orthonormal_rows(w_ssl.weights.view(), 1e-12);
    let coeffs = basis.column(1);
    let ssl_capture = coeffs.dot(&coeffs).sqrt();
    Ok(GeometryReport {
        sl_leakage,
        ssl_capture,
        d,
        seed: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepTemplate {
    /// `n1 = n2`; `n3` follows `ceil(d^{1/5})`.
    pub n_frequent: usize,
    pub ssl_rank: usize,
    pub qp: QpOptions,
    pub eigen: EigenOptions,
}

impl Default for SweepTemplate {
    fn default() -> Self {
        SweepTemplate {
            n_frequent: 2000,
            ssl_rank: 2,
            qp: QpOptions::default(),
            eigen: EigenOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub d: usize,
    pub seed: u64,
    pub report: Option<GeometryReport>,
    pub qp_converged: Option<bool>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub d: usize,
    pub cells: usize,
    pub median_leakage: f64,
    pub median_capture: f64,
    pub median_capture_deficit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub summaries: Vec<SweepSummary>,
    /// Least-squares slope of `log(median leakage)` against `log d`;
    /// `None` with fewer than two grid points or a non-positive median.
    pub leakage_slope: Option<f64>,
    pub capture_deficit_slope: Option<f64>,
}

/// Leakage and capture for one toy draw: the min-norm max-margin map
/// against the spectral map of the same data.
pub fn geometry_cell(d: usize, seed: u64, template: &SweepTemplate) -> Result<(GeometryReport, bool)> {
    let cfg = ToyConfig::theorem_setting(d, template.n_frequent, seed);
    let ds = gen_toy(&cfg)?;
    let qp = solve_maxmargin_qp(&ds, &template.qp)?;
    let moment = empirical_second_moment(&ds)?;
    let (ssl, _) = solve_spectral(&moment, template.ssl_rank, &template.eigen)?;
    let mut report = feature_geometry(&qp.feature_map, &ssl)?;
    report.seed = Some(seed);
    Ok((report, qp.converged))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 || x.len() != y.len() || y.iter().chain(x).any(|&v| !(v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

/// Runs every `(d, seed)` cell in parallel. Cell failures are recorded,
/// not propagated.
pub fn scaling_sweep(d_grid: &[usize], seeds: &[u64], template: &SweepTemplate) -> Result<SweepResult> {
    if d_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("d grid must be strictly ascending".into()));
    }
    if let Some(&d) = d_grid.iter().find(|&&d| d < 64) {
        return Err(Error::Config(format!("d={d} is below the minimum of 64")));
    }
    let jobs: Vec<(usize, u64)> = d_grid
        .iter()
        .flat_map(|&d| seeds.iter().map(move |&s| (d, s)))
        .collect();
    let cells: Vec<SweepCell> = jobs
        .par_iter()
        .map(|&(d, seed)| match geometry_cell(d, seed, template) {
            Ok((report, converged)) => SweepCell {
                d,
                seed,
                report: Some(report),
                qp_converged: Some(converged),
                error: None,
            },
            Err(e) => {
                log::warn!("sweep cell d={d} seed={seed} failed: {e}");
                SweepCell {
                    d,
                    seed,
                    report: None,
                    qp_converged: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();

    let summaries: Vec<SweepSummary> = d_grid
        .iter()
        .map(|&d| {
            let reports: Vec<&GeometryReport> = cells
                .iter()
                .filter(|c| c.d == d)
                .filter_map(|c| c.report.as_ref())
                .collect();
            let leak: Vec<f64> = reports.iter().map(|r| r.sl_leakage).collect();
            let cap: Vec<f64> = reports.iter().map(|r| r.ssl_capture).collect();
            let deficit: Vec<f64> = cap.iter().map(|c| 1.0 - c).collect();
            SweepSummary {
                d,
                cells: reports.len(),
                median_leakage: median(&leak),
                median_capture: median(&cap),
                median_capture_deficit: median(&deficit),
            }
        })
        .collect();
    let ds: Vec<f64> = summaries.iter().map(|s| s.d as f64).collect();
    let leak: Vec<f64> = summaries.iter().map(|s| s.median_leakage).collect();
    let deficit: Vec<f64> = summaries.iter().map(|s| s.median_capture_deficit).collect();
    Ok(SweepResult {
        leakage_slope: log_log_slope(&ds, &leak),
        capture_deficit_slope: log_log_slope(&ds, &deficit),
        cells,
        summaries,
    })
}

/// Mean over rows of a matrix's squared row norms.
pub fn mean_squared_norm(x: &Array2<f64>) -> f64 {
    x.map_axis(Axis(1), |r| r.dot(&r)).mean().unwrap_or(0.0)
}
