//! Minimum-norm multiclass max-margin classifier:
//!
//! ```text
//! minimize   sum_y ||w_y||^2
//! subject to w_y^T x - w_c^T x >= 1   for every sample (x, y) and c != y
//! ```
//!
//! Solved by dual coordinate ascent over one non-negative multiplier per
//! constraint. Constraints are visited row-major (sample, then competing
//! class in ascending order), which makes the iterate path reproducible.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QpOptions {
    pub margin_tol: f64,
    pub kkt_tol: f64,
    pub max_sweeps: usize,
    /// Declare infeasibility once the scale-optimized dual value exceeds
    /// this bound.
    pub infeasibility_bound: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            margin_tol: 1e-4,
            kkt_tol: 1e-6,
            max_sweeps: 1_000_000,
            infeasibility_bound: 1e8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub feature_map: FeatureMap,
    /// `sum_y ||w_y||^2`.
    pub objective: f64,
    pub min_margin: f64,
    /// `max_k alpha_k * |margin_k - 1|`.
    pub kkt_residual: f64,
    /// Sweeps for the coordinate-ascent solver, candidate subsets for the
    /// exhaustive oracle.
    pub iterations: usize,
    pub converged: bool,
}

fn check_problem(ds: &Dataset) -> Result<()> {
    ds.validate()?;
    if ds.class_count < 2 {
        return Err(Error::Config("max-margin needs at least two classes".into()));
    }
    if ds.n() == 0 {
        return Err(Error::Empty("max-margin on an empty dataset".into()));
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociating
    // a single running sum.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Smallest `w_y^T x - w_c^T x` over every sample and competing class.
pub fn check_margins(fm: &FeatureMap, ds: &Dataset) -> Result<f64> {
    if fm.rows() != ds.class_count {
        return Err(Error::Dimension(format!(
            "feature map has {} rows for {} classes",
            fm.rows(),
            ds.class_count
        )));
    }
    let scores = fm.apply(ds.inputs.view())?;
    let mut min = f64::INFINITY;
    for (i, &y) in ds.labels.iter().enumerate() {
        for c in 0..ds.class_count {
            if c != y {
                min = min.min(scores[[i, y]] - scores[[i, c]]);
            }
        }
    }
    Ok(min)
}

struct Stats {
    min_margin: f64,
    kkt_residual: f64,
}

fn exact_stats(w: &[f64], alpha: &[f64], ds: &Dataset) -> Stats {
    let d = ds.dim();
    let classes = ds.class_count;
    let mut min_margin = f64::INFINITY;
    let mut kkt: f64 = 0.0;
    let mut scores = vec![0.0; classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        let x = ds.inputs.row(i);
        let x = x.as_slice().expect("standard layout");
        for (c, s) in scores.iter_mut().enumerate() {
            *s = dot(&w[c * d..(c + 1) * d], x);
        }
        let mut slot = 0;
        for c in 0..classes {
            if c == y {
                continue;
            }
            let m = scores[y] - scores[c];
            min_margin = min_margin.min(m);
            kkt = kkt.max(alpha[i * (classes - 1) + slot] * (m - 1.0).abs());
            slot += 1;
        }
    }
    Stats {
        min_margin,
        kkt_residual: kkt,
    }
}

fn to_solution(w: Vec<f64>, classes: usize, d: usize, stats: Stats, iterations: usize, converged: bool) -> Result<QpSolution> {
    let objective = w.iter().map(|v| v * v).sum();
    let weights = Array2::from_shape_vec((classes, d), w).expect("shape");
    Ok(QpSolution {
        feature_map: FeatureMap::new(weights, FeatureKind::Supervised)?,
        objective,
        min_margin: stats.min_margin,
        kkt_residual: stats.kkt_residual,
        iterations,
        converged,
    })
}

/// Dual coordinate ascent. Stops once a verification pass finds every
/// margin `>= 1 - margin_tol` and complementary slackness within
/// `kkt_tol`; returns `converged = false` if the sweep cap is reached
/// first.
pub fn solve_maxmargin_qp(ds: &Dataset, opts: &QpOptions) -> Result<QpSolution> {
    check_problem(ds)?;
    let n = ds.n();
    let d = ds.dim();
    let classes = ds.class_count;
    let inputs = ds.inputs.as_standard_layout();
    let sq: Vec<f64> = inputs.rows().into_iter().map(|r| r.dot(&r)).collect();
    if sq.contains(&0.0) {
        // 0 >= 1 can never hold.
        return Err(Error::Infeasible {
            dual_bound: f64::INFINITY,
            sweeps: 0,
        });
    }

    let mut w = vec![0.0; classes * d];
    let mut alpha = vec![0.0; n * (classes - 1)];
    let mut scores = vec![0.0; classes];
    let mut threshold = 0.1 * opts.margin_tol;
    let mut last_stats = Stats {
        min_margin: 0.0,
        kkt_residual: f64::INFINITY,
    };

    for sweep in 1..=opts.max_sweeps {
        let mut max_violation: f64 = 0.0;
        for i in 0..n {
            let y = ds.labels[i];
            let x = inputs.row(i);
            let x = x.as_slice().expect("standard layout");
            for (c, s) in scores.iter_mut().enumerate() {
                *s = dot(&w[c * d..(c + 1) * d], x);
            }
            let two_sq = 2.0 * sq[i];
            let mut slot = 0;
            for c in 0..classes {
                if c == y {
                    continue;
                }
                let k = i * (classes - 1) + slot;
                slot += 1;
                let g = 1.0 - (scores[y] - scores[c]);
                let a = alpha[k];
                let violation = if a > 0.0 { g.abs() } else { g.max(0.0) };
                max_violation = max_violation.max(violation);
                let delta = (g / two_sq).max(-a);
                if delta != 0.0 {
                    alpha[k] = a + delta;
                    let (lo, hi) = (y.min(c), y.max(c));
                    let (head, tail) = w.split_at_mut(hi * d);
                    let w_lo = &mut head[lo * d..(lo + 1) * d];
                    let w_hi = &mut tail[..d];
                    let (w_y, w_c) = if y < c { (w_lo, w_hi) } else { (w_hi, w_lo) };
                    axpy(delta, x, w_y);
                    axpy(-delta, x, w_c);
                    scores[y] += delta * sq[i];
                    scores[c] -= delta * sq[i];
                }
            }
        }

        let alpha_sum: f64 = alpha.iter().sum();
        let w_sq: f64 = w.iter().map(|v| v * v).sum();
        // max_s  s*sum(alpha) - s^2 ||W||^2 / 2 : a valid lower bound on
        // the optimum of min ||W||^2 / 2, unbounded iff infeasible.
        let dual_bound = if w_sq > 0.0 {
            alpha_sum * alpha_sum / (2.0 * w_sq)
        } else if alpha_sum > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        if dual_bound > opts.infeasibility_bound {
            return Err(Error::Infeasible {
                dual_bound,
                sweeps: sweep,
            });
        }

        if max_violation <= threshold {
            let stats = exact_stats(&w, &alpha, ds);
            if stats.min_margin >= 1.0 - opts.margin_tol && stats.kkt_residual <= opts.kkt_tol {
                return to_solution(w, classes, d, stats, sweep, true);
            }
            threshold = (threshold * 0.1).max(1e-15);
            last_stats = stats;
        }
    }
    let stats = exact_stats(&w, &alpha, ds);
    log::warn!(
        "max-margin solver hit the sweep cap ({}); min margin {:.3e}, previous kkt {:.3e}",
        opts.max_sweeps,
        stats.min_margin,
        last_stats.kkt_residual
    );
    to_solution(w, classes, d, stats, opts.max_sweeps, false)
}

pub const BRUTE_FORCE_LIMIT: usize = 20;

/// Exhaustive oracle: for every linearly independent subset of
/// constraints, solve the equality-constrained least-norm system and keep
/// the lowest-objective candidate that satisfies all constraints.
pub fn brute_force_maxmargin(ds: &Dataset) -> Result<QpSolution> {
    check_problem(ds)?;
    let classes = ds.class_count;
    let d = ds.dim();
    // (sample, true class, competing class)
    let constraints: Vec<(usize, usize, usize)> = ds
        .labels
        .iter()
        .enumerate()
        .flat_map(|(i, &y)| (0..classes).filter(move |&c| c != y).map(move |c| (i, y, c)))
        .collect();
    let k_total = constraints.len();
    if k_total > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            constraints: k_total,
            limit: BRUTE_FORCE_LIMIT,
        });
    }

    let gram_x = ds.inputs.dot(&ds.inputs.t());
    let class_ip = |a: (usize, usize), b: (usize, usize)| -> f64 {
        let e = |p: usize, q: usize| if p == q { 1.0 } else { 0.0 };
        e(a.0, b.0) - e(a.0, b.1) - e(a.1, b.0) + e(a.1, b.1)
    };
    let mut gram = Array2::<f64>::zeros((k_total, k_total));
    for (p, &(i, yi, ci)) in constraints.iter().enumerate() {
        for (q, &(j, yj, cj)) in constraints.iter().enumerate() {
            gram[[p, q]] = class_ip((yi, ci), (yj, cj)) * gram_x[[i, j]];
        }
    }
    let max_diag = (0..k_total).map(|k| gram[[k, k]]).fold(0.0, f64::max);

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut evaluated = 0;
    for mask in 1u32..(1u32 << k_total) {
        let subset: Vec<usize> = (0..k_total).filter(|&k| mask & (1 << k) != 0).collect();
        let s = subset.len();
        let mut g = vec![0.0; s * s];
        for (a, &p) in subset.iter().enumerate() {
            for (b, &q) in subset.iter().enumerate() {
                g[a * s + b] = gram[[p, q]];
            }
        }
        let Some(lambda) = cholesky_solve_ones(&mut g, s, 1e-10 * max_diag.max(1e-300)) else {
            continue;
        };
        evaluated += 1;
        let mut full = vec![0.0; k_total];
        for (a, &p) in subset.iter().enumerate() {
            full[p] = lambda[a];
        }
        let feasible = (0..k_total).all(|q| {
            let m: f64 = subset.iter().zip(&lambda).map(|(&p, l)| l * gram[[p, q]]).sum();
            m >= 1.0 - 1e-9
        });
        if !feasible {
            continue;
        }
        // ||W||^2 = lambda^T G lambda = sum(lambda) since G lambda = 1.
        let objective: f64 = lambda.iter().sum();
        if best.as_ref().is_none_or(|(o, _)| objective < *o) {
            best = Some((objective, full));
        }
    }

    let Some((_, alpha)) = best else {
        return Err(Error::Infeasible {
            dual_bound: f64::INFINITY,
            sweeps: evaluated,
        });
    };
    let mut w = vec![0.0; classes * d];
    for (&(i, y, c), &a) in constraints.iter().zip(&alpha) {
        if a != 0.0 {
            let x = ds.inputs.row(i);
            for j in 0..d {
                w[y * d + j] += a * x[j];
                w[c * d + j] -= a * x[j];
            }
        }
    }
    let stats = exact_stats(&w, &alpha, ds);
    to_solution(w, classes, d, stats, evaluated, true)
}

/// Solves `G x = 1` for symmetric positive definite `G` (row-major,
/// overwritten with its Cholesky factor). `None` if a pivot falls below
/// `pivot_tol`.
fn cholesky_solve_ones(g: &mut [f64], s: usize, pivot_tol: f64) -> Option<Vec<f64>> {
    for j in 0..s {
        let mut diag = g[j * s + j];
        for k in 0..j {
            diag -= g[j * s + k] * g[j * s + k];
        }
        if diag <= pivot_tol {
            return None;
        }
        let l_jj = diag.sqrt();
        g[j * s + j] = l_jj;
        for i in j + 1..s {
            let mut v = g[i * s + j];
            for k in 0..j {
                v -= g[i * s + k] * g[j * s + k];
            }
            g[i * s + j] = v / l_jj;
        }
    }
    let mut z = vec![1.0; s];
    for i in 0..s {
        for k in 0..i {
            z[i] -= g[i * s + k] * z[k];
        }
        z[i] /= g[i * s + i];
    }
    for i in (0..s).rev() {
        for k in i + 1..s {
            z[i] -= g[k * s + i] * z[k];
        }
        z[i] /= g[i * s + i];
    }
    Some(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_point() -> Dataset {
        Dataset::new(array![[1.0], [-1.0]], vec![0, 1], 2, serde_json::Value::Null).unwrap()
    }

    #[test]
    fn symmetric_two_point_closed_form() {
        let ds = two_point();
        let sol = solve_maxmargin_qp(&ds, &QpOptions::default()).unwrap();
        assert!(sol.converged);
        let w = &sol.feature_map.weights;
        assert!((w[[0, 0]] - 0.5).abs() < 1e-9);
        assert!((w[[1, 0]] + 0.5).abs() < 1e-9);
        assert!((sol.objective - 0.5).abs() < 1e-9);
        assert!((check_margins(&sol.feature_map, &ds).unwrap() - 1.0).abs() < 1e-9);

        let oracle = brute_force_maxmargin(&ds).unwrap();
        assert!((oracle.objective - 0.5).abs() < 1e-12);
        assert!((&oracle.feature_map.weights - w).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn zero_map_has_zero_margin() {
        let ds = two_point();
        let fm = FeatureMap::new(Array2::zeros((2, 1)), FeatureKind::Supervised).unwrap();
        assert_eq!(check_margins(&fm, &ds).unwrap(), 0.0);
        let wrong = FeatureMap::new(Array2::zeros((3, 1)), FeatureKind::Supervised).unwrap();
        assert!(matches!(check_margins(&wrong, &ds), Err(Error::Dimension(_))));
    }

    #[test]
    fn contradictory_labels_are_infeasible() {
        let ds = Dataset::new(array![[1.0, 2.0], [1.0, 2.0]], vec![0, 1], 2, serde_json::Value::Null)
            .unwrap();
        assert!(matches!(brute_force_maxmargin(&ds), Err(Error::Infeasible { .. })));
        assert!(matches!(
            solve_maxmargin_qp(&ds, &QpOptions::default()),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn oracle_refuses_large_instances() {
        let ds = Dataset::new(Array2::ones((11, 2)), vec![0; 11], 3, serde_json::Value::Null).unwrap();
        assert!(matches!(brute_force_maxmargin(&ds), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn single_class_is_rejected() {
        let ds = Dataset::new(array![[1.0]], vec![0], 1, serde_json::Value::Null).unwrap();
        assert!(matches!(solve_maxmargin_qp(&ds, &QpOptions::default()), Err(Error::Config(_))));
    }
}
