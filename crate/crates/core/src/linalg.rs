//! Dense helpers: a top-k symmetric eigensolver built on power iteration
//! with projection deflation, plus Gram-Schmidt utilities.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EigenOptions {
    /// Converged when `||P M v - lambda v|| <= tol * scale`, where `scale`
    /// is the magnitude of the leading eigenvalue.
    pub tol: f64,
    pub max_iter: usize,
    /// Iteration budget for the trailing eigenvalue used in eigengap
    /// reports; that estimate is a Rayleigh-quotient lower bound.
    pub trailing_budget: usize,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions {
            tol: 1e-10,
            max_iter: 100_000,
            trailing_budget: 300,
            seed: 0x5EED_E16E,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EigenPairs {
    /// Descending.
    pub values: Vec<f64>,
    /// One eigenvector per row, orthonormal.
    pub vectors: Array2<f64>,
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
}

fn project_out(v: &mut Array1<f64>, basis: &[Array1<f64>]) {
    // Two passes of modified Gram-Schmidt keep v orthogonal to the basis
    // to working precision.
    for _ in 0..2 {
        for b in basis {
            let c = v.dot(b);
            v.scaled_add(-c, b);
        }
    }
}

fn normalize(v: &mut Array1<f64>) -> f64 {
    let norm = v.dot(v).sqrt();
    if norm > 0.0 {
        v.mapv_inplace(|x| x / norm);
    }
    norm
}

struct Converged {
    value: f64,
    vector: Array1<f64>,
    residual: f64,
    iterations: usize,
    ok: bool,
}

/// Power iteration on `M` restricted to the orthogonal complement of
/// `basis`. A negative dominant eigenvalue triggers a restart on
/// `M + |lambda| I`, so the result is always the largest algebraic
/// eigenvalue of the deflated operator.
fn dominant(
    m: ArrayView2<f64>,
    basis: &[Array1<f64>],
    start: Array1<f64>,
    scale_hint: Option<f64>,
    tol: f64,
    max_iter: usize,
    value_only: bool,
) -> Converged {
    let d = m.nrows();
    let mut shift = 0.0;
    let mut v = start;
    project_out(&mut v, basis);
    if normalize(&mut v) == 0.0 {
        // Start vector lies in the span of the basis; fall back to the
        // first canonical vector that does not.
        for j in 0..d {
            let mut e = Array1::zeros(d);
            e[j] = 1.0;
            project_out(&mut e, basis);
            if normalize(&mut e) > 1e-8 {
                v = e;
                break;
            }
        }
    }

    let restart = v.clone();
    let mut iterations = 0;
    let mut last_value = f64::NAN;
    let mut residual = f64::INFINITY;
    let mut value = 0.0;
    while iterations < max_iter {
        iterations += 1;
        let mut mv = m.dot(&v);
        project_out(&mut mv, basis);
        value = v.dot(&mv);
        let scale = scale_hint.unwrap_or(value.abs()).max(f64::MIN_POSITIVE);
        let mut r = mv.clone();
        r.scaled_add(-value, &v);
        residual = r.dot(&r).sqrt() / scale;
        let mv_norm = mv.dot(&mv).sqrt();
        if mv_norm == 0.0 {
            return Converged {
                value: 0.0,
                vector: v,
                residual: 0.0,
                iterations,
                ok: true,
            };
        }
        if residual <= tol
            || (value_only && (value - last_value).abs() <= 1e-13 * scale)
        {
            if value < 0.0 && shift == 0.0 && !value_only {
                // Converged to the most negative eigenvalue; shift so the
                // spectrum is non-negative and iterate again.
                shift = -value;
                last_value = f64::NAN;
                v = restart.clone();
                continue;
            }
            return Converged {
                value,
                vector: v,
                residual,
                iterations,
                ok: true,
            };
        }
        last_value = value;
        mv.scaled_add(shift, &v);
        v = mv;
        project_out(&mut v, basis);
        normalize(&mut v);
    }
    Converged {
        value,
        vector: v,
        residual,
        iterations,
        ok: value_only,
    }
}

fn start_vector(d: usize, seed: u64, index: usize) -> Array1<f64> {
    let mut rng = seeded(seed.wrapping_add(index as u64));
    Array1::from_iter((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Top-`k` eigenpairs of the symmetric matrix `m`, restricted to the
/// orthogonal complement of the rows of `exclude` (if any).
pub fn top_eigenpairs(
    m: ArrayView2<f64>,
    k: usize,
    exclude: Option<ArrayView2<f64>>,
    opts: &EigenOptions,
) -> Result<EigenPairs> {
    let d = m.nrows();
    if m.ncols() != d {
        return Err(Error::Dimension(format!("matrix is {}x{}, not square", d, m.ncols())));
    }
    let mut basis: Vec<Array1<f64>> = Vec::new();
    if let Some(ex) = exclude {
        for row in ex.rows() {
            let mut b = row.to_owned();
            project_out(&mut b, &basis);
            if normalize(&mut b) > 0.0 {
                basis.push(b);
            }
        }
    }
    let available = d - basis.len();
    if k > available {
        return Err(Error::Dimension(format!(
            "requested {k} eigenpairs from a {available}-dimensional subspace"
        )));
    }
    let fixed = basis.len();
    let mut out = EigenPairs {
        values: Vec::with_capacity(k),
        vectors: Array2::zeros((k, d)),
        residuals: Vec::with_capacity(k),
        iterations: Vec::with_capacity(k),
    };
    let mut scale: Option<f64> = None;
    for i in 0..k {
        let c = dominant(
            m,
            &basis,
            start_vector(d, opts.seed, i),
            scale,
            opts.tol,
            opts.max_iter,
            false,
        );
        if !c.ok {
            return Err(Error::EigenNonConvergence {
                index: i,
                residual: c.residual,
                iterations: c.iterations,
            });
        }
        if scale.is_none() {
            scale = Some(c.value.abs());
        }
        out.values.push(c.value);
        out.vectors.row_mut(i).assign(&c.vector);
        out.residuals.push(c.residual);
        out.iterations.push(c.iterations);
        basis.push(c.vector);
    }
    debug_assert_eq!(basis.len(), fixed + k);
    Ok(out)
}

/// Largest eigenvalue of `m` on the complement of the given orthonormal
/// rows, estimated within a bounded budget (lower bound when the budget is
/// hit).
pub fn next_eigenvalue(
    m: ArrayView2<f64>,
    found: ArrayView2<f64>,
    scale: f64,
    opts: &EigenOptions,
) -> Option<f64> {
    let d = m.nrows();
    if found.nrows() >= d {
        return None;
    }
    let basis: Vec<Array1<f64>> = found.rows().into_iter().map(|r| r.to_owned()).collect();
    let c = dominant(
        m,
        &basis,
        start_vector(d, opts.seed, found.nrows()),
        Some(scale.abs().max(f64::MIN_POSITIVE)),
        opts.tol,
        opts.trailing_budget,
        true,
    );
    Some(c.value)
}

/// Orthonormal basis of the row span of `rows`, dropping rows whose
/// residual norm falls below `tol` times the largest row norm.
pub fn orthonormal_rows(rows: ArrayView2<f64>, tol: f64) -> Array2<f64> {
    let max_norm = rows
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0, f64::max);
    let mut basis: Vec<Array1<f64>> = Vec::new();
    if max_norm == 0.0 {
        return Array2::zeros((0, rows.ncols()));
    }
    for row in rows.rows() {
        let mut v = row.to_owned();
        project_out(&mut v, &basis);
        if v.dot(&v).sqrt() > tol * max_norm {
            normalize(&mut v);
            basis.push(v);
        }
    }
    let mut out = Array2::zeros((basis.len(), rows.ncols()));
    for (i, b) in basis.iter().enumerate() {
        out.row_mut(i).assign(b);
    }
    out
}

/// `(1/n) X^T X`, symmetrized so that `M[i][j] == M[j][i]` bit-for-bit.
pub fn second_moment(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows() as f64;
    let raw = x.t().dot(&x);
    let mut m = raw.clone();
    let d = m.nrows();
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (raw[[i, j]] + raw[[j, i]]) / n;
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
        m[[i, i]] = raw[[i, i]] / n;
    }
    m
}

pub fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Column means of a matrix.
pub fn column_means(x: ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()))
}
