//! Spectral self-supervised features.
//!
//! The positive-pair objective
//! `-E[(W(x+xi))^T (W(x+xi'))] + 1/2 ||W^T W||_F^2` has, in expectation over
//! the perturbations, the value `1/2 ||M - W^T W||_F^2 - 1/2 ||M||_F^2` with
//! `M = E[x x^T]`. Its minimizers are rank-`m` truncations of `M`: rows
//! `sqrt(lambda_i) v_i^T` over the top eigenpairs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMap};
use crate::linalg::{next_eigenvalue, second_moment, top_eigenpairs, EigenOptions};
use crate::rng::seeded;
use crate::sam::{DifferentiableObjective, ExampleLoss};

#[derive(Clone, Debug, PartialEq)]
pub struct SecondMoment {
    pub matrix: Array2<f64>,
    pub n_source: usize,
}

impl SecondMoment {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

pub fn empirical_second_moment(ds: &Dataset) -> Result<SecondMoment> {
    if ds.n() == 0 {
        return Err(Error::Empty("second moment of an empty dataset".into()));
    }
    Ok(SecondMoment {
        matrix: second_moment(ds.inputs.view()),
        n_source: ds.n(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectralReport {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Array2<f64>,
    /// `<e2, v_i>` for each returned eigenvector.
    pub e2_coefficients: Vec<f64>,
    /// `lambda_m - lambda_{m+1}`; `None` when `m == d`.
    pub eigengap: Option<f64>,
    /// Set when the eigengap is below `1e-8 * max(lambda_1, 1)`: the
    /// top-`m` span is then not unique.
    pub degenerate_gap: bool,
}

/// Rank-`rank` spectral features of `M`. Rows for non-positive eigenvalues
/// are zero.
pub fn solve_spectral(
    moment: &SecondMoment,
    rank: usize,
    opts: &EigenOptions,
) -> Result<(FeatureMap, SpectralReport)> {
    let d = moment.dim();
    if rank == 0 || rank > d {
        return Err(Error::Config(format!("rank {rank} outside 1..={d}")));
    }
    let pairs = top_eigenpairs(moment.matrix.view(), rank, None, opts)?;
    let mut weights = pairs.vectors.clone();
    for (mut row, &lambda) in weights.rows_mut().into_iter().zip(&pairs.values) {
        let s = lambda.max(0.0).sqrt();
        row.mapv_inplace(|v| v * s);
    }
    let scale = pairs.values[0].abs().max(1.0);
    let eigengap = if rank < d {
        next_eigenvalue(moment.matrix.view(), pairs.vectors.view(), scale, opts)
            .map(|next| pairs.values[rank - 1] - next)
    } else {
        None
    };
    let degenerate_gap = eigengap.is_some_and(|g| g.abs() < 1e-8 * scale);
    let e2_coefficients = if d >= 2 {
        pairs.vectors.column(1).to_vec()
    } else {
        vec![0.0; rank]
    };
    let report = SpectralReport {
        eigenvalues: pairs.values,
        eigenvectors: pairs.vectors,
        e2_coefficients,
        eigengap,
        degenerate_gap,
    };
    Ok((FeatureMap::new(weights, FeatureKind::SslSpectral)?, report))
}

/// One stochastic evaluation of the positive-pair loss on `batch` rows.
///
/// For every row, `d` normals for `xi` are drawn and then `d` for `xi'`
/// (nothing is drawn when `perturb_scale == 0`). Optional `weights`
/// multiply each row's loss term, including its share of the
/// regularizer. Returns the loss and its exact gradient with respect to
/// `w`.
pub fn ssl_loss_and_grad<R: Rng + ?Sized>(
    w: ArrayView2<f64>,
    batch: ArrayView2<f64>,
    weights: Option<ArrayView1<f64>>,
    perturb_scale: f64,
    rng: &mut R,
) -> Result<(f64, Array2<f64>)> {
    let (m, d) = w.dim();
    let b = batch.nrows();
    if batch.ncols() != d {
        return Err(Error::Dimension(format!(
            "batch has {} columns, W expects {d}",
            batch.ncols()
        )));
    }
    if let Some(wt) = &weights {
        if wt.len() != b {
            return Err(Error::Dimension(format!("{} weights for {b} rows", wt.len())));
        }
    }
    if b == 0 {
        return Err(Error::Empty("empty batch".into()));
    }
    let mut u = batch.to_owned();
    let mut u2 = batch.to_owned();
    if perturb_scale > 0.0 {
        for j in 0..b {
            for v in u.row_mut(j).iter_mut() {
                *v += perturb_scale * rng.sample::<f64, _>(StandardNormal);
            }
            for v in u2.row_mut(j).iter_mut() {
                *v += perturb_scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let a = u.dot(&w.t());
    let bb = u2.dot(&w.t());
    let inv_b = 1.0 / b as f64;
    let weight = |j: usize| weights.as_ref().map_or(1.0, |wt| wt[j]);

    let mut pair_sum = 0.0;
    let mut wa = a.clone();
    let mut wb = bb.clone();
    let mut weight_sum = 0.0;
    for j in 0..b {
        let wj = weight(j);
        weight_sum += wj;
        pair_sum += wj * a.row(j).dot(&bb.row(j));
        wa.row_mut(j).mapv_inplace(|v| v * wj);
        wb.row_mut(j).mapv_inplace(|v| v * wj);
    }
    let reg_weight = weight_sum * inv_b;
    let gram = w.dot(&w.t());
    let reg = 0.5 * gram.iter().map(|v| v * v).sum::<f64>();
    let loss = -pair_sum * inv_b + reg_weight * reg;

    let mut grad = wa.t().dot(&u2);
    grad += &wb.t().dot(&u);
    grad.mapv_inplace(|v| -v * inv_b);
    let reg_grad = gram.dot(&w);
    grad.scaled_add(2.0 * reg_weight, &reg_grad);
    debug_assert_eq!(grad.dim(), (m, d));
    Ok((loss, grad))
}

/// Deterministic expectation of the loss over perturbations:
/// `-tr(W M W^T) + 1/2 ||W^T W||_F^2`.
pub fn population_loss(w: ArrayView2<f64>, moment: &SecondMoment) -> f64 {
    let wm = w.dot(&moment.matrix);
    let trace: f64 = (0..w.nrows()).map(|i| wm.row(i).dot(&w.row(i))).sum();
    let gram = w.dot(&w.t());
    -trace + 0.5 * gram.iter().map(|v| v * v).sum::<f64>()
}

/// The positive-pair loss over a fixed dataset, as a trainable objective
/// with parameters `vec(W)` (row-major, `rank x d`).
#[derive(Clone, Debug)]
pub struct SslObjective {
    pub inputs: Array2<f64>,
    pub rank: usize,
    pub perturb_scale: f64,
}

impl SslObjective {
    pub fn new(ds: &Dataset, rank: usize, perturb_scale: f64) -> Self {
        SslObjective {
            inputs: ds.inputs.clone(),
            rank,
            perturb_scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn params_view<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rank, self.dim()), params).expect("parameter length")
    }

    pub fn feature_map(&self, params: &[f64]) -> Result<FeatureMap> {
        FeatureMap::new(self.params_view(params).to_owned(), FeatureKind::SslTrained)
    }

    /// Small Gaussian initialization with entries of standard deviation
    /// `scale / sqrt(d)`.
    pub fn init_params(&self, scale: f64, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        let s = scale / (self.dim() as f64).sqrt();
        (0..self.param_dim())
            .map(|_| s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

impl DifferentiableObjective for SslObjective {
    fn param_dim(&self) -> usize {
        self.rank * self.dim()
    }

    fn num_examples(&self) -> usize {
        self.inputs.nrows()
    }

    fn loss_and_grad(
        &self,
        params: &[f64],
        batch: &[usize],
        weights: Option<&[f64]>,
        draw_seed: u64,
    ) -> (f64, Vec<f64>) {
        let w = self.params_view(params);
        let rows = self.inputs.select(Axis(0), batch);
        let batch_weights: Option<Array1<f64>> =
            weights.map(|wt| batch.iter().map(|&i| wt[i]).collect());
        let mut rng = seeded(draw_seed);
        let (loss, grad) = ssl_loss_and_grad(
            w,
            rows.view(),
            batch_weights.as_ref().map(|a| a.view()),
            self.perturb_scale,
            &mut rng,
        )
        .expect("shapes fixed at construction");
        (loss, grad.into_raw_vec_and_offset().0)
    }
}

impl ExampleLoss for SslObjective {
    fn example_losses(&self, params: &[f64], inputs: ArrayView2<f64>, draws: usize, seed: u64) -> Vec<f64> {
        let w = self.params_view(params);
        let gram = w.dot(&w.t());
        let reg = 0.5 * gram.iter().map(|v| v * v).sum::<f64>();
        let mut rng = seeded(seed);
        let d = self.dim();
        let draws = draws.max(1);
        let mut out = Vec::with_capacity(inputs.nrows());
        let mut u = Array1::<f64>::zeros(d);
        let mut u2 = Array1::<f64>::zeros(d);
        for x in inputs.rows() {
            let mut acc = 0.0;
            for _ in 0..draws {
                for j in 0..d {
                    u[j] = x[j] + self.perturb_scale * rng.sample::<f64, _>(StandardNormal);
                }
                for j in 0..d {
                    u2[j] = x[j] + self.perturb_scale * rng.sample::<f64, _>(StandardNormal);
                }
                acc += w.dot(&u).dot(&w.dot(&u2));
            }
            out.push(-acc / draws as f64 + reg);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ds(inputs: Array2<f64>) -> Dataset {
        let n = inputs.nrows();
        Dataset::new(inputs, vec![0; n], 1, serde_json::Value::Null).unwrap()
    }

    #[test]
    fn moment_of_single_basis_row() {
        let m = empirical_second_moment(&ds(array![[1.0, 0.0, 0.0]])).unwrap();
        assert_eq!(m.matrix, array![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let m = empirical_second_moment(&ds(array![[1.0, 0.0], [0.0, 1.0]])).unwrap();
        assert_eq!(m.matrix, array![[0.5, 0.0], [0.0, 0.5]]);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let empty = Dataset::new(Array2::zeros((0, 3)), vec![], 1, serde_json::Value::Null).unwrap();
        assert!(matches!(empirical_second_moment(&empty), Err(Error::Empty(_))));
    }

    #[test]
    fn diagonal_truncation() {
        let moment = SecondMoment {
            matrix: array![[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]],
            n_source: 1,
        };
        let (fm, report) = solve_spectral(&moment, 2, &EigenOptions::default()).unwrap();
        let wtw = fm.weights.t().dot(&fm.weights);
        assert!((&wtw - &moment.matrix).iter().all(|v| v.abs() < 1e-9));
        assert!((report.eigengap.unwrap() - 1.0).abs() < 1e-10);
        assert!(!report.degenerate_gap);
        assert!((report.e2_coefficients[1].abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn non_positive_eigenvalues_give_zero_rows() {
        let moment = SecondMoment {
            matrix: array![[2.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, -1.0]],
            n_source: 1,
        };
        let (fm, report) = solve_spectral(&moment, 3, &EigenOptions::default()).unwrap();
        assert!((report.eigenvalues[2] + 1.0).abs() < 1e-9);
        assert!(fm.weights.row(1).iter().all(|&v| v == 0.0));
        assert!(fm.weights.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_gap_is_flagged() {
        let moment = SecondMoment {
            matrix: Array2::eye(4),
            n_source: 1,
        };
        let (_, report) = solve_spectral(&moment, 2, &EigenOptions::default()).unwrap();
        assert!(report.degenerate_gap);
    }

    #[test]
    fn zero_weights_give_zero_loss_and_grad() {
        let w = Array2::<f64>::zeros((2, 3));
        let batch = array![[1.0, 2.0, 3.0], [0.5, -1.0, 0.0]];
        let (loss, grad) =
            ssl_loss_and_grad(w.view(), batch.view(), None, 0.3, &mut seeded(1)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn closed_form_single_row() {
        let w = array![[0.5, -1.0, 2.0]];
        let x = array![[1.0, 0.25, -0.5]];
        let (loss, grad) = ssl_loss_and_grad(w.view(), x.view(), None, 0.0, &mut seeded(0)).unwrap();
        let wx = 0.5 - 0.25 - 1.0;
        let wn2 = 0.25 + 1.0 + 4.0;
        assert!((loss - (-(wx * wx) + 0.5 * wn2 * wn2)).abs() < 1e-12);
        // d/dw [-(w.x)^2 + 1/2 ||w||^4] = -2 (w.x) x + 2 ||w||^2 w
        for j in 0..3 {
            let expected = -2.0 * wx * x[[0, j]] + 2.0 * wn2 * w[[0, j]];
            assert!((grad[[0, j]] - expected).abs() < 1e-12);
        }
    }
}
