use imbalance_core::datagen::Dataset;
use imbalance_core::linalg::{top_eigenpairs, EigenOptions};
use imbalance_core::maxmargin::{brute_force_maxmargin, check_margins, solve_maxmargin_qp, QpOptions};
use imbalance_core::rng::seeded;
use imbalance_core::spectral::{solve_spectral, SecondMoment};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeded(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Cyclic Jacobi rotations; returns eigenvalues (descending) and the
/// matching eigenvectors as columns.
fn jacobi(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].total_cmp(&m[[i, i]]));
    let values = order.iter().map(|&i| m[[i, i]]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    (values, vectors)
}

fn random_psd(seed: u64) -> Array2<f64> {
    let b = gaussian(8, 8, seed);
    let a = b.dot(&b.t());
    (&a + &a.t()) * 0.5
}

#[test]
fn jacobi_oracle_is_sound() {
    let a = random_psd(99);
    let (values, vectors) = jacobi(&a);
    let rebuilt = vectors.dot(&Array2::from_diag(&ndarray::Array1::from(values))).dot(&vectors.t());
    assert!((&rebuilt - &a).iter().all(|v| v.abs() < 1e-10));
}

#[test]
fn eigenpairs_match_jacobi_on_random_psd_matrices() {
    for seed in 0..50 {
        let a = random_psd(1000 + seed);
        let (values, vectors) = jacobi(&a);
        let pairs = top_eigenpairs(a.view(), 8, None, &EigenOptions::default()).unwrap();
        for i in 0..8 {
            assert!(
                (pairs.values[i] - values[i]).abs() <= 1e-8,
                "seed {seed} eigenvalue {i}: {} vs {}",
                pairs.values[i],
                values[i]
            );
            let gap = [i.checked_sub(1), Some(i + 1)]
                .into_iter()
                .flatten()
                .filter(|&j| j < 8)
                .map(|j| (values[i] - values[j]).abs())
                .fold(f64::INFINITY, f64::min);
            if gap > 1e-2 {
                let overlap = pairs.vectors.row(i).dot(&vectors.column(i)).abs();
                assert!(1.0 - overlap <= 1e-8, "seed {seed} vector {i}: overlap {overlap}");
            }
        }
    }
}

#[test]
fn spectral_features_match_jacobi_projection() {
    for seed in 0..50 {
        let a = random_psd(2000 + seed);
        let (values, vectors) = jacobi(&a);
        let rank = 3;
        if values[rank - 1] - values[rank] < 1e-3 {
            continue;
        }
        let moment = SecondMoment {
            matrix: a.clone(),
            n_source: 8,
        };
        let opts = EigenOptions {
            tol: 1e-13,
            ..EigenOptions::default()
        };
        let (fm, _) = solve_spectral(&moment, rank, &opts).unwrap();
        // W^T W equals the rank-3 truncation of A regardless of row signs.
        let got = fm.weights.t().dot(&fm.weights);
        let mut want = Array2::<f64>::zeros((8, 8));
        for i in 0..rank {
            let v = vectors.column(i);
            for r in 0..8 {
                for c in 0..8 {
                    want[[r, c]] += values[i] * v[r] * v[c];
                }
            }
        }
        let err = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 1e-8, "seed {seed}: max error {err}");
    }
}

fn tiny_instance(seed: u64) -> Dataset {
    let mut rng = seeded(seed);
    let classes = rng.random_range(2..=3);
    let n = if classes == 2 { rng.random_range(2..=6) } else { rng.random_range(3..=5) };
    let d = rng.random_range(n..=n + 2);
    let inputs = gaussian(n, d, seed ^ 0xABCD);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for i in (1..n).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    Dataset::new(inputs, labels, classes, serde_json::Value::Null).unwrap()
}

#[test]
fn qp_matches_brute_force_on_tiny_instances() {
    let opts = QpOptions {
        kkt_tol: 1e-10,
        margin_tol: 1e-9,
        ..QpOptions::default()
    };
    for seed in 0..50 {
        let ds = tiny_instance(seed);
        let oracle = brute_force_maxmargin(&ds).unwrap();
        let qp = solve_maxmargin_qp(&ds, &opts).unwrap();
        assert!(qp.converged, "seed {seed} did not converge");
        let rel = (qp.objective - oracle.objective).abs() / oracle.objective.max(1.0);
        assert!(rel <= 1e-6, "seed {seed}: {} vs {}", qp.objective, oracle.objective);
        let margin = check_margins(&qp.feature_map, &ds).unwrap();
        assert!(margin >= 1.0 - 1e-4, "seed {seed}: margin {margin}");
    }
}
