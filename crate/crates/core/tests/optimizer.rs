use imbalance_core::datagen::{gen_mixture, MixtureConfig};
use imbalance_core::kde::WeightVector;
use imbalance_core::rng::seeded;
use imbalance_core::sam::{compute_epsilon, train, Mode, SamConfig};
use imbalance_core::spectral::SslObjective;
use proptest::prelude::*;
use rand::Rng;

fn objective() -> SslObjective {
    let cfg = MixtureConfig {
        dim: 6,
        class_counts: vec![40, 40, 3],
        signal_scale: 2.0,
        class_scales: None,
        noise_scale: 1.0,
        means_seed: 1,
        seed: 2,
    };
    SslObjective::new(&gen_mixture(&cfg).unwrap(), 2, 0.3)
}

fn cfg(rho: f64) -> SamConfig {
    SamConfig {
        sam_radius_rho: rho,
        learning_rate: 0.02,
        steps: 200,
        batch_size: 16,
        seed: 9,
        ..SamConfig::default()
    }
}

#[test]
fn sam_with_zero_radius_is_sgd() {
    let obj = objective();
    let init = obj.init_params(0.1, 4);
    let sgd = train(&obj, &init, &cfg(0.0), None, Mode::Sgd, None).unwrap();
    let sam = train(&obj, &init, &cfg(0.0), None, Mode::Sam, None).unwrap();
    assert_eq!(sgd.final_params, sam.final_params);
    assert_eq!(sgd.losses, sam.losses);
}

#[test]
fn rwsam_with_unit_weights_is_sam() {
    let obj = objective();
    let init = obj.init_params(0.1, 4);
    let sam = train(&obj, &init, &cfg(0.05), None, Mode::Sam, None).unwrap();
    let uniform = WeightVector::uniform(83);
    let rw = train(&obj, &init, &cfg(0.05), Some(&uniform), Mode::RwSam, None).unwrap();
    assert_eq!(sam.final_params, rw.final_params);
    assert_eq!(sam.losses, rw.losses);
}

fn p_norm(v: &[f64], p: f64) -> f64 {
    v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
}

#[test]
fn epsilon_lies_on_the_p_sphere() {
    let mut rng = seeded(17);
    for (p, q) in [(2.0, 2.0), (1.5, 3.0), (3.0, 1.5)] {
        for _ in 0..1000 {
            let len = rng.random_range(1..=50);
            let magnitude = 10f64.powf(rng.random_range(-6.0..6.0));
            let g: Vec<f64> = (0..len).map(|_| magnitude * rng.random_range(-1.0..1.0)).collect();
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let rho = rng.random_range(0.01..2.0);
            let c = SamConfig {
                sam_radius_rho: rho,
                p_exp: p,
                q_exp: q,
                ..SamConfig::default()
            };
            let eps = compute_epsilon(&g, &c);
            let norm = p_norm(&eps, p);
            assert!((norm - rho).abs() <= 1e-12, "p={p}: norm {norm} vs rho {rho}");
        }
    }
}

/// Maximizes `eps . g` over the `p`-sphere of radius `rho` in three
/// dimensions by scanning a spherical-angle grid of directions.
fn grid_argmax(g: [f64; 3], p: f64, rho: f64, steps: usize) -> ([f64; 3], f64) {
    let mut best = ([0.0; 3], f64::NEG_INFINITY);
    for i in 0..=steps {
        let theta = std::f64::consts::PI * i as f64 / steps as f64;
        for j in 0..2 * steps {
            let phi = std::f64::consts::PI * j as f64 / steps as f64;
            let dir = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
            let s = rho / p_norm(&dir, p);
            let e = [dir[0] * s, dir[1] * s, dir[2] * s];
            let val = e[0] * g[0] + e[1] * g[1] + e[2] * g[2];
            if val > best.1 {
                best = (e, val);
            }
        }
    }
    best
}

#[test]
fn epsilon_matches_grid_maximizer() {
    let mut rng = seeded(5);
    let steps = 400;
    for (p, q) in [(1.5, 3.0), (3.0, 1.5), (2.0, 2.0)] {
        for _ in 0..10 {
            let g = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let c = SamConfig {
                sam_radius_rho: 0.7,
                p_exp: p,
                q_exp: q,
                ..SamConfig::default()
            };
            let eps = compute_epsilon(&g, &c);
            let value: f64 = eps.iter().zip(&g).map(|(e, g)| e * g).sum();
            let (grid_eps, grid_value) = grid_argmax(g, p, 0.7, steps);
            // The closed form is the exact maximizer, so it can only beat
            // the grid, and by no more than the grid resolution allows.
            let h = std::f64::consts::PI / steps as f64;
            let gnorm = p_norm(&g, q);
            assert!(value >= grid_value - 1e-12, "p={p}: {value} < grid {grid_value}");
            assert!(value - grid_value <= 0.7 * gnorm * 4.0 * h * h + 1e-12);
            let dist = eps.iter().zip(&grid_eps).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(dist <= 0.7 * 20.0 * h, "p={p}: distance {dist}");
        }
    }
}

proptest! {
    #[test]
    fn epsilon_is_invariant_to_gradient_scale(
        g in prop::collection::vec(-1.0f64..1.0, 1..20),
        log_scale in -8.0f64..8.0,
        pq in prop::sample::select(vec![(2.0, 2.0), (1.5, 3.0), (3.0, 1.5)]),
    ) {
        prop_assume!(g.iter().any(|&x| x != 0.0));
        let c = SamConfig { sam_radius_rho: 0.3, p_exp: pq.0, q_exp: pq.1, ..SamConfig::default() };
        let scale = 10f64.powf(log_scale);
        let scaled: Vec<f64> = g.iter().map(|x| x * scale).collect();
        let a = compute_epsilon(&g, &c);
        let b = compute_epsilon(&scaled, &c);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}
