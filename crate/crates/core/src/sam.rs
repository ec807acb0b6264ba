//! First-order training with plain SGD, sharpness-aware minimization and
//! its reweighted variant, plus the two-stage reweighting pipeline.
//!
//! One step on a sampled batch:
//!
//! * `Sgd`:   `phi <- phi - lr * grad L(phi)`
//! * `Sam`:   `eps = epsilon(grad L(phi))`, then `phi <- phi - lr * grad L(phi + eps)`
//! * `RwSam`: `eps = epsilon(grad L_w(phi))` with per-example weights `w`,
//!   then the same unweighted outer step.
//!
//! Both gradient evaluations of a step share one perturbation seed, derived
//! statelessly from `(seed, step)`, so a step is a pure function of the
//! parameters, the batch and the seed.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::eval::per_class_mean_losses;
use crate::kde::{compute_weights, KdeConfig, WeightVector};
use crate::rng::{derive_seed, seeded, Rng};

/// A loss over a fixed training set, differentiable in a flat parameter
/// vector. Implementations must be pure in their arguments.
pub trait DifferentiableObjective: Sync {
    fn param_dim(&self) -> usize;
    fn num_examples(&self) -> usize;
    /// Mean loss over `batch` (indices into the training set) and its
    /// gradient. With `weights` (indexed by training-set position) each
    /// example's loss is multiplied by its weight. `draw_seed` fixes any
    /// internal randomness.
    fn loss_and_grad(
        &self,
        params: &[f64],
        batch: &[usize],
        weights: Option<&[f64]>,
        draw_seed: u64,
    ) -> (f64, Vec<f64>);
}

/// Per-example pre-training loss on arbitrary inputs, averaged over
/// `draws` internal random draws.
pub trait ExampleLoss: Sync {
    fn example_losses(&self, params: &[f64], inputs: ArrayView2<f64>, draws: usize, seed: u64) -> Vec<f64>;
}

/// Objectives whose parameters define a representation of the training
/// inputs.
pub trait Encoder: DifferentiableObjective {
    /// `n x m` representations of the training set.
    fn encode(&self, params: &[f64]) -> Array2<f64>;
}

impl Encoder for crate::spectral::SslObjective {
    fn encode(&self, params: &[f64]) -> Array2<f64> {
        self.inputs.dot(&self.params_view(params).t())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Sgd,
    Sam,
    RwSam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamConfig {
    /// Radius of the ascent step (not the data noise scale).
    pub sam_radius_rho: f64,
    pub p_exp: f64,
    pub q_exp: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
    /// Steps between snapshots; 0 disables them.
    pub log_interval: usize,
    /// Stop once the mean loss of consecutive 100-step windows changes by
    /// less than this relative amount.
    pub stop_rel_tol: Option<f64>,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig {
            sam_radius_rho: 0.05,
            p_exp: 2.0,
            q_exp: 2.0,
            learning_rate: 0.01,
            steps: 1000,
            batch_size: 256,
            seed: 0,
            schedule: Schedule::Constant,
            log_interval: 0,
            stop_rel_tol: None,
        }
    }
}

pub const STOP_WINDOW: usize = 100;

impl SamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sam_radius_rho >= 0.0 && self.sam_radius_rho.is_finite()) {
            return Err(Error::Config(format!(
                "sam_radius_rho={} must be non-negative",
                self.sam_radius_rho
            )));
        }
        if !(self.p_exp > 1.0 && self.q_exp > 1.0) {
            return Err(Error::Config("dual exponents must exceed 1".into()));
        }
        if (1.0 / self.p_exp + 1.0 / self.q_exp - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "1/p + 1/q must equal 1 (p={}, q={})",
                self.p_exp, self.q_exp
            )));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("learning_rate and batch_size must be positive".into()));
        }
        Ok(())
    }

    fn learning_rate_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let t = step as f64 / self.steps.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// `rho * sgn(g) |g|^{q-1} / (||g||_q^q)^{1/p}`: the maximizer of
/// `eps^T g` over the `p`-norm ball of radius `rho`. Zero when `g = 0` or
/// `rho = 0`.
pub fn compute_epsilon(grad: &[f64], cfg: &SamConfig) -> Vec<f64> {
    let rho = cfg.sam_radius_rho;
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    if rho == 0.0 || scale == 0.0 {
        return vec![0.0; grad.len()];
    }
    let (p, q) = (cfg.p_exp, cfg.q_exp);
    // The formula is homogeneous of degree zero in g; dividing by the
    // largest entry keeps the powers in range.
    if q == 2.0 && p == 2.0 {
        let norm = grad.iter().map(|g| (g / scale) * (g / scale)).sum::<f64>().sqrt();
        return grad.iter().map(|g| rho * (g / scale) / norm).collect();
    }
    let sum_q: f64 = grad.iter().map(|g| (g.abs() / scale).powf(q)).sum();
    let denom = sum_q.powf(1.0 / p);
    grad.iter()
        .map(|g| rho * g.signum() * (g.abs() / scale).powf(q - 1.0) / denom)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub loss: f64,
    pub per_class_train: Vec<f64>,
    pub per_class_val: Vec<f64>,
}

impl Snapshot {
    pub fn per_class_gap(&self) -> Vec<f64> {
        self.per_class_val
            .iter()
            .zip(&self.per_class_train)
            .map(|(v, t)| v - t)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub mode: Mode,
    /// Unweighted batch loss at the point where the descent gradient was
    /// taken (`phi + eps`; `phi` for SGD).
    pub losses: Vec<f64>,
    pub final_params: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
}

impl TrainTrace {
    /// One JSON record per snapshot: `step`, `loss`, `per_class_gap`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.snapshots {
            let rec = serde_json::json!({
                "step": s.step,
                "loss": s.loss,
                "per_class_gap": s.per_class_gap(),
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }
}

/// Held-out monitoring for snapshots.
pub struct GapMonitor<'a> {
    pub loss: &'a dyn ExampleLoss,
    pub train: &'a Dataset,
    pub heldout: &'a Dataset,
    pub draws: usize,
    pub seed: u64,
}

impl GapMonitor<'_> {
    fn snapshot(&self, params: &[f64], step: usize, loss: f64) -> Snapshot {
        Snapshot {
            step,
            loss,
            per_class_train: per_class_mean_losses(self.loss, params, self.train, self.draws, self.seed),
            per_class_val: per_class_mean_losses(
                self.loss,
                params,
                self.heldout,
                self.draws,
                self.seed ^ 0xA5A5_A5A5,
            ),
        }
    }
}

struct BatchSampler {
    n: usize,
    size: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl BatchSampler {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        BatchSampler {
            n,
            size,
            order: (0..n).collect(),
            cursor: n,
            rng: seeded(seed),
        }
    }

    /// Full dataset when it fits in one batch; otherwise consecutive slices
    /// of a permutation reshuffled each epoch.
    fn next(&mut self) -> Vec<usize> {
        if self.size >= self.n {
            return (0..self.n).collect();
        }
        let mut batch = Vec::with_capacity(self.size);
        while batch.len() < self.size {
            if self.cursor == self.n {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (self.size - batch.len()).min(self.n - self.cursor);
            batch.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        batch
    }
}

fn check_finite(loss: f64, grad: &[f64], step: usize) -> Result<()> {
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { step });
    }
    Ok(())
}

pub fn train(
    obj: &dyn DifferentiableObjective,
    init: &[f64],
    cfg: &SamConfig,
    weights: Option<&WeightVector>,
    mode: Mode,
    monitor: Option<&GapMonitor<'_>>,
) -> Result<TrainTrace> {
    cfg.validate()?;
    let n = obj.num_examples();
    if init.len() != obj.param_dim() {
        return Err(Error::Dimension(format!(
            "{} initial parameters for a {}-parameter objective",
            init.len(),
            obj.param_dim()
        )));
    }
    if n == 0 {
        return Err(Error::Empty("objective has no examples".into()));
    }
    let example_weights = match (mode, weights) {
        (Mode::RwSam, Some(w)) if w.len() == n => Some(w.weights.as_slice()),
        (Mode::RwSam, Some(w)) => {
            return Err(Error::Dimension(format!("{} weights for {n} examples", w.len())))
        }
        (Mode::RwSam, None) => return Err(Error::Config("rwsam mode needs example weights".into())),
        _ => None,
    };

    let mut params = init.to_vec();
    let mut sampler = BatchSampler::new(n, cfg.batch_size, derive_seed(cfg.seed, 0));
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut snapshots = Vec::new();

    for step in 0..cfg.steps {
        let batch = sampler.next();
        let draw_seed = derive_seed(cfg.seed, 1 + step as u64);
        let lr = cfg.learning_rate_at(step);

        let (loss, grad) = match mode {
            Mode::Sgd => obj.loss_and_grad(&params, &batch, None, draw_seed),
            Mode::Sam | Mode::RwSam => {
                let (inner_loss, inner_grad) =
                    obj.loss_and_grad(&params, &batch, example_weights, draw_seed);
                check_finite(inner_loss, &inner_grad, step)?;
                let eps = compute_epsilon(&inner_grad, cfg);
                if eps.iter().all(|&e| e == 0.0) && example_weights.is_none() {
                    (inner_loss, inner_grad)
                } else {
                    let shifted: Vec<f64> = if eps.iter().all(|&e| e == 0.0) {
                        params.clone()
                    } else {
                        params.iter().zip(&eps).map(|(p, e)| p + e).collect()
                    };
                    obj.loss_and_grad(&shifted, &batch, None, draw_seed)
                }
            }
        };
        check_finite(loss, &grad, step)?;
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= lr * g;
        }
        losses.push(loss);

        if cfg.log_interval > 0 && (step + 1) % cfg.log_interval == 0 {
            let snap = match monitor {
                Some(m) => m.snapshot(&params, step + 1, loss),
                None => Snapshot {
                    step: step + 1,
                    loss,
                    per_class_train: vec![],
                    per_class_val: vec![],
                },
            };
            snapshots.push(snap);
        }

        if let Some(tol) = cfg.stop_rel_tol {
            let len = losses.len();
            if len >= 2 * STOP_WINDOW && len % STOP_WINDOW == 0 {
                let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
                let recent = mean(&losses[len - STOP_WINDOW..]);
                let before = mean(&losses[len - 2 * STOP_WINDOW..len - STOP_WINDOW]);
                if (recent - before).abs() <= tol * before.abs().max(f64::MIN_POSITIVE) {
                    break;
                }
            }
        }
    }

    Ok(TrainTrace {
        mode,
        losses,
        final_params: params,
        snapshots,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub stage1: SamConfig,
    pub kde: KdeConfig,
    pub stage2: SamConfig,
    /// Re-initialize parameters for stage 2 instead of continuing.
    #[serde(default)]
    pub fresh_init: bool,
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub stage1: TrainTrace,
    pub weights: WeightVector,
    pub stage2: TrainTrace,
}

/// Stage 1 trains plainly; representations of the training set then give
/// KDE weights, computed once and held fixed; stage 2 trains with
/// reweighted SAM.
pub fn run_rwsam_pipeline<E: Encoder>(
    obj: &E,
    init: &[f64],
    cfg: &PipelineConfig,
    monitor: Option<&GapMonitor<'_>>,
) -> Result<PipelineResult> {
    let stage1 = train(obj, init, &cfg.stage1, None, Mode::Sgd, None)?;
    let reps = obj.encode(&stage1.final_params);
    let weights = compute_weights(reps.view(), &cfg.kde)?;
    let start = if cfg.fresh_init { init } else { &stage1.final_params };
    let stage2 = train(obj, start, &cfg.stage2, Some(&weights), Mode::RwSam, monitor)?;
    Ok(PipelineResult {
        stage1,
        weights,
        stage2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `L(phi) = 1/2 ||phi||^2`, ignoring batches and weights.
    struct Bowl;

    impl DifferentiableObjective for Bowl {
        fn param_dim(&self) -> usize {
            2
        }
        fn num_examples(&self) -> usize {
            1
        }
        fn loss_and_grad(&self, p: &[f64], _: &[usize], _: Option<&[f64]>, _: u64) -> (f64, Vec<f64>) {
            (0.5 * p.iter().map(|v| v * v).sum::<f64>(), p.to_vec())
        }
    }

    fn cfg(rho: f64) -> SamConfig {
        SamConfig {
            sam_radius_rho: rho,
            learning_rate: 0.1,
            steps: 1,
            ..SamConfig::default()
        }
    }

    #[test]
    fn epsilon_euclidean_case() {
        let eps = compute_epsilon(&[3.0, 4.0], &cfg(2.0));
        assert!((eps[0] - 1.2).abs() < 1e-15 && (eps[1] - 1.6).abs() < 1e-15);
        assert_eq!(compute_epsilon(&[3.0, 4.0], &cfg(0.0)), vec![0.0, 0.0]);
        assert_eq!(compute_epsilon(&[0.0, 0.0], &cfg(1.0)), vec![0.0, 0.0]);
    }

    #[test]
    fn bowl_single_step() {
        let trace = train(&Bowl, &[1.0, 0.0], &cfg(0.0), None, Mode::Sgd, None).unwrap();
        assert_eq!(trace.final_params, vec![0.9, 0.0]);
        assert_eq!(trace.losses, vec![0.5]);
    }

    #[test]
    fn sam_step_on_bowl_uses_shifted_gradient() {
        // eps = 0.5 * (1, 0); grad at (1.5, 0) is (1.5, 0).
        let trace = train(&Bowl, &[1.0, 0.0], &cfg(0.5), None, Mode::Sam, None).unwrap();
        assert!((trace.final_params[0] - 0.85).abs() < 1e-15);
    }

    #[test]
    fn invalid_exponents_rejected() {
        let c = SamConfig {
            p_exp: 2.0,
            q_exp: 3.0,
            ..cfg(0.1)
        };
        assert!(matches!(train(&Bowl, &[1.0, 0.0], &c, None, Mode::Sgd, None), Err(Error::Config(_))));
    }

    #[test]
    fn rwsam_requires_weights() {
        let err = train(&Bowl, &[1.0, 0.0], &cfg(0.1), None, Mode::RwSam, None);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    struct Exploding;

    impl DifferentiableObjective for Exploding {
        fn param_dim(&self) -> usize {
            1
        }
        fn num_examples(&self) -> usize {
            1
        }
        fn loss_and_grad(&self, p: &[f64], _: &[usize], _: Option<&[f64]>, _: u64) -> (f64, Vec<f64>) {
            let v = p[0].exp();
            (v, vec![-v])
        }
    }

    #[test]
    fn non_finite_aborts_with_step() {
        let c = SamConfig {
            learning_rate: 1e3,
            steps: 50,
            ..cfg(0.0)
        };
        match train(&Exploding, &[0.0], &c, None, Mode::Sgd, None) {
            Err(Error::NonFinite { step }) => assert!(step > 0),
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = BatchSampler::new(10, 4, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next()).collect();
        seen.truncate(10);
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut full = BatchSampler::new(3, 8, 0);
        assert_eq!(full.next(), vec![0, 1, 2]);
    }
}
