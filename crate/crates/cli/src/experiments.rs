//! One trial of each experiment kind, as plain functions of
//! `(config, trial seed)`. Sub-streams come from `derive_seed(seed, k)`
//! with a fixed `k` per purpose, so adding outputs never shifts draws.

use imbalance_core::datagen::{
    gen_longtail_counts, gen_mixture, gen_toy, Dataset, ImbalanceProfile, MixtureConfig, ToyConfig,
};
use imbalance_core::eval::{generalization_gap, relative_gap, train_probe, ClassGroups, GapReport, GenGapReport};
use imbalance_core::features::FeatureMap;
use imbalance_core::kde::WeightVector;
use imbalance_core::maxmargin::solve_maxmargin_qp;
use imbalance_core::rng::derive_seed;
use imbalance_core::sam::{run_rwsam_pipeline, train, Mode, PipelineConfig, SamConfig, TrainTrace};
use imbalance_core::spectral::{empirical_second_moment, solve_spectral, SslObjective};
use imbalance_core::theory::{
    constructed_classifier_check, data_matrix_check, geometry_cell, verify_gaussian_properties, DataMatrixBounds,
    GeometryReport, LemmaCheck,
};

use crate::config::{ExperimentConfig, ExperimentKind, GapStudyConfig, LemmaConfig, RwsamConfig, ToyTheoremConfig};
use crate::error::Result;

/// Per-trial seed: a stateless mix of the master seed and trial index.
pub fn trial_seed(master_seed: u64, trial: usize) -> u64 {
    derive_seed(master_seed, trial as u64)
}

/// Shortest round-trip formatting, so CSV values reload bit-exactly.
pub fn fmt(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    pub group: String,
    pub metric: String,
    pub value: f64,
}

fn metric(group: impl Into<String>, name: impl Into<String>, value: f64) -> Metric {
    Metric {
        group: group.into(),
        metric: name.into(),
        value,
    }
}

/// What a trial hands back to the runner: a wide result table, long-format
/// metrics for aggregation, and extra named files.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialOutput {
    pub table: Table,
    pub metrics: Vec<Metric>,
    pub files: Vec<(String, String)>,
}

pub fn run_trial(cfg: &ExperimentConfig, seed: u64) -> Result<TrialOutput> {
    match cfg.kind {
        ExperimentKind::ToyTheorem => toy_theorem_trial(&cfg.toy_theorem(), seed),
        ExperimentKind::LemmaChecks => lemma_trial(&cfg.lemma_checks(), seed),
        ExperimentKind::RwsamPipeline => rwsam_trial(&cfg.rwsam(), seed),
        ExperimentKind::GapStudy => gap_study_trial(&cfg.gap_study(), seed),
    }
}

/// The datasets a trial trains and evaluates on, by file stem.
pub fn trial_datasets(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<(String, Dataset)>> {
    Ok(match cfg.kind {
        ExperimentKind::ToyTheorem => {
            let t = cfg.toy_theorem();
            t.d_grid
                .iter()
                .map(|&d| Ok((format!("toy-d{d}"), gen_toy(&ToyConfig::theorem_setting(d, t.n_frequent, seed))?)))
                .collect::<Result<_>>()?
        }
        ExperimentKind::LemmaChecks => {
            let l = cfg.lemma_checks();
            vec![("toy".into(), gen_toy(&ToyConfig::theorem_setting(l.d, l.n_frequent, seed))?)]
        }
        ExperimentKind::RwsamPipeline => {
            let data = RwsamData::generate(&cfg.rwsam(), seed)?;
            let mut out = vec![("train".into(), data.train), ("heldout".into(), data.heldout)];
            if let Some((a, b)) = data.probe {
                out.push(("probe-train".into(), a));
                out.push(("probe-test".into(), b));
            }
            out
        }
        ExperimentKind::GapStudy => {
            let g = cfg.gap_study();
            let mut out = Vec::new();
            for (i, &r) in g.ratios.iter().enumerate() {
                let pair = GapPair::generate(&g, seed, i)?;
                out.push((format!("imbalanced-r{r}"), pair.imbalanced));
                out.push((format!("balanced-r{r}"), pair.balanced));
            }
            let (a, b) = gap_probe_sets(&g, seed)?;
            out.push(("probe-train".into(), a));
            out.push(("probe-test".into(), b));
            out
        }
    })
}

pub fn toy_theorem_reports(cfg: &ToyTheoremConfig, seed: u64) -> Result<Vec<(GeometryReport, bool)>> {
    let template = cfg.template();
    cfg.d_grid.iter().map(|&d| Ok(geometry_cell(d, seed, &template)?)).collect()
}

fn toy_theorem_trial(cfg: &ToyTheoremConfig, seed: u64) -> Result<TrialOutput> {
    let mut table = Table::new(&["d", "sl_leakage", "ssl_capture", "capture_deficit", "qp_converged"]);
    let mut metrics = Vec::new();
    for (report, converged) in toy_theorem_reports(cfg, seed)? {
        let group = format!("d={}", report.d);
        table.rows.push(vec![
            report.d.to_string(),
            fmt(report.sl_leakage),
            fmt(report.ssl_capture),
            fmt(1.0 - report.ssl_capture),
            converged.to_string(),
        ]);
        metrics.push(metric(&group, "sl_leakage", report.sl_leakage));
        metrics.push(metric(&group, "ssl_capture", report.ssl_capture));
        metrics.push(metric(&group, "capture_deficit", 1.0 - report.ssl_capture));
    }
    Ok(TrialOutput {
        table,
        metrics,
        files: Vec::new(),
    })
}

pub fn lemma_checks(cfg: &LemmaConfig, seed: u64) -> Result<Vec<LemmaCheck>> {
    let toy = ToyConfig::theorem_setting(cfg.d, cfg.n_frequent, seed);
    let ds = gen_toy(&toy)?;
    let noise = ds.noise.as_ref().ok_or(imbalance_core::Error::MissingNoise)?;
    let gaussian = verify_gaussian_properties(noise);
    let classifier = constructed_classifier_check(&ds, &toy, cfg.c_m)?;
    let moment = empirical_second_moment(&ds)?;
    let bounds = DataMatrixBounds::for_toy(&toy, cfg.c_u);
    let matrix = data_matrix_check(&moment, cfg.samples_u, &bounds, derive_seed(seed, 1))?;
    Ok(vec![gaussian, classifier, matrix])
}

fn lemma_trial(cfg: &LemmaConfig, seed: u64) -> Result<TrialOutput> {
    let mut table = Table::new(&["check", "condition", "measured", "bound", "pass"]);
    let mut metrics = Vec::new();
    for check in lemma_checks(cfg, seed)? {
        for c in &check.conditions {
            table.rows.push(vec![
                check.name.clone(),
                c.name.clone(),
                fmt(c.measured),
                fmt(c.bound),
                c.pass.to_string(),
            ]);
            metrics.push(metric(&check.name, &c.name, c.measured));
            metrics.push(metric(&check.name, format!("{}:pass", c.name), if c.pass { 1.0 } else { 0.0 }));
        }
    }
    Ok(TrialOutput {
        table,
        metrics,
        files: Vec::new(),
    })
}

pub struct RwsamData {
    pub train: Dataset,
    pub heldout: Dataset,
    pub probe: Option<(Dataset, Dataset)>,
}

impl RwsamData {
    pub fn mixture(cfg: &RwsamConfig, seed: u64) -> MixtureConfig {
        let mut counts = vec![cfg.n_frequent; cfg.frequent_classes];
        counts.extend(vec![cfg.n_rare; cfg.rare_classes]);
        let mut scales = vec![cfg.frequent_scale; cfg.frequent_classes];
        scales.extend(vec![cfg.rare_scale; cfg.rare_classes]);
        MixtureConfig {
            dim: cfg.dim,
            class_counts: counts,
            signal_scale: cfg.frequent_scale,
            class_scales: Some(scales),
            noise_scale: cfg.noise_scale,
            means_seed: derive_seed(seed, 1),
            seed: derive_seed(seed, 2),
        }
    }

    pub fn generate(cfg: &RwsamConfig, seed: u64) -> Result<Self> {
        let mix = Self::mixture(cfg, seed);
        let classes = cfg.frequent_classes + cfg.rare_classes;
        let train = gen_mixture(&mix)?;
        let heldout = gen_mixture(&mix.resample(vec![cfg.heldout_per_class; classes], derive_seed(seed, 3)))?;
        let probe = if cfg.probe_per_class > 0 {
            let counts = vec![cfg.probe_per_class; classes];
            Some((
                gen_mixture(&mix.resample(counts.clone(), derive_seed(seed, 8)))?,
                gen_mixture(&mix.resample(counts, derive_seed(seed, 9)))?,
            ))
        } else {
            None
        };
        Ok(RwsamData { train, heldout, probe })
    }
}

#[derive(Clone, Debug)]
pub struct MethodOutcome {
    pub method: &'static str,
    pub gap: GenGapReport,
    pub probe_accuracy: Option<f64>,
    pub final_loss: f64,
}

#[derive(Clone, Debug)]
pub struct RwsamOutcome {
    pub methods: Vec<MethodOutcome>,
    pub weights: WeightVector,
    pub mean_weight_frequent: f64,
    pub mean_weight_rare: f64,
}

impl RwsamOutcome {
    pub fn method(&self, name: &str) -> Option<&MethodOutcome> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// SGD for `stage1.steps + stage2.steps` steps, plain training followed by
/// SAM, and the reweighted pipeline, all from one initialization and with
/// a shared stage-1 batch/draw stream.
pub fn run_rwsam(cfg: &RwsamConfig, seed: u64) -> Result<RwsamOutcome> {
    let data = RwsamData::generate(cfg, seed)?;
    let obj = SslObjective::new(&data.train, cfg.rank, cfg.perturb_scale);
    let init = obj.init_params(cfg.init_scale, derive_seed(seed, 4));
    let stage1 = SamConfig {
        seed: derive_seed(seed, 5),
        ..cfg.stage1.clone()
    };
    let stage2 = SamConfig {
        seed: derive_seed(seed, 6),
        ..cfg.stage2.clone()
    };
    let baseline = SamConfig {
        steps: stage1.steps + stage2.steps,
        ..stage1.clone()
    };
    let sgd = train(&obj, &init, &baseline, None, Mode::Sgd, None)?;
    let pipeline = run_rwsam_pipeline(
        &obj,
        &init,
        &PipelineConfig {
            stage1,
            kde: cfg.kde.clone(),
            stage2: stage2.clone(),
            fresh_init: false,
        },
        None,
    )?;
    let sam = train(&obj, &pipeline.stage1.final_params, &stage2, None, Mode::Sam, None)?;

    let groups = ClassGroups::by_median(&data.train.class_counts());
    let gap_seed = derive_seed(seed, 7);
    let evaluate = |method: &'static str, trace: &TrainTrace| -> Result<MethodOutcome> {
        let gap = generalization_gap(
            &obj,
            &trace.final_params,
            &data.train,
            &data.heldout,
            Some(groups.clone()),
            gap_seed,
        )?;
        let probe_accuracy = match &data.probe {
            Some((ptrain, ptest)) => {
                let fm: FeatureMap = obj.feature_map(&trace.final_params)?;
                Some(train_probe(&fm, ptrain, ptest, &cfg.probe)?.top1_accuracy)
            }
            None => None,
        };
        Ok(MethodOutcome {
            method,
            gap,
            probe_accuracy,
            final_loss: trace.losses.last().copied().unwrap_or(f64::NAN),
        })
    };
    let methods = vec![
        evaluate("sgd", &sgd)?,
        evaluate("sam", &sam)?,
        evaluate("rwsam", &pipeline.stage2)?,
    ];

    let mean_over = |classes: &[usize]| -> f64 {
        let picked: Vec<f64> = data
            .train
            .labels
            .iter()
            .zip(&pipeline.weights.weights)
            .filter(|(y, _)| classes.contains(y))
            .map(|(_, &w)| w)
            .collect();
        picked.iter().sum::<f64>() / picked.len() as f64
    };
    Ok(RwsamOutcome {
        mean_weight_frequent: mean_over(&groups.frequent),
        mean_weight_rare: mean_over(&groups.rare),
        methods,
        weights: pipeline.weights,
    })
}

fn rwsam_trial(cfg: &RwsamConfig, seed: u64) -> Result<TrialOutput> {
    let outcome = run_rwsam(cfg, seed)?;
    let mut table = Table::new(&["method", "acc", "gap_freq", "gap_rare", "final_loss"]);
    let mut metrics = Vec::new();
    for m in &outcome.methods {
        table.rows.push(vec![
            m.method.to_string(),
            m.probe_accuracy.map(fmt).unwrap_or_default(),
            fmt(m.gap.frequent_gap),
            fmt(m.gap.rare_gap),
            fmt(m.final_loss),
        ]);
        if let Some(acc) = m.probe_accuracy {
            metrics.push(metric(m.method, "acc", acc));
        }
        metrics.push(metric(m.method, "gap_freq", m.gap.frequent_gap));
        metrics.push(metric(m.method, "gap_rare", m.gap.rare_gap));
    }
    metrics.push(metric("kde-weights", "mean_frequent", outcome.mean_weight_frequent));
    metrics.push(metric("kde-weights", "mean_rare", outcome.mean_weight_rare));
    Ok(TrialOutput {
        table,
        metrics,
        files: vec![("weights.csv".into(), outcome.weights.to_csv())],
    })
}

pub struct GapPair {
    pub imbalanced: Dataset,
    pub balanced: Dataset,
}

impl GapPair {
    /// Imbalanced counts follow the profile; the balanced set spreads the
    /// same total evenly (the first `n mod C` classes get one extra).
    pub fn generate(cfg: &GapStudyConfig, seed: u64, ratio_index: usize) -> Result<Self> {
        let r = cfg.ratios[ratio_index];
        let profile = ImbalanceProfile::new(cfg.classes, cfg.shape, cfg.base_count, r);
        let counts = gen_longtail_counts(&profile)?;
        let n: usize = counts.iter().sum();
        let balanced_counts: Vec<usize> = (0..cfg.classes)
            .map(|c| n / cfg.classes + usize::from(c < n % cfg.classes))
            .collect();
        let stream = 10 + 2 * ratio_index as u64;
        let mix = gap_mixture(cfg, seed, counts, derive_seed(seed, stream));
        Ok(GapPair {
            imbalanced: gen_mixture(&mix)?,
            balanced: gen_mixture(&mix.resample(balanced_counts, derive_seed(seed, stream + 1)))?,
        })
    }
}

fn gap_mixture(cfg: &GapStudyConfig, seed: u64, counts: Vec<usize>, sample_seed: u64) -> MixtureConfig {
    MixtureConfig {
        dim: cfg.dim,
        class_counts: counts,
        signal_scale: cfg.signal_scale,
        class_scales: None,
        noise_scale: cfg.noise_scale,
        means_seed: derive_seed(seed, 1),
        seed: sample_seed,
    }
}

fn gap_probe_sets(cfg: &GapStudyConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let train = gap_mixture(cfg, seed, vec![cfg.probe_train_per_class; cfg.classes], derive_seed(seed, 2));
    let test = gap_mixture(cfg, seed, vec![cfg.probe_test_per_class; cfg.classes], derive_seed(seed, 3));
    Ok((gen_mixture(&train)?, gen_mixture(&test)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapRow {
    pub method: &'static str,
    pub report: GapReport,
}

pub fn run_gap_study(cfg: &GapStudyConfig, seed: u64) -> Result<Vec<GapRow>> {
    let (ptrain, ptest) = gap_probe_sets(cfg, seed)?;
    let sl = |ds: &Dataset| -> Result<FeatureMap> {
        let sol = solve_maxmargin_qp(ds, &cfg.qp)?;
        if !sol.converged {
            log::warn!("max-margin solve stopped at the sweep cap");
        }
        Ok(sol.feature_map)
    };
    let ssl = |ds: &Dataset| -> Result<FeatureMap> {
        Ok(solve_spectral(&empirical_second_moment(ds)?, cfg.ssl_rank, &cfg.eigen)?.0)
    };
    let accuracy = |fm: &FeatureMap| -> Result<f64> { Ok(train_probe(fm, &ptrain, &ptest, &cfg.probe)?.top1_accuracy) };

    let mut rows = Vec::new();
    for (i, &r) in cfg.ratios.iter().enumerate() {
        let pair = GapPair::generate(cfg, seed, i)?;
        let n = pair.imbalanced.n();
        for (method, solve) in [("sl", &sl as &dyn Fn(&Dataset) -> Result<FeatureMap>), ("ssl", &ssl)] {
            let a_bal = accuracy(&solve(&pair.balanced)?)?;
            let a_imb = accuracy(&solve(&pair.imbalanced)?)?;
            rows.push(GapRow {
                method,
                report: relative_gap(a_bal, a_imb, n, r)?,
            });
        }
    }
    Ok(rows)
}

fn gap_study_trial(cfg: &GapStudyConfig, seed: u64) -> Result<TrialOutput> {
    let mut table = Table::new(&["method", "r", "n", "a_balanced", "a_imbalanced", "delta"]);
    let mut metrics = Vec::new();
    for row in run_gap_study(cfg, seed)? {
        let g = &row.report;
        table.rows.push(vec![
            row.method.to_string(),
            fmt(g.r),
            g.n.to_string(),
            fmt(g.a_balanced),
            fmt(g.a_imbalanced),
            fmt(g.delta),
        ]);
        let group = format!("{} r={}", row.method, g.r);
        metrics.push(metric(&group, "a_balanced", g.a_balanced));
        metrics.push(metric(&group, "a_imbalanced", g.a_imbalanced));
        metrics.push(metric(&group, "delta", g.delta));
    }
    Ok(TrialOutput {
        table,
        metrics,
        files: Vec::new(),
    })
}
