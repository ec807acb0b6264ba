//! Experiment configuration files (TOML) and their canonical hash.

use std::path::{Path, PathBuf};

use imbalance_core::datagen::ProfileShape;
use imbalance_core::eval::ProbeConfig;
use imbalance_core::kde::{Bandwidth, BandwidthRule, KdeConfig};
use imbalance_core::linalg::EigenOptions;
use imbalance_core::maxmargin::QpOptions;
use imbalance_core::sam::SamConfig;
use imbalance_core::theory::SweepTemplate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ToyTheorem,
    RwsamPipeline,
    GapStudy,
    LemmaChecks,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::ToyTheorem => "toy-theorem",
            ExperimentKind::RwsamPipeline => "rwsam-pipeline",
            ExperimentKind::GapStudy => "gap-study",
            ExperimentKind::LemmaChecks => "lemma-checks",
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

fn one() -> usize {
    1
}

/// Top-level config. Only the section matching `kind` may be present;
/// a missing section means all defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "one")]
    pub trial_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy_theorem: Option<ToyTheoremConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rwsam: Option<RwsamConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_study: Option<GapStudyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lemma_checks: Option<LemmaConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyTheoremConfig {
    pub d_grid: Vec<usize>,
    /// `n1 = n2`; `n3 = ceil(d^{1/5})`.
    pub n_frequent: usize,
    pub ssl_rank: usize,
    pub qp: QpOptions,
    pub eigen: EigenOptions,
}

impl Default for ToyTheoremConfig {
    fn default() -> Self {
        ToyTheoremConfig {
            d_grid: vec![256, 1024, 4096],
            n_frequent: 2000,
            ssl_rank: 2,
            qp: QpOptions::default(),
            eigen: EigenOptions::default(),
        }
    }
}

impl ToyTheoremConfig {
    pub fn template(&self) -> SweepTemplate {
        SweepTemplate {
            n_frequent: self.n_frequent,
            ssl_rank: self.ssl_rank,
            qp: self.qp.clone(),
            eigen: self.eigen.clone(),
        }
    }
}

/// Step-imbalanced Gaussian mixture pre-trained with the positive-pair
/// objective, compared across SGD, SAM and reweighted SAM. The `seed`
/// fields of the optimizer sections are replaced by per-trial seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RwsamConfig {
    pub dim: usize,
    pub frequent_classes: usize,
    pub rare_classes: usize,
    pub n_frequent: usize,
    pub n_rare: usize,
    /// Mean norm of the frequent classes.
    pub frequent_scale: f64,
    /// Mean norm of the rare classes.
    pub rare_scale: f64,
    pub noise_scale: f64,
    pub heldout_per_class: usize,
    pub rank: usize,
    pub perturb_scale: f64,
    pub init_scale: f64,
    /// Plain training before the weights are computed. The SGD baseline
    /// runs `stage1.steps + stage2.steps` steps with these settings.
    pub stage1: SamConfig,
    pub stage2: SamConfig,
    pub kde: KdeConfig,
    /// Per-class size of the balanced probe train and test sets; 0 skips
    /// the probe.
    pub probe_per_class: usize,
    pub probe: ProbeConfig,
}

impl Default for RwsamConfig {
    fn default() -> Self {
        let stage = SamConfig {
            sam_radius_rho: 1.0,
            learning_rate: 0.01,
            steps: 1500,
            batch_size: 128,
            ..SamConfig::default()
        };
        RwsamConfig {
            dim: 128,
            frequent_classes: 5,
            rare_classes: 5,
            n_frequent: 500,
            n_rare: 5,
            frequent_scale: 4.0,
            rare_scale: 20.0,
            noise_scale: 1.0,
            heldout_per_class: 200,
            rank: 10,
            perturb_scale: 0.05,
            init_scale: 0.1,
            stage1: stage.clone(),
            stage2: stage,
            kde: KdeConfig::new(Bandwidth::Rule(BandwidthRule::MedianHeuristic), 1.2),
            probe_per_class: 100,
            probe: ProbeConfig::default(),
        }
    }
}

/// Paired balanced/imbalanced pre-training sets of equal size; features
/// from each are probed on the same balanced data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapStudyConfig {
    pub dim: usize,
    pub classes: usize,
    /// Count of the most frequent class in the imbalanced set.
    pub base_count: usize,
    pub shape: ProfileShape,
    pub ratios: Vec<f64>,
    pub signal_scale: f64,
    pub noise_scale: f64,
    pub ssl_rank: usize,
    pub probe_train_per_class: usize,
    pub probe_test_per_class: usize,
    pub qp: QpOptions,
    pub eigen: EigenOptions,
    pub probe: ProbeConfig,
}

impl Default for GapStudyConfig {
    fn default() -> Self {
        GapStudyConfig {
            dim: 512,
            classes: 10,
            base_count: 100,
            shape: ProfileShape::Exponential,
            ratios: vec![0.1],
            signal_scale: 3.0,
            noise_scale: 1.0,
            ssl_rank: 10,
            probe_train_per_class: 50,
            probe_test_per_class: 100,
            qp: QpOptions::default(),
            eigen: EigenOptions::default(),
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LemmaConfig {
    pub d: usize,
    pub n_frequent: usize,
    /// Margin slack constant in `1 - c_m d^{-1/10}`.
    pub c_m: f64,
    /// Upper bound on `u^T M u` over unit `u` orthogonal to `e2`.
    pub c_u: f64,
    pub samples_u: usize,
}

impl Default for LemmaConfig {
    fn default() -> Self {
        LemmaConfig {
            d: 1024,
            n_frequent: 2000,
            c_m: 3.0,
            c_u: 2.0,
            samples_u: 100,
        }
    }
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            kind,
            master_seed: 0,
            output_dir: default_output_dir(),
            trial_count: 1,
            toy_theorem: None,
            rwsam: None,
            gap_study: None,
            lemma_checks: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.trial_count == 0 {
            return Err(CliError::Config("trial_count must be at least 1".into()));
        }
        let present = [
            (ExperimentKind::ToyTheorem, self.toy_theorem.is_some(), "toy_theorem"),
            (ExperimentKind::RwsamPipeline, self.rwsam.is_some(), "rwsam"),
            (ExperimentKind::GapStudy, self.gap_study.is_some(), "gap_study"),
            (ExperimentKind::LemmaChecks, self.lemma_checks.is_some(), "lemma_checks"),
        ];
        for (kind, is_set, section) in present {
            if is_set && kind != self.kind {
                return Err(CliError::Config(format!(
                    "section [{section}] does not belong to kind {}",
                    self.kind.name()
                )));
            }
        }
        match self.kind {
            ExperimentKind::ToyTheorem => {
                let t = self.toy_theorem();
                if t.d_grid.is_empty() || t.d_grid.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(CliError::Config("d_grid must be non-empty and strictly ascending".into()));
                }
                if t.d_grid[0] < 64 {
                    return Err(CliError::Config("d_grid values must be at least 64".into()));
                }
                if t.ssl_rank == 0 || t.ssl_rank > t.d_grid[0] {
                    return Err(CliError::Config("ssl_rank must be in 1..=min(d_grid)".into()));
                }
            }
            ExperimentKind::RwsamPipeline => {
                let r = self.rwsam();
                r.stage1.validate()?;
                r.stage2.validate()?;
                if r.frequent_classes == 0 || r.rare_classes == 0 || r.n_rare == 0 || r.n_rare >= r.n_frequent {
                    return Err(CliError::Config(
                        "rwsam needs frequent and rare classes with 0 < n_rare < n_frequent".into(),
                    ));
                }
                if r.rank == 0 || r.rank > r.dim || r.heldout_per_class == 0 {
                    return Err(CliError::Config("rank must be in 1..=dim and heldout_per_class positive".into()));
                }
            }
            ExperimentKind::GapStudy => {
                let g = self.gap_study();
                if g.ratios.is_empty() || g.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
                    return Err(CliError::Config("ratios must be non-empty and in (0, 1]".into()));
                }
                if g.classes < 2 || g.ssl_rank == 0 || g.ssl_rank > g.dim {
                    return Err(CliError::Config("gap study needs >= 2 classes and ssl_rank in 1..=dim".into()));
                }
                if g.probe_train_per_class == 0 || g.probe_test_per_class == 0 {
                    return Err(CliError::Config("probe set sizes must be positive".into()));
                }
            }
            ExperimentKind::LemmaChecks => {
                let l = self.lemma_checks();
                if l.d < 3 || l.n_frequent == 0 {
                    return Err(CliError::Config("lemma checks need d >= 3 and n_frequent >= 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn toy_theorem(&self) -> ToyTheoremConfig {
        self.toy_theorem.clone().unwrap_or_default()
    }

    pub fn rwsam(&self) -> RwsamConfig {
        self.rwsam.clone().unwrap_or_default()
    }

    pub fn gap_study(&self) -> GapStudyConfig {
        self.gap_study.clone().unwrap_or_default()
    }

    pub fn lemma_checks(&self) -> LemmaConfig {
        self.lemma_checks.clone().unwrap_or_default()
    }

    /// The config with the active section materialized, so an omitted
    /// section and an explicit all-defaults section hash the same.
    pub fn normalized(&self) -> ExperimentConfig {
        let mut out = ExperimentConfig::new(self.kind);
        out.master_seed = self.master_seed;
        out.output_dir = self.output_dir.clone();
        out.trial_count = self.trial_count;
        match self.kind {
            ExperimentKind::ToyTheorem => out.toy_theorem = Some(self.toy_theorem()),
            ExperimentKind::RwsamPipeline => out.rwsam = Some(self.rwsam()),
            ExperimentKind::GapStudy => out.gap_study = Some(self.gap_study()),
            ExperimentKind::LemmaChecks => out.lemma_checks = Some(self.lemma_checks()),
        }
        out
    }

    /// Compact JSON with sorted keys of the normalized config, excluding
    /// `output_dir`.
    pub fn canonical_json(&self) -> String {
        let mut value = serde_json::to_value(self.normalized()).expect("config serializes");
        if let serde_json::Value::Object(map) = &mut value {
            map.remove("output_dir");
        }
        // serde_json's default map is ordered by key.
        value.to_string()
    }

    /// SHA-256 of [`Self::canonical_json`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("kind = \"lemma-checks\"\n").unwrap();
        assert_eq!(cfg.lemma_checks(), LemmaConfig::default());
        assert_eq!(cfg.trial_count, 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("kind = \"toy-theorem\"\ntrials = 3\n").unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        let nested = "kind = \"toy-theorem\"\n[toy_theorem]\nd_grid = [64]\nbogus = 1\n";
        assert!(matches!(ExperimentConfig::from_toml(nested), Err(CliError::Config(_))));
    }

    #[test]
    fn foreign_section_is_rejected() {
        let text = "kind = \"toy-theorem\"\n[rwsam]\ndim = 8\n";
        assert!(matches!(ExperimentConfig::from_toml(text), Err(CliError::Config(_))));
    }

    #[test]
    fn hash_ignores_layout_and_explicit_defaults() {
        let a = ExperimentConfig::from_toml("kind = \"gap-study\"\nmaster_seed = 4\n").unwrap();
        let b = ExperimentConfig::from_toml(
            "master_seed   = 4\n\n# comment\nkind = \"gap-study\"\n[gap_study]\nclasses = 10\ndim = 512\n",
        )
        .unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::from_toml("kind = \"gap-study\"\nmaster_seed = 5\n").unwrap();
        assert_ne!(a.hash(), c.hash());
        let d = ExperimentConfig::from_toml("kind = \"gap-study\"\nmaster_seed = 4\n[gap_study]\nratios = [0.01]\n").unwrap();
        assert_ne!(a.hash(), d.hash());
    }

    #[test]
    fn output_dir_does_not_change_the_hash() {
        let a = ExperimentConfig::from_toml("kind = \"lemma-checks\"\noutput_dir = \"x\"\n").unwrap();
        let b = ExperimentConfig::from_toml("kind = \"lemma-checks\"\noutput_dir = \"y\"\n").unwrap();
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn bad_grid_is_a_config_error() {
        let text = "kind = \"toy-theorem\"\n[toy_theorem]\nd_grid = [1024, 256]\n";
        assert!(matches!(ExperimentConfig::from_toml(text), Err(CliError::Config(_))));
    }
}
