//! The experiment configuration file.
//!
//! One TOML file describes a whole experiment: the dataset to generate, how
//! to split it, how to train, and what to evaluate. Every field has a
//! default, so a config names only what it overrides; unknown keys are
//! rejected with an error that names the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vibmil::pipeline::TrainConfig;
use vibmil::seed::mix;
use vibmil::synthgen::GeneratorConfig;

use crate::CliError;

/// Top-level experiment description.
///
/// ```toml
/// out_dir = "runs/demo"
/// seed = 17
///
/// [dataset]
/// n_bags = 200
///
/// [train.stage1]
/// beta = 0.1
///
/// [eval]
/// knn_k = 5
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Where reports and checkpoints are written (`--out` overrides).
    pub out_dir: PathBuf,
    /// Global seed; when set it re-seeds every seeded component below.
    /// `--seed` on the command line takes precedence over this field.
    pub seed: Option<u64>,
    pub dataset: GeneratorConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            out_dir: PathBuf::from("runs/default"),
            seed: None,
            dataset: GeneratorConfig::default(),
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Train/validation/test split of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Bag fractions per split; must sum to 1. Exactly three splits
    /// (train, validation, test) are expected by `train`.
    pub fractions: Vec<f64>,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> SplitConfig {
        SplitConfig { fractions: vec![0.7, 0.15, 0.15], seed: 911 }
    }
}

/// Evaluation settings for `eval` reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Neighbor count for the KNN probes.
    pub knn_k: usize,
    /// Instances sampled per label for the v-score probe.
    pub v_per_class: usize,
    /// Cluster count for the v-score probe; 0 means one per instance label.
    pub v_clusters: usize,
    /// Metric toggles. Disabled metrics leave their report cells empty.
    pub auc: bool,
    pub f1: bool,
    pub v_score: bool,
    pub gate_recall: bool,
    pub knn: bool,
    /// Seed for evaluation-time sampling and evaluation-trained heads.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> EvalConfig {
        EvalConfig {
            knn_k: 5,
            v_per_class: 200,
            v_clusters: 0,
            auc: true,
            f1: true,
            v_score: true,
            gate_recall: true,
            knn: true,
            seed: 77,
        }
    }
}

impl ExperimentConfig {
    /// Loads a config file and applies the seed override: `--seed` wins
    /// over the file's `seed`, which wins over the per-component seeds.
    pub fn load(path: &Path, seed_flag: Option<u64>) -> Result<ExperimentConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))?;
        if let Some(s) = seed_flag {
            cfg.seed = Some(s);
        }
        if let Some(s) = cfg.seed {
            cfg.apply_seed(s);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Re-seeds every seeded component from one global seed, using disjoint
    /// derived streams so no two components share a seed.
    fn apply_seed(&mut self, s: u64) {
        self.dataset.master_seed = s;
        self.train.init_seed = s;
        self.train.stage1.seed = mix(s, 1);
        self.train.stage2.seed = mix(s, 2);
        self.train.stage3.seed = mix(s, 3);
        self.split.seed = mix(s, 4);
        self.eval.seed = mix(s, 5);
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.split.fractions.len() != 3 {
            return Err(CliError::Config(format!(
                "split.fractions must name exactly 3 splits (train, val, test), got {}",
                self.split.fractions.len()
            )));
        }
        if self.eval.knn_k == 0 {
            return Err(CliError::Config("eval.knn_k must be at least 1".into()));
        }
        if self.eval.v_per_class == 0 {
            return Err(CliError::Config("eval.v_per_class must be at least 1".into()));
        }
        Ok(())
    }

    /// Cluster count for the v-score probe given the label count in play.
    pub fn v_clusters_or(&self, n_labels: usize) -> usize {
        if self.eval.v_clusters == 0 {
            n_labels
        } else {
            self.eval.v_clusters
        }
    }
}
