use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::env::EnvConfig;
use crate::metrics::{COND_BASE_K, DEFAULT_COND_KS, DEFAULT_RECALL_KS};
use crate::policy::AnchorSchedule;
use crate::reward::{ablation_mask, ABLATION_MASKS};
use crate::trainer::TrainConfig;

fn default_eval_ks() -> Vec<usize> {
    DEFAULT_RECALL_KS.to_vec()
}
fn default_cond_ks() -> Vec<usize> {
    DEFAULT_COND_KS.to_vec()
}
fn default_n_eval() -> usize {
    500
}
fn default_masks() -> Vec<String> {
    ABLATION_MASKS.iter().map(|(n, _)| n.to_string()).collect()
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn yes() -> bool {
    true
}
fn default_center_fraction() -> f64 {
    0.5
}
fn default_random_draws() -> usize {
    5
}

/// Which heuristic baselines to run and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    #[serde(default = "yes")]
    pub full: bool,
    #[serde(default = "yes")]
    pub center: bool,
    #[serde(default = "yes")]
    pub random: bool,
    #[serde(default = "default_center_fraction")]
    pub center_fraction: f64,
    /// Random-crop reports are averaged over this many independent draws.
    #[serde(default = "default_random_draws")]
    pub random_draws: usize,
    /// Newline-delimited area fractions; uniform areas when absent.
    #[serde(default)]
    pub area_file: Option<PathBuf>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            full: true,
            center: true,
            random: true,
            center_fraction: default_center_fraction(),
            random_draws: default_random_draws(),
            area_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub anchors: AnchorSchedule,
    #[serde(default = "default_eval_ks")]
    pub eval_ks: Vec<usize>,
    #[serde(default = "default_cond_ks")]
    pub cond_ks: Vec<usize>,
    /// Size of the held-out synthetic evaluation set.
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    #[serde(default)]
    pub baselines: BaselineConfig,
    #[serde(default = "default_masks")]
    pub ablation_masks: Vec<String>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Pool records to evaluate on instead of synthetic instances.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Pool records to train on; defaults to `dataset`.
    #[serde(default)]
    pub train_dataset: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        Ok(cfg)
    }

    /// Sets the environment and training seeds together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.env.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.env.validate()?;
        self.train.validate()?;
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        for &k in self.eval_ks.iter().chain(&self.cond_ks) {
            if k == 0 || k > self.env.pool_size {
                return bad(format!("cutoff {k} outside 1..={}", self.env.pool_size));
            }
        }
        if self.cond_ks.iter().any(|&k| k > COND_BASE_K) {
            return bad(format!("conditional cutoffs must not exceed {COND_BASE_K}"));
        }
        if self.n_eval == 0 {
            return bad("n_eval must be positive".into());
        }
        let b = &self.baselines;
        if !(b.center_fraction > 0.0 && b.center_fraction <= 1.0) {
            return bad("center_fraction must be in (0, 1]".into());
        }
        if b.random && b.random_draws == 0 {
            return bad("random_draws must be positive".into());
        }
        for m in &self.ablation_masks {
            ablation_mask(m)?;
        }
        for p in [&self.dataset, &self.train_dataset, &b.area_file].into_iter().flatten() {
            if !p.exists() {
                return bad(format!("{} does not exist", p.display()));
            }
        }
        Ok(())
    }
}
