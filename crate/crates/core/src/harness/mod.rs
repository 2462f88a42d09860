//! Experiment orchestration: configuration, ingestion, baselines, training,
//! evaluation, analyses and report files.

pub mod analysis;
pub mod baselines;
pub mod config;
pub mod data;
pub mod report;

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use analysis::{
    above_diagonal_fraction, behavior_analysis, export_area_distribution, margin_scatter, BehaviorReport, Split,
};
pub use baselines::run_baselines;
pub use config::{BaselineConfig, ExperimentConfig};
pub use data::{filter_training_pools, load_pools, DatasetShape, PoolRecord};
pub use report::{emit_report, ReportFormat, ReportRow};

use crate::env::EnvError;
use crate::metrics::{MetricsError, MetricsReport};
use crate::policy::{distribution, AnchorSet, PolicyError, PolicyParams};
use crate::query::{PreparedQuery, QueryError};
use crate::reward::{ablation_mask, RewardError, RewardWeights};
use crate::scoring::ScoringError;
use crate::trainer::{
    evaluate_with_ks, synthetic_eval_set, train, DatasetStream, QueryRecord, QueryStream, SyntheticStream,
    TrainConfig, TrainError, TrainingCurve,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("row {row}: bad field {field}")]
    SchemaError { row: usize, field: String },
    #[error("row {row}: {field} has dimension {got}, expected {expected}")]
    DimensionMismatch { row: usize, field: String, expected: usize, got: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("split {0} has no queries")]
    EmptySplit(&'static str),
    #[error("output directory {0} is in use (remove {0}/.lock if stale)")]
    OutputLocked(PathBuf),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.display().to_string(), source }
    }
}

/// Exclusive ownership of an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, HarnessError> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(HarnessError::OutputLocked(dir.to_path_buf())),
            Err(e) => Err(HarnessError::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// A validated config plus the derived anchor set.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub anchors: AnchorSet,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let anchors = cfg.anchors.build(cfg.env.height, cfg.env.width)?;
        Ok(Self { cfg, anchors })
    }

    pub fn shape(&self) -> DatasetShape {
        DatasetShape { dim: self.cfg.env.dim, width: self.cfg.env.width, height: self.cfg.env.height }
    }

    fn load_prepared(&self, path: &Path, training: bool) -> Result<Vec<PreparedQuery>, HarnessError> {
        let mut records = load_pools(path, &self.shape())?;
        if training {
            records = filter_training_pools(records).0;
            if records.is_empty() {
                return Err(HarnessError::EmptyDataset);
            }
        }
        records.iter().map(|r| r.prepare(&self.shape())).collect()
    }

    /// The configured dataset, or `n_eval` held-out synthetic instances.
    pub fn eval_queries(&self) -> Result<Vec<PreparedQuery>, HarnessError> {
        match &self.cfg.dataset {
            Some(p) => self.load_prepared(p, false),
            None => Ok(synthetic_eval_set(&self.cfg.env, &self.anchors, self.cfg.n_eval)?),
        }
    }

    pub fn training_stream(&self) -> Result<Box<dyn QueryStream>, HarnessError> {
        match self.cfg.train_dataset.as_ref().or(self.cfg.dataset.as_ref()) {
            Some(p) => Ok(Box::new(DatasetStream::new(self.load_prepared(p, true)?, self.cfg.train.seed)?)),
            None => Ok(Box::new(SyntheticStream::new(self.cfg.env.clone(), self.anchors.clone()))),
        }
    }

    /// Trains from zero with the configured settings and reward `weights`.
    pub fn train_with(
        &self,
        weights: RewardWeights,
        eval: Option<&[PreparedQuery]>,
    ) -> Result<(PolicyParams, TrainingCurve), HarnessError> {
        let cfg = TrainConfig { weights, ..self.cfg.train.clone() };
        let mut stream = self.training_stream()?;
        Ok(train(stream.as_mut(), &cfg, eval)?)
    }

    pub fn train(&self, eval: Option<&[PreparedQuery]>) -> Result<(PolicyParams, TrainingCurve), HarnessError> {
        self.train_with(self.cfg.train.weights, eval)
    }

    /// Greedy evaluation at the configured cutoffs.
    pub fn evaluate(
        &self,
        params: &PolicyParams,
        queries: &[PreparedQuery],
    ) -> Result<(MetricsReport, Vec<QueryRecord>), HarnessError> {
        Ok(evaluate_with_ks(queries, &self.cfg.eval_ks, &self.cfg.cond_ks, |_, q| {
            Ok(q.action(distribution(params, q.features()).greedy())?)
        })?)
    }
}

/// One row of the reward ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: String,
    pub mrr: f64,
    pub above_diagonal: Option<f64>,
    pub theta: Vec<f64>,
    #[serde(skip)]
    pub records: Vec<QueryRecord>,
}

/// Trains one policy per configured mask on identical seeds and streams and
/// evaluates each greedily on `queries`.
pub fn run_ablation(exp: &Experiment, queries: &[PreparedQuery]) -> Result<Vec<AblationRow>, HarnessError> {
    exp.cfg
        .ablation_masks
        .iter()
        .map(|mask| {
            let weights = RewardWeights::uniform().masked(ablation_mask(mask)?)?;
            let (params, _) = exp.train_with(weights, None)?;
            let (rep, records) = exp.evaluate(&params, queries)?;
            log::info!("ablation {mask}: mrr {:.4}", rep.mrr);
            Ok(AblationRow {
                mask: mask.clone(),
                mrr: rep.mrr,
                above_diagonal: above_diagonal_fraction(&records),
                theta: params.theta,
                records,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("mask,mrr,above_diagonal\n");
    for r in rows {
        let above = r.above_diagonal.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{}\n", r.mask, r.mrr, above));
    }
    s
}
