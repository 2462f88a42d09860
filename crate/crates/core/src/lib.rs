//! Query-side region cropping for multi-modal re-ranking.
//!
//! A fixed cosine scoring model ranks a candidate pool against a query
//! image embedding. A stochastic policy decides whether to keep the full
//! query image or to crop a region before scoring, and is trained with a
//! decision-balanced group-relative policy gradient on a reward built from
//! ranking improvements over the full-image baseline.
//!
//! The crate is organised bottom-up:
//!
//! - [`metrics`]: reciprocal rank, NDCG, hit/recall@K and conditional recall.
//! - [`scoring`]: normalisation, candidate fusion, cosine scoring, rank statistics.
//! - [`env`]: feature grids, the crop operator, the synthetic environment and
//!   heuristic crop baselines.
//! - [`reward`]: ranking-improvement deltas and the composite reward.
//! - [`policy`]: anchor boxes and a linear-softmax cropping policy.
//! - [`trainer`]: group sampling, advantage normalisation, updates, evaluation.
//! - [`parser`]: the `FULL`/`REGION` text output format with `<tool_call>` blocks.
//! - [`harness`]: configuration, ingestion, baselines, analyses and reports.

pub mod env;
pub mod harness;
pub mod metrics;
pub mod parser;
pub mod policy;
pub mod query;
pub mod reward;
pub mod rng;
pub mod scoring;
pub mod trainer;

pub use env::{Action, BBox, Decision, EnvConfig, FeatureGrid, SyntheticInstance};
pub use metrics::{LabeledRanking, MetricsReport};
pub use policy::{AnchorSet, PolicyParams};
pub use query::PreparedQuery;
pub use reward::{RewardBreakdown, RewardWeights};
pub use scoring::{Candidate, CandidatePool, RankOutcome};
pub use trainer::TrainConfig;
