//! Rewards for cropping actions, measured as ranking improvement over the
//! full-image baseline ranking.
//!
//! A `REGION` action earns a weighted sum of four deltas (reciprocal rank,
//! NDCG, log-rank ratio and score margin) minus a box penalty. A `FULL`
//! action earns 1 exactly when the baseline already ranks a positive first.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{BBox, Decision};
use crate::metrics::{ndcg, reciprocal_rank};
use crate::scoring::RankOutcome;

/// Penalty for malformed or out-of-bounds boxes.
pub const DEFAULT_ETA: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("ranking has no positive candidate")]
    MissingPositive,
    #[error("pool lacks a positive or a negative candidate, margin undefined")]
    MissingClass,
    #[error("reward weights must be non-negative and sum to 1, got {0:?}")]
    InvalidWeights([f64; 4]),
    #[error("unknown ablation mask {0:?}")]
    UnknownMask(String),
}

/// Weights on (ΔMRR, ΔNDCG, ΔRank, ΔMargin); non-negative, summing to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct RewardWeights([f64; 4]);

impl RewardWeights {
    pub fn new(w: [f64; 4]) -> Result<Self, RewardError> {
        let sum: f64 = w.iter().sum();
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(RewardError::InvalidWeights(w));
        }
        Ok(Self(w))
    }

    pub fn uniform() -> Self {
        Self([0.25; 4])
    }

    pub fn as_array(&self) -> [f64; 4] {
        self.0
    }

    /// Keeps the weights selected by `mask` and renormalises them to sum to 1.
    pub fn masked(&self, mask: [bool; 4]) -> Result<Self, RewardError> {
        let kept: Vec<f64> = self.0.iter().zip(mask).map(|(&w, m)| if m { w } else { 0.0 }).collect();
        let sum: f64 = kept.iter().sum();
        if sum <= 0.0 {
            return Err(RewardError::InvalidWeights([kept[0], kept[1], kept[2], kept[3]]));
        }
        Self::new([kept[0] / sum, kept[1] / sum, kept[2] / sum, kept[3] / sum])
            .or_else(|_| {
                // renormalisation can leave the sum a few ulps off 1; absorb it in the last active weight
                let mut w = [kept[0] / sum, kept[1] / sum, kept[2] / sum, kept[3] / sum];
                let last = (0..4).rev().find(|&i| mask[i]).expect("non-empty mask");
                let rest: f64 = (0..4).filter(|&i| i != last).map(|i| w[i]).sum();
                w[last] = 1.0 - rest;
                Self::new(w)
            })
    }
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self::uniform()
    }
}

impl TryFrom<[f64; 4]> for RewardWeights {
    type Error = RewardError;
    fn try_from(w: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(w)
    }
}

impl From<RewardWeights> for [f64; 4] {
    fn from(w: RewardWeights) -> Self {
        w.0
    }
}

/// Named ablation masks over the four reward terms, each adding one component.
pub const ABLATION_MASKS: [(&str, [bool; 4]); 4] = [
    ("mrr", [true, false, false, false]),
    ("mrr+ndcg", [true, true, false, false]),
    ("mrr+ndcg+rank", [true, true, true, false]),
    ("full", [true, true, true, true]),
];

pub fn ablation_mask(name: &str) -> Result<[bool; 4], RewardError> {
    ABLATION_MASKS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, m)| *m)
        .ok_or_else(|| RewardError::UnknownMask(name.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub decision: Decision,
    pub d_mrr: f64,
    pub d_ndcg: f64,
    pub d_rank: f64,
    pub d_margin: f64,
    pub penalty: f64,
    pub total: f64,
}

pub fn delta_mrr(base: &RankOutcome, act: &RankOutcome) -> f64 {
    reciprocal_rank(&act.ranking) - reciprocal_rank(&base.ranking)
}

pub fn delta_ndcg(base: &RankOutcome, act: &RankOutcome) -> f64 {
    ndcg(&act.ranking) - ndcg(&base.ranking)
}

/// `ln((base_rank + 1) / (act_rank + 1))`.
pub fn delta_rank(base_rank: Option<usize>, act_rank: Option<usize>) -> Result<f64, RewardError> {
    match (base_rank, act_rank) {
        // difference of logs keeps the delta exactly antisymmetric
        (Some(b), Some(a)) if b >= 1 && a >= 1 => Ok(((b + 1) as f64).ln() - ((a + 1) as f64).ln()),
        _ => Err(RewardError::MissingPositive),
    }
}

pub fn delta_margin(base: &RankOutcome, act: &RankOutcome) -> Result<f64, RewardError> {
    match (base.margin, act.margin) {
        (Some(b), Some(a)) => Ok(a - b),
        _ => Err(RewardError::MissingClass),
    }
}

/// `eta` when the box is absent, malformed, or flagged as out of bounds; 0 otherwise.
pub fn box_penalty(bbox: Option<&BBox>, malformed: bool, eta: f64) -> f64 {
    match bbox {
        Some(b) if b.is_well_formed() && !malformed => 0.0,
        _ => eta,
    }
}

pub fn region_reward(
    base: &RankOutcome,
    act: &RankOutcome,
    weights: &RewardWeights,
    penalty: f64,
) -> Result<RewardBreakdown, RewardError> {
    let d_rank = delta_rank(base.rank, act.rank)?;
    let d_margin = delta_margin(base, act)?;
    let d_mrr = delta_mrr(base, act);
    let d_ndcg = delta_ndcg(base, act);
    let [w1, w2, w3, w4] = weights.0;
    Ok(RewardBreakdown {
        decision: Decision::Region,
        d_mrr,
        d_ndcg,
        d_rank,
        d_margin,
        penalty,
        total: w1 * d_mrr + w2 * d_ndcg + w3 * d_rank + w4 * d_margin - penalty,
    })
}

pub fn full_reward(base: &RankOutcome) -> Result<RewardBreakdown, RewardError> {
    let rank = base.rank.ok_or(RewardError::MissingPositive)?;
    Ok(RewardBreakdown {
        decision: Decision::Full,
        d_mrr: 0.0,
        d_ndcg: 0.0,
        d_rank: 0.0,
        d_margin: 0.0,
        penalty: 0.0,
        total: if rank == 1 { 1.0 } else { 0.0 },
    })
}
