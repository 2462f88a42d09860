//! The fixed scoring model: L2 normalisation, candidate image+text fusion,
//! cosine scoring and ranking with positive/negative statistics.
//!
//! Scores are `f64`. Ties in the induced ranking are broken by ascending
//! candidate index, with exact equality (no epsilon).

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{first_positive_rank, LabeledRanking};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("cannot normalise a zero vector")]
    ZeroVector,
    #[error("embedding has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding has non-finite entries")]
    NonFinite,
    #[error("invalid candidate pool: {0}")]
    InvalidPool(String),
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>, ScoringError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(ScoringError::NonFinite);
    }
    let norm = l2_norm(v);
    if norm == 0.0 {
        return Err(ScoringError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// One retrieved candidate: image embedding, optional text embedding and a
/// binary relevance label. Embeddings are raw (not normalised).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub image_emb: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_emb: Option<Vec<f64>>,
    pub label: u8,
}

/// `normalize(image + [text present] * text)`.
pub fn fuse_candidate(c: &Candidate) -> Result<Vec<f64>, ScoringError> {
    match &c.text_emb {
        None => normalize(&c.image_emb),
        Some(text) => {
            if text.len() != c.image_emb.len() {
                return Err(ScoringError::DimensionMismatch {
                    expected: c.image_emb.len(),
                    got: text.len(),
                });
            }
            let sum: Vec<f64> = c.image_emb.iter().zip(text).map(|(a, b)| a + b).collect();
            normalize(&sum)
        }
    }
}

/// The fixed re-ranking set for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    candidates: Vec<Candidate>,
}

impl CandidatePool {
    pub fn new(candidates: Vec<Candidate>) -> Result<Self, ScoringError> {
        if candidates.len() < 2 {
            return Err(ScoringError::InvalidPool(format!(
                "pool has {} candidates, need at least 2",
                candidates.len()
            )));
        }
        let dim = candidates[0].image_emb.len();
        let mut ids = HashSet::new();
        for c in &candidates {
            if !ids.insert(c.id.as_str()) {
                return Err(ScoringError::InvalidPool(format!("duplicate id {:?}", c.id)));
            }
            if c.label > 1 {
                return Err(ScoringError::InvalidPool(format!(
                    "candidate {:?} has non-binary label {}",
                    c.id, c.label
                )));
            }
            for e in std::iter::once(&c.image_emb).chain(c.text_emb.as_ref()) {
                if e.len() != dim {
                    return Err(ScoringError::DimensionMismatch { expected: dim, got: e.len() });
                }
                if e.iter().all(|&x| x == 0.0) {
                    return Err(ScoringError::InvalidPool(format!(
                        "candidate {:?} has a zero embedding",
                        c.id
                    )));
                }
            }
        }
        Ok(Self { candidates })
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.candidates[0].image_emb.len()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.candidates.iter().map(|c| c.label).collect()
    }

    pub fn num_positives(&self) -> usize {
        self.candidates.iter().filter(|c| c.label == 1).count()
    }

    /// Fused unit embeddings, one per candidate.
    pub fn fused(&self) -> Result<Vec<Vec<f64>>, ScoringError> {
        self.candidates.iter().map(fuse_candidate).collect()
    }
}

/// Cosine scores of a unit query against every candidate of the pool.
pub fn score_pool(query: &[f64], pool: &CandidatePool) -> Result<Vec<f64>, ScoringError> {
    if query.len() != pool.dim() {
        return Err(ScoringError::DimensionMismatch { expected: pool.dim(), got: query.len() });
    }
    Ok(score_fused(query, &pool.fused()?))
}

/// Scores against already-fused unit candidate embeddings.
///
/// A zero query (a crop with no signal) scores every candidate 0.
pub fn score_fused(query: &[f64], fused: &[Vec<f64>]) -> Vec<f64> {
    fused.iter().map(|v| dot(query, v)).collect()
}

/// The ranking induced by a score vector, with first-positive rank and
/// best-positive / best-negative scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOutcome {
    pub ranking: LabeledRanking,
    pub scores: Vec<f64>,
    pub rank: Option<usize>,
    pub pos: Option<f64>,
    pub neg: Option<f64>,
    pub margin: Option<f64>,
}

/// Stable descending sort of `scores`; equal scores keep ascending index order.
///
/// # Panics
///
/// If `scores` and `labels` differ in length or a label is not 0/1.
pub fn induce_ranking(scores: &[f64], labels: &[u8]) -> RankOutcome {
    assert_eq!(scores.len(), labels.len(), "scores and labels must be aligned");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let class_max = |class: u8| {
        scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == class)
            .map(|(&s, _)| s)
            .reduce(f64::max)
    };
    let pos = class_max(1);
    let neg = class_max(0);
    let ranking = LabeledRanking::new(order, labels.to_vec()).expect("labels must be binary");
    RankOutcome {
        rank: first_positive_rank(&ranking),
        ranking,
        scores: scores.to_vec(),
        pos,
        neg,
        margin: pos.zip(neg).map(|(p, n)| p - n),
    }
}
