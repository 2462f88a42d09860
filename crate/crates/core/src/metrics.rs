//! Rank-quality metrics over binary-labelled rankings.
//!
//! All metrics take the full ranking (no cutoff) except the `@K` family.
//! Aggregates are macro-averages over queries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Recall cutoffs reported by default.
pub const DEFAULT_RECALL_KS: [usize; 4] = [1, 5, 10, 20];
/// Conditional-recall cutoffs reported by default.
pub const DEFAULT_COND_KS: [usize; 3] = [1, 5, 10];
/// Conditional recall is computed over queries whose positive is in the top 20.
pub const COND_BASE_K: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("invalid ranking: {0}")]
    InvalidRanking(String),
    #[error("no query has a positive in the top {COND_BASE_K}")]
    EmptyConditioningSet,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("hit sequences have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// An ordering of candidate indices (best first) with per-candidate labels.
///
/// `labels` is indexed by candidate index, not by position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledRanking {
    order: Vec<usize>,
    labels: Vec<u8>,
}

impl LabeledRanking {
    pub fn new(order: Vec<usize>, labels: Vec<u8>) -> Result<Self, MetricsError> {
        if order.len() != labels.len() {
            return Err(MetricsError::InvalidRanking(format!(
                "order has {} entries, labels {}",
                order.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(MetricsError::InvalidRanking(format!("label {bad} is not binary")));
        }
        let mut seen = vec![false; order.len()];
        for &idx in &order {
            if idx >= order.len() || seen[idx] {
                return Err(MetricsError::InvalidRanking(
                    "order is not a permutation of 0..N".into(),
                ));
            }
            seen[idx] = true;
        }
        Ok(Self { order, labels })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn num_positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// Labels in ranked order.
    fn ranked_labels(&self) -> impl Iterator<Item = u8> + '_ {
        self.order.iter().map(move |&i| self.labels[i])
    }
}

/// 1-based position of the first relevant candidate.
pub fn first_positive_rank(r: &LabeledRanking) -> Option<usize> {
    r.ranked_labels().position(|l| l == 1).map(|p| p + 1)
}

pub fn reciprocal_rank(r: &LabeledRanking) -> f64 {
    first_positive_rank(r).map_or(0.0, |rank| 1.0 / rank as f64)
}

/// Binary-gain NDCG with a `1 / log2(p + 1)` discount over the whole ranking.
pub fn ndcg(r: &LabeledRanking) -> f64 {
    let n_pos = r.num_positives();
    if n_pos == 0 {
        return 0.0;
    }
    let dcg: f64 = r
        .ranked_labels()
        .enumerate()
        .filter(|&(_, l)| l == 1)
        .map(|(p, _)| discount(p + 1))
        .sum();
    let idcg: f64 = (1..=n_pos).map(discount).sum();
    dcg / idcg
}

#[inline]
fn discount(position: usize) -> f64 {
    1.0 / ((position + 1) as f64).log2()
}

pub fn hit_at_k(r: &LabeledRanking, k: usize) -> bool {
    first_positive_rank(r).is_some_and(|rank| rank <= k)
}

/// `E[hit@K | hit@20 = 1]` over aligned per-query hit indicators.
pub fn cond_recall_at_k(hits_k: &[bool], hits_base: &[bool]) -> Result<f64, MetricsError> {
    if hits_k.len() != hits_base.len() {
        return Err(MetricsError::LengthMismatch(hits_k.len(), hits_base.len()));
    }
    let (num, den) = hits_k
        .iter()
        .zip(hits_base)
        .filter(|(_, &base)| base)
        .fold((0usize, 0usize), |(n, d), (&k, _)| (n + usize::from(k), d + 1));
    if den == 0 {
        return Err(MetricsError::EmptyConditioningSet);
    }
    Ok(num as f64 / den as f64)
}

/// Dataset-level metrics, one row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mrr: f64,
    pub ndcg: f64,
    pub recall_at: BTreeMap<usize, f64>,
    /// Empty when no query has a positive in the top 20.
    pub cond_recall_at: BTreeMap<usize, f64>,
    pub n_queries: usize,
}

impl MetricsReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }

    pub fn cond_recall(&self, k: usize) -> Option<f64> {
        self.cond_recall_at.get(&k).copied()
    }

    /// Field-wise mean of several reports over the same queries.
    pub fn mean_of(reports: &[MetricsReport]) -> Result<MetricsReport, MetricsError> {
        let first = reports.first().ok_or(MetricsError::EmptyDataset)?;
        let n = reports.len() as f64;
        let avg_map = |get: fn(&MetricsReport) -> &BTreeMap<usize, f64>| {
            get(first)
                .keys()
                .filter(|k| reports.iter().all(|r| get(r).contains_key(k)))
                .map(|&k| (k, reports.iter().map(|r| get(r)[&k]).sum::<f64>() / n))
                .collect::<BTreeMap<_, _>>()
        };
        Ok(MetricsReport {
            mrr: reports.iter().map(|r| r.mrr).sum::<f64>() / n,
            ndcg: reports.iter().map(|r| r.ndcg).sum::<f64>() / n,
            recall_at: avg_map(|r| &r.recall_at),
            cond_recall_at: avg_map(|r| &r.cond_recall_at),
            n_queries: first.n_queries,
        })
    }
}

/// Aggregates with the default cutoffs.
pub fn aggregate(rankings: &[LabeledRanking]) -> Result<MetricsReport, MetricsError> {
    aggregate_with(rankings, &DEFAULT_RECALL_KS, &DEFAULT_COND_KS)
}

pub fn aggregate_with(
    rankings: &[LabeledRanking],
    recall_ks: &[usize],
    cond_ks: &[usize],
) -> Result<MetricsReport, MetricsError> {
    if rankings.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let n = rankings.len() as f64;
    let mrr = rankings.iter().map(reciprocal_rank).sum::<f64>() / n;
    let ndcg_mean = rankings.iter().map(ndcg).sum::<f64>() / n;

    let hits = |k: usize| rankings.iter().map(|r| hit_at_k(r, k)).collect::<Vec<_>>();
    let recall_at = recall_ks
        .iter()
        .map(|&k| (k, hits(k).iter().filter(|&&h| h).count() as f64 / n))
        .collect();

    let base = hits(COND_BASE_K);
    let mut cond_recall_at = BTreeMap::new();
    for &k in cond_ks {
        match cond_recall_at_k(&hits(k), &base) {
            Ok(v) => {
                cond_recall_at.insert(k, v);
            }
            Err(MetricsError::EmptyConditioningSet) => break,
            Err(e) => return Err(e),
        }
    }

    Ok(MetricsReport {
        mrr,
        ndcg: ndcg_mean,
        recall_at,
        cond_recall_at,
        n_queries: rankings.len(),
    })
}
