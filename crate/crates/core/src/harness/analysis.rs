use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::env::{AreaSampler, Decision};
use crate::policy::{distribution, PolicyParams};
use crate::query::PreparedQuery;
use crate::trainer::QueryRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// The full-image query already ranks the positive first.
    Rank1,
    RankGt1,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Rank1 => "rank1",
            Split::RankGt1 => "rank_gt1",
        }
    }
}

/// Cropping rate and rank movement within one split. Fractions are over the
/// split's own queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorReport {
    pub split: Split,
    pub n: usize,
    pub rc_rate: f64,
    pub help: f64,
    pub hurt: f64,
    pub no_change: f64,
}

fn split_report(split: Split, records: &[&QueryRecord]) -> Result<BehaviorReport, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptySplit(split.name()));
    }
    let (mut rc, mut help, mut hurt) = (0usize, 0usize, 0usize);
    for r in records {
        if r.decision() == Decision::Region {
            rc += 1;
            match (r.post_rank, r.baseline_rank) {
                (Some(a), Some(b)) if a < b => help += 1,
                (Some(a), Some(b)) if a > b => hurt += 1,
                _ => {}
            }
        }
    }
    let n = records.len();
    let frac = |c: usize| c as f64 / n as f64;
    Ok(BehaviorReport {
        split,
        n,
        rc_rate: frac(rc),
        help: frac(help),
        hurt: frac(hurt),
        no_change: frac(n - help - hurt),
    })
}

/// Splits records by baseline rank (1 vs > 1) and reports each split.
/// Records without a positive belong to neither split. FULL actions count as
/// no change.
pub fn behavior_analysis(
    records: &[QueryRecord],
) -> (Result<BehaviorReport, HarnessError>, Result<BehaviorReport, HarnessError>) {
    let rank1: Vec<_> = records.iter().filter(|r| r.baseline_rank == Some(1)).collect();
    let rest: Vec<_> = records.iter().filter(|r| r.baseline_rank.is_some_and(|k| k > 1)).collect();
    (split_report(Split::Rank1, &rank1), split_report(Split::RankGt1, &rest))
}

pub fn behavior_csv(records: &[QueryRecord]) -> String {
    let mut s = String::from("split,n,rc_rate,help,hurt,no_change\n");
    let (a, b) = behavior_analysis(records);
    for r in [a, b] {
        match r {
            Ok(r) => s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.split.name(),
                r.n,
                r.rc_rate,
                r.help,
                r.hurt,
                r.no_change
            )),
            Err(e) => log::warn!("{e}"),
        }
    }
    s
}

fn scatter_rows(records: &[QueryRecord]) -> impl Iterator<Item = (&QueryRecord, f64, f64)> {
    records.iter().filter(|r| r.decision() == Decision::Region).filter_map(|r| match (r.baseline_margin, r.post_margin) {
        (Some(b), Some(a)) => Some((r, b, a)),
        _ => None,
    })
}

/// CSV of margins before and after cropping, REGION decisions only.
pub fn margin_scatter_csv(records: &[QueryRecord]) -> String {
    let mut s = String::from("query_id,margin_before,margin_after,decision\n");
    for (r, before, after) in scatter_rows(records) {
        s.push_str(&format!("{},{},{},{}\n", r.query_id, before, after, r.decision()));
    }
    s
}

pub fn margin_scatter(records: &[QueryRecord], path: &Path) -> Result<(), HarnessError> {
    std::fs::write(path, margin_scatter_csv(records)).map_err(|e| HarnessError::io(path, e))
}

/// Fraction of scatter points with `margin_after > margin_before`.
pub fn above_diagonal_fraction(records: &[QueryRecord]) -> Option<f64> {
    let (mut n, mut above) = (0usize, 0usize);
    for (_, before, after) in scatter_rows(records) {
        n += 1;
        above += usize::from(after > before);
    }
    (n > 0).then(|| above as f64 / n as f64)
}

/// Area fractions of the greedy policy's REGION choices, in query order.
pub fn greedy_region_areas(params: &PolicyParams, queries: &[PreparedQuery]) -> Vec<f64> {
    queries
        .iter()
        .filter_map(|q| {
            let i = distribution(params, q.features()).greedy();
            (i > 0).then(|| q.anchors()[i - 1].area_fraction(q.width, q.height))
        })
        .collect()
}

/// Writes the greedy REGION area fractions, one per line, and returns them.
/// A FULL-only policy yields an empty file and a warning.
pub fn export_area_distribution(
    params: &PolicyParams,
    queries: &[PreparedQuery],
    path: &Path,
) -> Result<Vec<f64>, HarnessError> {
    let areas = greedy_region_areas(params, queries);
    if areas.is_empty() {
        log::warn!("policy never crops on these queries; writing an empty area distribution");
    }
    let text: String = areas.iter().map(|a| format!("{a}\n")).collect();
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))?;
    Ok(areas)
}

pub fn read_area_distribution(path: &Path) -> Result<AreaSampler, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let values = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim().parse::<f64>().map_err(|_| HarnessError::SchemaError { row: i + 1, field: "area".into() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AreaSampler::empirical(values)?)
}
