//! Linear-softmax cropping policy over `{FULL} ∪ anchors`.
//!
//! Each action gets a feature vector `[question_cos, area_fraction,
//! full_indicator, bias]`; its logit is `θ · features`. The log-probability
//! gradient is the usual `f(a) − E_π[f]`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::BBox;

pub const FEATURE_DIM: usize = 4;
pub const FEATURE_NAMES: [&str; FEATURE_DIM] = ["question_cos", "area_fraction", "full_indicator", "bias"];
pub type Features = [f64; FEATURE_DIM];

/// Header line of serialised policy parameter files.
pub const POLICY_FILE_MAGIC: &str = "region-r1-policy v1";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("infeasible anchor schedule: {0}")]
    ConfigInfeasible(String),
    #[error("bad policy file: {0}")]
    BadPolicyFile(String),
    #[error("parameter vector has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered, duplicate-free candidate crop boxes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSet {
    boxes: Vec<BBox>,
}

impl AnchorSet {
    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

fn stride_offsets(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..extent).step_by(stride).map(|o| o.min(extent - size)).collect();
    out.dedup();
    out
}

/// Square-in-fraction boxes of size `round(scale·W) x round(scale·H)` at
/// stride offsets, clamped inside the grid; duplicates keep their first position.
pub fn build_anchors(height: usize, width: usize, scales: &[f64], stride: usize) -> Result<AnchorSet, PolicyError> {
    if height == 0 || width == 0 {
        return Err(PolicyError::ConfigInfeasible("grid must be non-empty".into()));
    }
    if stride == 0 {
        return Err(PolicyError::ConfigInfeasible("stride must be at least 1".into()));
    }
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
        return Err(PolicyError::ConfigInfeasible(format!("scale {s} outside (0, 1]")));
    }
    let mut boxes = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for &scale in scales {
        let bw = ((scale * width as f64).round() as usize).clamp(1, width);
        let bh = ((scale * height as f64).round() as usize).clamp(1, height);
        for y in stride_offsets(height, bh, stride) {
            for x in stride_offsets(width, bw, stride) {
                let b = BBox::new(x as i64, y as i64, (x + bw) as i64, (y + bh) as i64);
                if seen.insert(b) {
                    boxes.push(b);
                }
            }
        }
    }
    if boxes.is_empty() {
        return Err(PolicyError::ConfigInfeasible("no anchor fits the grid".into()));
    }
    Ok(AnchorSet { boxes })
}

fn default_scales() -> Vec<f64> {
    vec![0.25, 0.375, 0.5, 0.75, 1.0]
}
fn default_stride() -> usize {
    2
}

/// Scale/stride schedule for anchor generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSchedule {
    #[serde(default = "default_scales")]
    pub scales: Vec<f64>,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

impl Default for AnchorSchedule {
    fn default() -> Self {
        Self { scales: default_scales(), stride: default_stride() }
    }
}

impl AnchorSchedule {
    pub fn build(&self, height: usize, width: usize) -> Result<AnchorSet, PolicyError> {
        build_anchors(height, width, &self.scales, self.stride)
    }
}

/// Policy weights θ, one per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
}

impl PolicyParams {
    /// All-zero weights: the uniform policy.
    pub fn zeros() -> Self {
        Self { theta: vec![0.0; FEATURE_DIM] }
    }

    pub fn new(theta: Vec<f64>) -> Result<Self, PolicyError> {
        if theta.len() != FEATURE_DIM {
            return Err(PolicyError::DimensionMismatch { expected: FEATURE_DIM, got: theta.len() });
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(PolicyError::BadPolicyFile("non-finite parameter".into()));
        }
        Ok(Self { theta })
    }

    pub fn feature_dim(&self) -> usize {
        self.theta.len()
    }

    pub fn logit(&self, f: &Features) -> f64 {
        self.theta.iter().zip(f).map(|(t, x)| t * x).sum()
    }

    /// Header line, then one decimal value per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{POLICY_FILE_MAGIC} dim={}\n", self.theta.len());
        for t in &self.theta {
            writeln!(s, "{t}").expect("writing to a String");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, PolicyError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| PolicyError::BadPolicyFile("empty file".into()))?;
        let dim: usize = header
            .strip_prefix(POLICY_FILE_MAGIC)
            .and_then(|rest| rest.trim().strip_prefix("dim="))
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| PolicyError::BadPolicyFile(format!("bad header {header:?}")))?;
        let theta = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|e| PolicyError::BadPolicyFile(format!("{l:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if theta.len() != dim {
            return Err(PolicyError::BadPolicyFile(format!("header says dim={dim}, found {} values", theta.len())));
        }
        Self::new(theta)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Softmax distribution over a query's actions; index 0 is FULL.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub probs: Vec<f64>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl ActionDistribution {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        assert!(!logits.is_empty(), "at least one action");
        let lse = log_sum_exp(&logits);
        let log_probs: Vec<f64> = logits.iter().map(|l| l - lse).collect();
        let probs = log_probs.iter().map(|lp| lp.exp()).collect();
        Self { logits, log_probs, probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob_full(&self) -> f64 {
        self.probs[0]
    }

    /// Highest-probability action; the lowest index wins ties (so FULL wins
    /// under uniform logits).
    pub fn greedy(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate().skip(1) {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }

    /// Draws from the softmax restricted to REGION actions (indices ≥ 1).
    /// Returns the index and its log-probability under the full distribution.
    pub fn sample_region<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<(usize, f64)> {
        if self.len() < 2 {
            return None;
        }
        let region = ActionDistribution::from_logits(self.logits[1..].to_vec());
        let (i, _) = sample_action(&region, rng);
        Some((i + 1, self.log_probs[i + 1]))
    }
}

/// `softmax(θ · f(a))` over all actions.
pub fn distribution(params: &PolicyParams, features: &[Features]) -> ActionDistribution {
    ActionDistribution::from_logits(features.iter().map(|f| params.logit(f)).collect())
}

/// Categorical draw by inverse CDF; returns the index and its log-probability.
pub fn sample_action<R: Rng + ?Sized>(dist: &ActionDistribution, rng: &mut R) -> (usize, f64) {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in dist.probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return (i, dist.log_probs[i]);
            }
        }
    }
    // rounding left the cumulative sum just below u
    (last_positive, dist.log_probs[last_positive])
}

/// `∇θ ln π(a)` = `f(a) − Σ_a' π(a') f(a')`.
pub fn log_prob_grad(features: &[Features], dist: &ActionDistribution, action: usize) -> Features {
    let mut expected = [0.0; FEATURE_DIM];
    for (f, &p) in features.iter().zip(&dist.probs) {
        for (e, x) in expected.iter_mut().zip(f) {
            *e += p * x;
        }
    }
    let mut g = features[action];
    for (gi, e) in g.iter_mut().zip(expected) {
        *gi -= e;
    }
    g
}
