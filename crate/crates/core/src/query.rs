//! A query ready for cropping decisions: fused candidate embeddings, the
//! full-image query embedding and one embedding per anchor region.
//!
//! Synthetic instances and ingested pool records both become a
//! [`PreparedQuery`], so training, evaluation and baselines share one path.

use thiserror::Error;

use crate::env::{embed_image, Action, BBox, Decision, EnvError, FeatureGrid, SyntheticInstance};
use crate::policy::{AnchorSet, Features, FEATURE_DIM};
use crate::scoring::{dot, induce_ranking, normalize, score_fused, CandidatePool, RankOutcome, ScoringError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueryError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("action index {0} out of range")]
    ActionOutOfRange(usize),
    #[error("query {0:?} has no precomputed regions")]
    NoRegions(String),
}

/// Where crop embeddings come from.
#[derive(Debug, Clone, PartialEq)]
pub enum RegionSource {
    /// Crops are encoded on demand from the feature grid.
    Grid(FeatureGrid),
    /// Only the listed boxes have embeddings; other boxes map to the
    /// listed box with the highest IoU.
    Precomputed,
}

/// Unit vector, or the zero vector when `v` has no direction (a crop whose
/// cells average to zero scores every candidate 0).
fn normalize_or_zero(v: &[f64]) -> Result<Vec<f64>, ScoringError> {
    match normalize(v) {
        Err(ScoringError::ZeroVector) => Ok(vec![0.0; v.len()]),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedQuery {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub question: Vec<f64>,
    pub target_box: Option<BBox>,
    full_emb: Vec<f64>,
    fused: Vec<Vec<f64>>,
    labels: Vec<u8>,
    anchors: Vec<BBox>,
    anchor_embs: Vec<Vec<f64>>,
    features: Vec<Features>,
    source: RegionSource,
}

impl PreparedQuery {
    pub fn from_instance(id: impl Into<String>, x: &SyntheticInstance, anchors: &AnchorSet) -> Result<Self, QueryError> {
        let img = &x.image;
        let anchor_embs = anchors
            .boxes()
            .iter()
            .map(|b| Ok(normalize_or_zero(&img.box_mean(b)?)?))
            .collect::<Result<Vec<_>, QueryError>>()?;
        Self::assemble(
            id.into(),
            img.width(),
            img.height(),
            x.question_vec.clone(),
            embed_image(img)?,
            &x.pool,
            anchors.boxes().to_vec(),
            anchor_embs,
            RegionSource::Grid(img.clone()),
            Some(x.target_box),
        )
    }

    /// Builds a query from precomputed embeddings. `question` defaults to the
    /// full-image embedding when absent.
    #[allow(clippy::too_many_arguments)]
    pub fn from_precomputed(
        id: impl Into<String>,
        width: usize,
        height: usize,
        question: Option<Vec<f64>>,
        full_emb: &[f64],
        pool: &CandidatePool,
        regions: Vec<(BBox, Vec<f64>)>,
    ) -> Result<Self, QueryError> {
        let id = id.into();
        let full = normalize(full_emb)?;
        let question = match question {
            Some(q) => normalize(&q)?,
            None => full.clone(),
        };
        let mut regions = regions;
        regions.sort_by_key(|(b, _)| *b);
        regions.dedup_by_key(|(b, _)| *b);
        let mut anchors = Vec::with_capacity(regions.len());
        let mut embs = Vec::with_capacity(regions.len());
        for (b, e) in regions {
            b.check_in(width, height)?;
            if e.len() != full.len() {
                return Err(ScoringError::DimensionMismatch { expected: full.len(), got: e.len() }.into());
            }
            // the full-image box is the FULL embedding by definition
            embs.push(if b == BBox::full(width, height) { full.clone() } else { normalize_or_zero(&e)? });
            anchors.push(b);
        }
        Self::assemble(id, width, height, question, full, pool, anchors, embs, RegionSource::Precomputed, None)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        id: String,
        width: usize,
        height: usize,
        question: Vec<f64>,
        full_emb: Vec<f64>,
        pool: &CandidatePool,
        anchors: Vec<BBox>,
        anchor_embs: Vec<Vec<f64>>,
        source: RegionSource,
        target_box: Option<BBox>,
    ) -> Result<Self, QueryError> {
        if question.len() != full_emb.len() || pool.dim() != full_emb.len() {
            return Err(ScoringError::DimensionMismatch { expected: pool.dim(), got: full_emb.len() }.into());
        }
        let mut q = Self {
            id,
            width,
            height,
            question,
            target_box,
            full_emb,
            fused: pool.fused()?,
            labels: pool.labels(),
            anchors,
            anchor_embs,
            features: Vec::new(),
            source,
        };
        q.features = (0..q.num_actions()).map(|i| q.features_from(i)).collect();
        Ok(q)
    }

    fn features_from(&self, index: usize) -> Features {
        let (emb, area, full) = if index == 0 {
            (&self.full_emb, 1.0, 1.0)
        } else {
            let b = &self.anchors[index - 1];
            (&self.anchor_embs[index - 1], b.area_fraction(self.width, self.height), 0.0)
        };
        let f: Features = [dot(&self.question, emb), area, full, 1.0];
        debug_assert_eq!(f.len(), FEATURE_DIM);
        f
    }

    /// `1 + number of anchors`; index 0 is FULL.
    pub fn num_actions(&self) -> usize {
        1 + self.anchors.len()
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pool_size(&self) -> usize {
        self.labels.len()
    }

    pub fn num_positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn full_embedding(&self) -> &[f64] {
        &self.full_emb
    }

    /// Policy features of every action, FULL first.
    pub fn features(&self) -> &[Features] {
        &self.features
    }

    pub fn action(&self, index: usize) -> Result<Action, QueryError> {
        match index {
            0 => Ok(Action::full()),
            i if i <= self.anchors.len() => Ok(Action::region(self.anchors[i - 1])),
            i => Err(QueryError::ActionOutOfRange(i)),
        }
    }

    /// Index of an action in this query's action list, if present.
    pub fn action_index(&self, action: &Action) -> Option<usize> {
        match action.decision() {
            Decision::Full => Some(0),
            Decision::Region => {
                let b = action.bbox()?;
                self.anchors.iter().position(|a| *a == b).map(|i| i + 1)
            }
        }
    }

    /// Ranking under the uncropped query image.
    pub fn baseline(&self) -> RankOutcome {
        self.rank_with(&self.full_emb)
    }

    pub fn outcome_for_index(&self, index: usize) -> Result<RankOutcome, QueryError> {
        match index {
            0 => Ok(self.baseline()),
            i if i <= self.anchors.len() => Ok(self.rank_with(&self.anchor_embs[i - 1])),
            i => Err(QueryError::ActionOutOfRange(i)),
        }
    }

    /// Ranking after applying an arbitrary action, plus the malformed flag.
    ///
    /// Malformed or out-of-bounds boxes fall back to the full image.
    pub fn outcome_for(&self, action: &Action) -> Result<(RankOutcome, bool), QueryError> {
        let (emb, malformed) = self.action_embedding(action)?;
        Ok((self.rank_with(&emb), malformed))
    }

    /// Query embedding after applying `action`, plus the malformed flag.
    pub fn action_embedding(&self, action: &Action) -> Result<(Vec<f64>, bool), QueryError> {
        let b = match (action.decision(), action.bbox()) {
            (Decision::Full, _) => return Ok((self.full_emb.clone(), false)),
            (Decision::Region, Some(b)) if b.is_valid_in(self.width, self.height) => b,
            (Decision::Region, _) => return Ok((self.full_emb.clone(), true)),
        };
        if let Some(i) = self.anchors.iter().position(|a| *a == b) {
            return Ok((self.anchor_embs[i].clone(), false));
        }
        match &self.source {
            RegionSource::Grid(img) => Ok((normalize_or_zero(&img.box_mean(&b)?)?, false)),
            RegionSource::Precomputed => {
                if b == BBox::full(self.width, self.height) {
                    return Ok((self.full_emb.clone(), false));
                }
                let (i, _) = self
                    .anchors
                    .iter()
                    .enumerate()
                    .map(|(i, a)| (i, a.iou(&b)))
                    .fold(None::<(usize, f64)>, |best, cur| match best {
                        Some(bst) if bst.1 >= cur.1 => Some(bst),
                        _ => Some(cur),
                    })
                    .ok_or_else(|| QueryError::NoRegions(self.id.clone()))?;
                Ok((self.anchor_embs[i].clone(), false))
            }
        }
    }

    /// Policy features of an arbitrary (not necessarily anchor) action.
    pub fn features_for(&self, action: &Action) -> Result<Features, QueryError> {
        if let Some(i) = self.action_index(action) {
            return Ok(self.features[i]);
        }
        let (emb, _) = self.action_embedding(action)?;
        let area = match action.bbox() {
            Some(b) if b.is_valid_in(self.width, self.height) => b.area_fraction(self.width, self.height),
            _ => 1.0,
        };
        Ok([dot(&self.question, &emb), area, 0.0, 1.0])
    }

    fn rank_with(&self, query: &[f64]) -> RankOutcome {
        induce_ranking(&score_fused(query, &self.fused), &self.labels)
    }
}
