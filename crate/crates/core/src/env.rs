//! Feature-grid images, the crop operator, the mean-pool image encoder and a
//! synthetic instance generator with planted target regions.
//!
//! Boxes use half-open integer cell coordinates `[x1, x2) x [y1, y2)`.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::scoring::{normalize, Candidate, CandidatePool, ScoringError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("malformed box {0}")]
    MalformedBox(BBox),
    #[error("box {bbox} is out of bounds for a {width}x{height} grid")]
    OutOfBounds { bbox: BBox, width: usize, height: usize },
    #[error("infeasible environment config: {0}")]
    ConfigInfeasible(String),
    #[error("invalid area sample {0}: fractions must lie in (0, 1]")]
    InvalidArea(f64),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

/// An `H x W` grid of `D`-dimensional feature cells, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    dim: usize,
    cells: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, dim: usize, cells: Vec<f64>) -> Result<Self, EnvError> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(EnvError::ConfigInfeasible("grid dimensions must be positive".into()));
        }
        if cells.len() != height * width * dim {
            return Err(EnvError::ConfigInfeasible(format!(
                "expected {} cell values, got {}",
                height * width * dim,
                cells.len()
            )));
        }
        if cells.iter().any(|v| !v.is_finite()) {
            return Err(EnvError::ConfigInfeasible("non-finite cell value".into()));
        }
        Ok(Self { height, width, dim, cells })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        dim: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self, EnvError> {
        let mut cells = Vec::with_capacity(height * width * dim);
        for y in 0..height {
            for x in 0..width {
                cells.extend(f(y, x));
            }
        }
        Self::new(height, width, dim, cells)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.dim;
        &self.cells[start..start + self.dim]
    }

    pub fn full_box(&self) -> BBox {
        BBox::full(self.width, self.height)
    }

    /// Sum of cell vectors inside a valid box, accumulated in row-major order.
    fn box_sum(&self, b: &BBox) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for y in b.y1 as usize..b.y2 as usize {
            for x in b.x1 as usize..b.x2 as usize {
                for (a, v) in acc.iter_mut().zip(self.cell(y, x)) {
                    *a += v;
                }
            }
        }
        acc
    }

    /// Mean cell vector inside `b`, not normalised.
    ///
    /// Bit-identical to the mean of `crop(self, b)`.
    pub fn box_mean(&self, b: &BBox) -> Result<Vec<f64>, EnvError> {
        b.check_in(self.width, self.height)?;
        let n = b.area() as f64;
        Ok(self.box_sum(b).into_iter().map(|v| v / n).collect())
    }
}

/// Half-open cell box. Malformed boxes (`x2 <= x1` or `y2 <= y1`) are representable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.x1, self.y1, self.x2, self.y2)
    }
}

impl BBox {
    pub const fn new(x1: i64, y1: i64, x2: i64, y2: i64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::new(0, 0, width as i64, height as i64)
    }

    pub fn is_well_formed(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn is_valid_in(&self, width: usize, height: usize) -> bool {
        self.check_in(width, height).is_ok()
    }

    pub fn check_in(&self, width: usize, height: usize) -> Result<(), EnvError> {
        if !self.is_well_formed() {
            return Err(EnvError::MalformedBox(*self));
        }
        if self.x1 < 0 || self.y1 < 0 || self.x2 > width as i64 || self.y2 > height as i64 {
            return Err(EnvError::OutOfBounds { bbox: *self, width, height });
        }
        Ok(())
    }

    pub fn box_width(&self) -> i64 {
        (self.x2 - self.x1).max(0)
    }

    pub fn box_height(&self) -> i64 {
        (self.y2 - self.y1).max(0)
    }

    /// Cell count; 0 for malformed boxes.
    pub fn area(&self) -> i64 {
        self.box_width() * self.box_height()
    }

    pub fn area_fraction(&self, width: usize, height: usize) -> f64 {
        self.area() as f64 / (width * height) as f64
    }

    pub fn intersection(&self, other: &BBox) -> i64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn contains_cell(&self, x: usize, y: usize) -> bool {
        let (x, y) = (x as i64, y as i64);
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Decision {
    Full,
    Region,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Full => "FULL",
            Decision::Region => "REGION",
        })
    }
}

/// A cropping action: keep the full image, or crop a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<BBox>,
}

impl Action {
    pub const fn full() -> Self {
        Self { decision: Decision::Full, bbox: None }
    }

    pub const fn region(bbox: BBox) -> Self {
        Self { decision: Decision::Region, bbox: Some(bbox) }
    }

    pub fn decision(&self) -> Decision {
        self.decision
    }

    pub fn bbox(&self) -> Option<BBox> {
        self.bbox
    }

    pub fn is_full(&self) -> bool {
        self.decision == Decision::Full
    }
}

/// Extracts the sub-grid inside `b`.
pub fn crop(img: &FeatureGrid, b: &BBox) -> Result<FeatureGrid, EnvError> {
    b.check_in(img.width, img.height)?;
    let (w, h) = (b.box_width() as usize, b.box_height() as usize);
    let mut cells = Vec::with_capacity(w * h * img.dim);
    for y in b.y1 as usize..b.y2 as usize {
        for x in b.x1 as usize..b.x2 as usize {
            cells.extend_from_slice(img.cell(y, x));
        }
    }
    Ok(FeatureGrid { height: h, width: w, dim: img.dim, cells })
}

/// Mean-pool encoder: `normalize(mean of all cells)`.
pub fn embed_image(img: &FeatureGrid) -> Result<Vec<f64>, EnvError> {
    Ok(normalize(&img.box_mean(&img.full_box())?)?)
}

/// Applies an action to a query image.
///
/// A `REGION` action whose box is malformed or out of bounds falls back to
/// the full image and returns `true` in the flag so the caller can penalise it.
pub fn apply_action(img: &FeatureGrid, a: &Action) -> (FeatureGrid, bool) {
    match (a.decision, a.bbox) {
        (Decision::Full, _) => (img.clone(), false),
        (Decision::Region, Some(b)) => match crop(img, &b) {
            Ok(c) => (c, false),
            Err(_) => (img.clone(), true),
        },
        (Decision::Region, None) => (img.clone(), true),
    }
}

fn default_height() -> usize {
    16
}
fn default_dim() -> usize {
    16
}
fn default_pool_size() -> usize {
    20
}
fn default_noise_in() -> f64 {
    0.3
}
fn default_noise_emb() -> f64 {
    0.1
}
fn default_noise_q() -> f64 {
    0.2
}
fn default_distractors() -> usize {
    3
}
fn default_seed() -> u64 {
    42
}
fn default_target_area() -> [f64; 2] {
    [0.1, 0.6]
}
fn default_distractor_area() -> [f64; 2] {
    [0.05, 0.25]
}

/// Parameters of the synthetic environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default = "default_height")]
    pub width: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    #[serde(default = "default_noise_in")]
    pub noise_in: f64,
    #[serde(default = "default_noise_emb")]
    pub noise_emb: f64,
    #[serde(default = "default_noise_q")]
    pub noise_q: f64,
    #[serde(default = "default_distractors")]
    pub n_distractor_regions: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Target box area range as fractions of the image.
    #[serde(default = "default_target_area")]
    pub target_area: [f64; 2],
    /// Distractor rectangle area range as fractions of the image.
    #[serde(default = "default_distractor_area")]
    pub distractor_area: [f64; 2],
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            height: default_height(),
            width: default_height(),
            dim: default_dim(),
            pool_size: default_pool_size(),
            noise_in: default_noise_in(),
            noise_emb: default_noise_emb(),
            noise_q: default_noise_q(),
            n_distractor_regions: default_distractors(),
            seed: default_seed(),
            target_area: default_target_area(),
            distractor_area: default_distractor_area(),
        }
    }
}

impl EnvConfig {
    /// Same config with every noise level set to zero.
    pub fn noise_free(mut self) -> Self {
        self.noise_in = 0.0;
        self.noise_emb = 0.0;
        self.noise_q = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |m: &str| Err(EnvError::ConfigInfeasible(m.into()));
        if self.height == 0 || self.width == 0 || self.dim == 0 {
            return fail("height, width and dim must be positive");
        }
        if self.pool_size < 2 {
            return fail("pool_size must be at least 2");
        }
        if [self.noise_in, self.noise_emb, self.noise_q].iter().any(|n| !(*n >= 0.0 && n.is_finite())) {
            return fail("noise levels must be finite and non-negative");
        }
        for r in [self.target_area, self.distractor_area] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1] <= 1.0) {
                return fail("area ranges must satisfy 0 < lo <= hi <= 1");
            }
        }
        Ok(())
    }
}

/// All well-formed boxes whose area fraction lies in `[lo, hi]`, in
/// lexicographic `(y1, x1, y2, x2)` order.
fn boxes_with_area(width: usize, height: usize, range: [f64; 2]) -> Vec<BBox> {
    let total = (width * height) as f64;
    let mut out = Vec::new();
    for y1 in 0..height {
        for x1 in 0..width {
            for y2 in y1 + 1..=height {
                for x2 in x1 + 1..=width {
                    let frac = ((x2 - x1) * (y2 - y1)) as f64 / total;
                    if frac >= range[0] && frac <= range[1] {
                        out.push(BBox::new(x1 as i64, y1 as i64, x2 as i64, y2 as i64));
                    }
                }
            }
        }
    }
    out
}

fn gaussian_vec<R: Rng>(rng: &mut R, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        if let Ok(u) = normalize(&gaussian_vec(rng, dim, 1.0)) {
            return u;
        }
    }
}

fn add_noise<R: Rng>(rng: &mut R, base: &[f64], sigma: f64) -> Vec<f64> {
    base.iter().map(|b| b + sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// One synthetic query: image, question vector, candidate pool and the
/// planted region that contains the positive entity.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticInstance {
    pub image: FeatureGrid,
    pub question_vec: Vec<f64>,
    pub pool: CandidatePool,
    pub target_box: BBox,
    pub seed: u64,
}

// stream keys inside one instance
const KEY_ENTITIES: u64 = 1;
const KEY_TARGET: u64 = 2;
const KEY_DISTRACTORS: u64 = 3;
const KEY_CELLS: u64 = 4;
const KEY_CANDIDATES: u64 = 5;
const KEY_QUESTION: u64 = 6;

/// Generates one instance, a pure function of `(cfg, seed)`.
pub fn generate_instance(cfg: &EnvConfig, seed: u64) -> Result<SyntheticInstance, EnvError> {
    cfg.validate()?;
    let (h, w, d, n) = (cfg.height, cfg.width, cfg.dim, cfg.pool_size);

    let mut ent_rng = rng::stream(seed, KEY_ENTITIES);
    let positive = random_unit(&mut ent_rng, d);
    let negatives: Vec<Vec<f64>> = (0..n - 1).map(|_| random_unit(&mut ent_rng, d)).collect();

    let targets = boxes_with_area(w, h, cfg.target_area);
    if targets.is_empty() {
        return Err(EnvError::ConfigInfeasible(format!(
            "no box on a {w}x{h} grid has area fraction in {:?}",
            cfg.target_area
        )));
    }
    let target_box = targets[rng::stream(seed, KEY_TARGET).random_range(0..targets.len())];

    // base vector index per cell: None = background, Some(0) = positive, Some(k) = negatives[k-1]
    let mut base: Vec<Option<usize>> = (0..h * w)
        .map(|i| target_box.contains_cell(i % w, i / w).then_some(0))
        .collect();
    if cfg.n_distractor_regions > 0 {
        let all = boxes_with_area(w, h, cfg.distractor_area);
        if all.is_empty() {
            return Err(EnvError::ConfigInfeasible(format!(
                "no box on a {w}x{h} grid has area fraction in {:?}",
                cfg.distractor_area
            )));
        }
        let disjoint: Vec<BBox> =
            all.iter().copied().filter(|b| b.intersection(&target_box) == 0).collect();
        let pickable = if disjoint.is_empty() { &all } else { &disjoint };
        let mut drng = rng::stream(seed, KEY_DISTRACTORS);
        for _ in 0..cfg.n_distractor_regions {
            let b = pickable[drng.random_range(0..pickable.len())];
            let entity = 1 + drng.random_range(0..negatives.len());
            for (i, slot) in base.iter_mut().enumerate() {
                if b.contains_cell(i % w, i / w) && *slot != Some(0) {
                    *slot = Some(entity);
                }
            }
        }
    }

    let zero = vec![0.0; d];
    let mut cell_rng = rng::stream(seed, KEY_CELLS);
    let mut cells = Vec::with_capacity(h * w * d);
    for slot in &base {
        let b = match slot {
            None => &zero,
            Some(0) => &positive,
            Some(k) => &negatives[k - 1],
        };
        cells.extend(add_noise(&mut cell_rng, b, cfg.noise_in));
    }
    let image = FeatureGrid::new(h, w, d, cells)?;

    let mut cand_rng = rng::stream(seed, KEY_CANDIDATES);
    let pos_index = cand_rng.random_range(0..n);
    let mut neg_iter = negatives.iter();
    let candidates = (0..n)
        .map(|j| {
            let entity = if j == pos_index { &positive } else { neg_iter.next().expect("n-1 negatives") };
            let image_emb = add_noise(&mut cand_rng, entity, cfg.noise_emb);
            let text_emb = cand_rng
                .random_bool(0.5)
                .then(|| add_noise(&mut cand_rng, entity, cfg.noise_emb));
            Candidate {
                id: format!("c{j}"),
                image_emb,
                text_emb,
                label: u8::from(j == pos_index),
            }
        })
        .collect();
    let pool = CandidatePool::new(candidates)?;

    let question_vec = normalize(&add_noise(&mut rng::stream(seed, KEY_QUESTION), &positive, cfg.noise_q))?;

    Ok(SyntheticInstance { image, question_vec, pool, target_box, seed })
}

/// Box dimensions whose cell area is closest to `area_cells`.
///
/// Candidates keep an aspect ratio within a factor 2 of the image's when any
/// such box exists; ties prefer the aspect closest to the image's, then the
/// narrower box.
pub fn box_dims_for_area(width: usize, height: usize, area_cells: f64) -> (usize, usize) {
    let image_aspect = (width as f64 / height as f64).ln();
    let mut best: Option<((f64, f64, usize), (usize, usize))> = None;
    for restrict in [true, false] {
        for bw in 1..=width {
            for bh in 1..=height {
                let aspect_gap = ((bw as f64 / bh as f64).ln() - image_aspect).abs();
                if restrict && aspect_gap > 2f64.ln() + 1e-12 {
                    continue;
                }
                let key = (((bw * bh) as f64 - area_cells).abs(), aspect_gap, bw);
                if best.as_ref().map_or(true, |(k, _)| key < *k) {
                    best = Some((key, (bw, bh)));
                }
            }
        }
        if best.is_some() {
            break;
        }
    }
    best.expect("1x1 always exists").1
}

/// A centred box covering about `fraction` of the image.
pub fn center_box(width: usize, height: usize, fraction: f64) -> BBox {
    let (bw, bh) = box_dims_for_area(width, height, fraction * (width * height) as f64);
    let x1 = (width - bw) / 2;
    let y1 = (height - bh) / 2;
    BBox::new(x1 as i64, y1 as i64, (x1 + bw) as i64, (y1 + bh) as i64)
}

pub fn center_crop(img: &FeatureGrid, fraction: f64) -> Action {
    Action::region(center_box(img.width, img.height, fraction))
}

/// Source of area fractions for the random-crop baseline.
#[derive(Debug, Clone, PartialEq)]
pub enum AreaSampler {
    Uniform { lo: f64, hi: f64 },
    /// Resamples uniformly from recorded fractions.
    Empirical(Vec<f64>),
}

impl Default for AreaSampler {
    fn default() -> Self {
        AreaSampler::Uniform { lo: 0.1, hi: 0.9 }
    }
}

impl AreaSampler {
    pub fn empirical(values: Vec<f64>) -> Result<Self, EnvError> {
        if let Some(&bad) = values.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(EnvError::InvalidArea(bad));
        }
        if values.is_empty() {
            return Err(EnvError::ConfigInfeasible("empty area distribution".into()));
        }
        Ok(AreaSampler::Empirical(values))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            AreaSampler::Uniform { lo, hi } => {
                if lo == hi {
                    *lo
                } else {
                    rng.random_range(*lo..*hi)
                }
            }
            AreaSampler::Empirical(v) => v[rng.random_range(0..v.len())],
        }
    }

    /// Cumulative distribution function of the sampler.
    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            AreaSampler::Uniform { lo, hi } => {
                if x < *lo {
                    0.0
                } else if x >= *hi {
                    1.0
                } else {
                    (x - lo) / (hi - lo)
                }
            }
            AreaSampler::Empirical(v) => v.iter().filter(|&&a| a <= x).count() as f64 / v.len() as f64,
        }
    }
}

/// A box with a sampled area at a uniformly random admissible position.
pub fn random_box<R: Rng + ?Sized>(width: usize, height: usize, sampler: &AreaSampler, rng: &mut R) -> BBox {
    let fraction = sampler.sample(rng);
    let (bw, bh) = box_dims_for_area(width, height, fraction * (width * height) as f64);
    let x1 = rng.random_range(0..=width - bw);
    let y1 = rng.random_range(0..=height - bh);
    BBox::new(x1 as i64, y1 as i64, (x1 + bw) as i64, (y1 + bh) as i64)
}

pub fn random_crop<R: Rng + ?Sized>(img: &FeatureGrid, sampler: &AreaSampler, rng: &mut R) -> Action {
    Action::region(random_box(img.width, img.height, sampler, rng))
}
