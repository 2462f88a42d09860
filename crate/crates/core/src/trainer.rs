//! Decision-balanced group-relative policy optimisation.
//!
//! For every query a group of actions is drawn from the policy. If the group
//! lacks either decision, its least likely draw is replaced by a forced draw of
//! the missing one. Rewards are normalised into advantages within each
//! decision subgroup, and the policy takes one ascent step along
//! `mean(A · ∇ ln π(a))` per batch. Forced samples keep their true
//! log-probabilities, so the estimator is slightly biased toward the
//! minority decision.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{generate_instance, Action, Decision, EnvConfig, EnvError};
use crate::metrics::{aggregate_with, MetricsError, MetricsReport, DEFAULT_COND_KS, DEFAULT_RECALL_KS};
use crate::policy::{distribution, log_prob_grad, sample_action, AnchorSet, Features, PolicyParams, FEATURE_DIM};
use crate::query::{PreparedQuery, QueryError};
use crate::reward::{box_penalty, full_reward, region_reward, RewardBreakdown, RewardError, RewardWeights, DEFAULT_ETA};
use crate::rng;
use crate::scoring::RankOutcome;

/// Environment variable capping evaluation threads (0 or unset = automatic).
pub const THREADS_ENV: &str = "REGION_R1_THREADS";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient or advantage")]
    NonFiniteGradient,
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("query {0:?} offers no REGION action")]
    NoRegionActions(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// How rewards are centred and scaled into advantages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// Normalise separately within the FULL and REGION subgroups.
    PerDecision,
    /// Plain GRPO: one normalisation over the whole group.
    WholeGroup,
}

fn default_group_size() -> usize {
    8
}
fn default_lr() -> f64 {
    0.05
}
fn default_steps() -> usize {
    2000
}
fn default_eps() -> f64 {
    1e-8
}
fn default_eta() -> f64 {
    DEFAULT_ETA
}
fn default_batch() -> usize {
    4
}
fn default_seed() -> u64 {
    42
}
fn default_mode() -> AdvantageMode {
    AdvantageMode::PerDecision
}
fn default_eval_every() -> usize {
    250
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weights: RewardWeights,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub advantage_mode: AdvantageMode,
    /// Evaluate on the held-out set every this many steps (0 disables).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: default_group_size(),
            learning_rate: default_lr(),
            steps: default_steps(),
            eps: default_eps(),
            weights: RewardWeights::default(),
            eta: default_eta(),
            batch_size: default_batch(),
            seed: default_seed(),
            advantage_mode: default_mode(),
            eval_every: default_eval_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.group_size < 2 {
            return Err(TrainError::GroupTooSmall(self.group_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.eps > 0.0) {
            return Err(TrainError::InvalidConfig("eps must be positive".into()));
        }
        if !(self.eta >= 0.0) {
            return Err(TrainError::InvalidConfig("eta must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One sampled action within a group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEntry {
    pub action_index: usize,
    pub action: Action,
    pub log_prob: f64,
    pub grad: Features,
    pub reward: Option<RewardBreakdown>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    pub query_id: String,
    pub samples: Vec<GroupEntry>,
    pub advantages: Vec<f64>,
    pub forced_indices: BTreeSet<usize>,
}

impl GroupSample {
    pub fn has_decision(&self, d: Decision) -> bool {
        self.samples.iter().any(|s| s.action.decision() == d)
    }

    pub fn rewards(&self) -> Option<Vec<f64>> {
        self.samples.iter().map(|s| s.reward.map(|r| r.total)).collect()
    }
}

fn argmin_log_prob(entries: &[(usize, f64)]) -> usize {
    let mut best = 0;
    for (i, e) in entries.iter().enumerate() {
        if e.1 < entries[best].1 {
            best = i;
        }
    }
    best
}

/// Draws `n` actions and enforces that both decisions appear.
pub fn sample_group<R: Rng + ?Sized>(
    params: &PolicyParams,
    q: &PreparedQuery,
    n: usize,
    rng: &mut R,
) -> Result<GroupSample, TrainError> {
    if n < 2 {
        return Err(TrainError::GroupTooSmall(n));
    }
    if q.num_actions() < 2 {
        return Err(TrainError::NoRegionActions(q.id.clone()));
    }
    let features = q.features();
    let dist = distribution(params, features);
    let mut draws: Vec<(usize, f64)> = (0..n).map(|_| sample_action(&dist, rng)).collect();
    let mut forced = BTreeSet::new();

    if draws.iter().all(|&(i, _)| i == 0) {
        let slot = argmin_log_prob(&draws);
        draws[slot] = dist.sample_region(rng).expect("at least one region action");
        forced.insert(slot);
    } else if draws.iter().all(|&(i, _)| i != 0) {
        let slot = argmin_log_prob(&draws);
        draws[slot] = (0, dist.log_probs[0]);
        forced.insert(slot);
    }

    let samples = draws
        .into_iter()
        .map(|(i, log_prob)| {
            Ok(GroupEntry {
                action_index: i,
                action: q.action(i)?,
                log_prob,
                grad: log_prob_grad(features, &dist, i),
                reward: None,
            })
        })
        .collect::<Result<Vec<_>, QueryError>>()?;

    Ok(GroupSample { query_id: q.id.clone(), advantages: vec![0.0; n], samples, forced_indices: forced })
}

/// Fills in each sample's reward against the baseline ranking `base`.
pub fn score_group(
    group: &mut GroupSample,
    q: &PreparedQuery,
    base: &RankOutcome,
    weights: &RewardWeights,
    eta: f64,
) -> Result<(), TrainError> {
    for s in &mut group.samples {
        let r = match s.action.decision() {
            Decision::Full => full_reward(base)?,
            Decision::Region => {
                let (act, malformed) = q.outcome_for(&s.action)?;
                let penalty = box_penalty(s.action.bbox().as_ref(), malformed, eta);
                region_reward(base, &act, weights, penalty)?
            }
        };
        s.reward = Some(r);
    }
    Ok(())
}

/// `(r − μ) / σ` with population σ. A singleton, or a subgroup whose σ does
/// not exceed `eps`, gets advantage 0.
fn normalise_in_place(values: &[f64], eps: f64) -> Vec<f64> {
    if values.len() < 2 {
        return vec![0.0; values.len()];
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= eps {
        return vec![0.0; values.len()];
    }
    values.iter().map(|r| (r - mean) / std).collect()
}

/// Sets `group.advantages` from the filled rewards.
///
/// # Panics
///
/// If any reward is missing.
pub fn normalize_advantages(group: &mut GroupSample, eps: f64, mode: AdvantageMode) {
    let rewards = group.rewards().expect("rewards must be scored before normalisation");
    match mode {
        AdvantageMode::WholeGroup => group.advantages = normalise_in_place(&rewards, eps),
        AdvantageMode::PerDecision => {
            let mut adv = vec![0.0; rewards.len()];
            for d in [Decision::Full, Decision::Region] {
                let idx: Vec<usize> =
                    (0..rewards.len()).filter(|&i| group.samples[i].action.decision() == d).collect();
                let sub: Vec<f64> = idx.iter().map(|&i| rewards[i]).collect();
                for (i, a) in idx.into_iter().zip(normalise_in_place(&sub, eps)) {
                    adv[i] = a;
                }
            }
            group.advantages = adv;
        }
    }
}

/// `θ ← θ + lr · mean(A · ∇ ln π)` over every sample in the batch.
pub fn update_step(params: &PolicyParams, groups: &[GroupSample], lr: f64) -> Result<PolicyParams, TrainError> {
    let mut acc = [0.0; FEATURE_DIM];
    let mut count = 0usize;
    for g in groups {
        for (s, &a) in g.samples.iter().zip(&g.advantages) {
            if !a.is_finite() || s.grad.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGradient);
            }
            for (acc_k, gk) in acc.iter_mut().zip(s.grad) {
                *acc_k += a * gk;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Ok(params.clone());
    }
    let theta = params.theta.iter().zip(acc).map(|(t, g)| t + lr * g / count as f64).collect();
    Ok(PolicyParams { theta })
}

/// A source of training queries.
pub trait QueryStream {
    fn next_query(&mut self) -> Result<PreparedQuery, TrainError>;
}

/// Fresh synthetic instances, one per call, keyed by `(env seed, counter)`.
pub struct SyntheticStream {
    env: EnvConfig,
    anchors: AnchorSet,
    namespace: u64,
    counter: u64,
}

impl SyntheticStream {
    pub fn new(env: EnvConfig, anchors: AnchorSet) -> Self {
        Self::with_namespace(env, anchors, rng::NS_TRAIN)
    }

    pub fn with_namespace(env: EnvConfig, anchors: AnchorSet, namespace: u64) -> Self {
        Self { env, anchors, namespace, counter: 0 }
    }
}

impl QueryStream for SyntheticStream {
    fn next_query(&mut self) -> Result<PreparedQuery, TrainError> {
        let i = self.counter;
        self.counter += 1;
        let seed = rng::derive_seed(self.env.seed, self.namespace, i);
        let x = generate_instance(&self.env, seed)?;
        Ok(PreparedQuery::from_instance(format!("train-{i}"), &x, &self.anchors)?)
    }
}

/// Held-out synthetic evaluation queries for `env`.
pub fn synthetic_eval_set(env: &EnvConfig, anchors: &AnchorSet, n: usize) -> Result<Vec<PreparedQuery>, TrainError> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let x = generate_instance(env, rng::derive_seed(env.seed, rng::NS_EVAL, i))?;
            Ok(PreparedQuery::from_instance(format!("eval-{i}"), &x, anchors)?)
        })
        .collect()
}

/// Cycles over a fixed dataset, reshuffling at every epoch.
pub struct DatasetStream {
    queries: Vec<PreparedQuery>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl DatasetStream {
    pub fn new(queries: Vec<PreparedQuery>, seed: u64) -> Result<Self, TrainError> {
        if queries.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let order = (0..queries.len()).collect();
        let mut s = Self { queries, order, pos: 0, rng: rng::stream(seed, 0x5348_5546) };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }
}

impl QueryStream for DatasetStream {
    fn next_query(&mut self) -> Result<PreparedQuery, TrainError> {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let q = self.queries[self.order[self.pos]].clone();
        self.pos += 1;
        Ok(q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub full_rate: f64,
    pub eval_mrr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingCurve {
    pub records: Vec<CurveRecord>,
}

impl TrainingCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,mean_reward,full_rate,eval_mrr\n");
        for r in &self.records {
            let eval = r.eval_mrr.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{}\n", r.step, r.mean_reward, r.full_rate, eval));
        }
        s
    }
}

/// Runs `cfg.steps` sample → score → normalise → update iterations.
///
/// When `eval_set` is given and `cfg.eval_every > 0`, greedy MRR on it is
/// recorded every `eval_every` steps.
pub fn train(
    stream: &mut dyn QueryStream,
    cfg: &TrainConfig,
    eval_set: Option<&[PreparedQuery]>,
) -> Result<(PolicyParams, TrainingCurve), TrainError> {
    train_from(PolicyParams::zeros(), stream, cfg, eval_set)
}

pub fn train_from(
    init: PolicyParams,
    stream: &mut dyn QueryStream,
    cfg: &TrainConfig,
    eval_set: Option<&[PreparedQuery]>,
) -> Result<(PolicyParams, TrainingCurve), TrainError> {
    cfg.validate()?;
    let mut params = init;
    let mut curve = TrainingCurve::default();
    let mut rng = rng::stream(rng::derive_seed(cfg.seed, rng::NS_SAMPLING, 0), 0);

    for step in 1..=cfg.steps {
        let mut groups = Vec::with_capacity(cfg.batch_size);
        let (mut reward_sum, mut full_count, mut total) = (0.0, 0usize, 0usize);
        for _ in 0..cfg.batch_size {
            let q = stream.next_query()?;
            let base = q.baseline();
            let mut g = sample_group(&params, &q, cfg.group_size, &mut rng)?;
            score_group(&mut g, &q, &base, &cfg.weights, cfg.eta)?;
            normalize_advantages(&mut g, cfg.eps, cfg.advantage_mode);
            for s in &g.samples {
                reward_sum += s.reward.expect("scored").total;
                full_count += usize::from(s.action.is_full());
                total += 1;
            }
            groups.push(g);
        }
        params = update_step(&params, &groups, cfg.learning_rate)?;

        let eval_mrr = match eval_set {
            Some(set) if cfg.eval_every > 0 && step % cfg.eval_every == 0 => {
                Some(evaluate(&params, set, EvalMode::Greedy)?.0.mrr)
            }
            _ => None,
        };
        curve.records.push(CurveRecord {
            step,
            mean_reward: reward_sum / total as f64,
            full_rate: full_count as f64 / total as f64,
            eval_mrr,
        });
    }
    Ok((params, curve))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Argmax action, FULL on ties.
    Greedy,
    /// One draw per query from a per-query stream derived from the seed.
    Stochastic { seed: u64 },
}

/// Per-query outcome of an evaluated action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub action: Action,
    pub malformed: bool,
    pub baseline_rank: Option<usize>,
    pub post_rank: Option<usize>,
    pub baseline_margin: Option<f64>,
    pub post_margin: Option<f64>,
}

impl QueryRecord {
    pub fn decision(&self) -> Decision {
        self.action.decision()
    }
}

/// Thread pool honouring `REGION_R1_THREADS`.
pub fn eval_pool() -> rayon::ThreadPool {
    let threads = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(0);
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool")
}

/// Evaluates an arbitrary per-query action chooser on `queries` with the
/// default cutoffs. Results are merged in query order.
pub fn evaluate_with<F>(queries: &[PreparedQuery], choose: F) -> Result<(MetricsReport, Vec<QueryRecord>), TrainError>
where
    F: Fn(usize, &PreparedQuery) -> Result<Action, TrainError> + Sync,
{
    evaluate_with_ks(queries, &DEFAULT_RECALL_KS, &DEFAULT_COND_KS, choose)
}

pub fn evaluate_with_ks<F>(
    queries: &[PreparedQuery],
    recall_ks: &[usize],
    cond_ks: &[usize],
    choose: F,
) -> Result<(MetricsReport, Vec<QueryRecord>), TrainError>
where
    F: Fn(usize, &PreparedQuery) -> Result<Action, TrainError> + Sync,
{
    if queries.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let results: Vec<(RankOutcome, QueryRecord)> = eval_pool().install(|| {
        queries
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                let action = choose(i, q)?;
                let base = q.baseline();
                let (post, malformed) = q.outcome_for(&action)?;
                let record = QueryRecord {
                    query_id: q.id.clone(),
                    action,
                    malformed,
                    baseline_rank: base.rank,
                    post_rank: post.rank,
                    baseline_margin: base.margin,
                    post_margin: post.margin,
                };
                Ok((post, record))
            })
            .collect::<Result<Vec<_>, TrainError>>()
    })?;
    let rankings: Vec<_> = results.iter().map(|(o, _)| o.ranking.clone()).collect();
    let report = aggregate_with(&rankings, recall_ks, cond_ks)?;
    Ok((report, results.into_iter().map(|(_, r)| r).collect()))
}

/// Policy evaluation: one action per query, greedy or sampled.
pub fn evaluate(
    params: &PolicyParams,
    queries: &[PreparedQuery],
    mode: EvalMode,
) -> Result<(MetricsReport, Vec<QueryRecord>), TrainError> {
    evaluate_with(queries, |i, q| {
        let dist = distribution(params, q.features());
        let idx = match mode {
            EvalMode::Greedy => dist.greedy(),
            EvalMode::Stochastic { seed } => sample_action(&dist, &mut rng::stream(seed, i as u64)).0,
        };
        Ok(q.action(idx)?)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::AnchorSchedule;

    fn anchors() -> AnchorSet {
        AnchorSchedule::default().build(16, 16).unwrap()
    }

    fn query(seed: u64, env: &EnvConfig) -> PreparedQuery {
        PreparedQuery::from_instance("q", &generate_instance(env, seed).unwrap(), &anchors()).unwrap()
    }

    fn params_with_full_bias(bias: f64) -> PolicyParams {
        PolicyParams::new(vec![0.0, 0.0, bias, 0.0]).unwrap()
    }

    #[test]
    fn all_full_policy_gets_one_forced_region() {
        let q = query(1, &EnvConfig::default());
        let p = params_with_full_bias(2000.0);
        let g = sample_group(&p, &q, 8, &mut rng::stream(3, 0)).unwrap();
        let regions = g.samples.iter().filter(|s| !s.action.is_full()).count();
        assert_eq!(regions, 1);
        assert_eq!(g.forced_indices.len(), 1);
        let forced = *g.forced_indices.iter().next().unwrap();
        assert!(!g.samples[forced].action.is_full());
        assert!(g.samples[forced].log_prob.is_finite());
    }

    #[test]
    fn mixed_policy_groups_are_balanced() {
        let q = query(2, &EnvConfig::default());
        // p(FULL) = 0.5: FULL logit = ln(#regions)
        let p = params_with_full_bias(((q.num_actions() - 1) as f64).ln());
        let mut r = rng::stream(4, 0);
        for _ in 0..200 {
            let g = sample_group(&p, &q, 8, &mut r).unwrap();
            assert!(g.has_decision(Decision::Full) && g.has_decision(Decision::Region));
        }
    }

    #[test]
    fn group_too_small() {
        let q = query(2, &EnvConfig::default());
        assert!(matches!(
            sample_group(&PolicyParams::zeros(), &q, 1, &mut rng::stream(0, 0)),
            Err(TrainError::GroupTooSmall(1))
        ));
    }

    fn entry(action: Action) -> GroupEntry {
        GroupEntry { action_index: 0, action, log_prob: 0.0, grad: [0.0; FEATURE_DIM], reward: None }
    }

    fn group_with_rewards(decisions_rewards: &[(Decision, f64)]) -> GroupSample {
        let samples = decisions_rewards
            .iter()
            .map(|&(d, r)| {
                let action = match d {
                    Decision::Full => Action::full(),
                    Decision::Region => Action::region(crate::env::BBox::new(0, 0, 1, 1)),
                };
                GroupEntry {
                    reward: Some(RewardBreakdown {
                        decision: d,
                        d_mrr: 0.0,
                        d_ndcg: 0.0,
                        d_rank: 0.0,
                        d_margin: 0.0,
                        penalty: 0.0,
                        total: r,
                    }),
                    ..entry(action)
                }
            })
            .collect::<Vec<_>>();
        GroupSample {
            query_id: "g".into(),
            advantages: vec![0.0; samples.len()],
            samples,
            forced_indices: BTreeSet::new(),
        }
    }

    #[test]
    fn advantage_examples() {
        let mut g = group_with_rewards(&[(Decision::Region, 1.0), (Decision::Region, 1.0), (Decision::Region, 1.0)]);
        normalize_advantages(&mut g, 1e-8, AdvantageMode::PerDecision);
        assert_eq!(g.advantages, vec![0.0; 3]);

        let mut g = group_with_rewards(&[(Decision::Region, 0.0), (Decision::Region, 2.0)]);
        normalize_advantages(&mut g, 1e-8, AdvantageMode::PerDecision);
        assert!((g.advantages[0] + 1.0).abs() < 1e-7 && (g.advantages[1] - 1.0).abs() < 1e-7);

        let mut g = group_with_rewards(&[
            (Decision::Full, 1.0),
            (Decision::Region, 0.3),
            (Decision::Full, 0.0),
            (Decision::Region, -0.2),
            (Decision::Region, 0.9),
            (Decision::Full, 1.0),
        ]);
        normalize_advantages(&mut g, 1e-8, AdvantageMode::PerDecision);
        for d in [Decision::Full, Decision::Region] {
            let sub: Vec<f64> = g
                .samples
                .iter()
                .zip(&g.advantages)
                .filter(|(s, _)| s.action.decision() == d)
                .map(|(_, &a)| a)
                .collect();
            let mean = sub.iter().sum::<f64>() / sub.len() as f64;
            let std = (sub.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / sub.len() as f64).sqrt();
            assert!(mean.abs() < 1e-12);
            assert!((std - 1.0).abs() < 1e-6);
        }

        // small spread still normalises to unit std
        let mut g = group_with_rewards(&[(Decision::Region, 0.5), (Decision::Region, 0.5 + 1e-4)]);
        normalize_advantages(&mut g, 1e-8, AdvantageMode::PerDecision);
        assert!((g.advantages[0] + 1.0).abs() < 1e-9 && (g.advantages[1] - 1.0).abs() < 1e-9);

        // singleton subgroup
        let mut g = group_with_rewards(&[(Decision::Full, 1.0), (Decision::Region, 0.3), (Decision::Region, 0.1)]);
        normalize_advantages(&mut g, 1e-8, AdvantageMode::PerDecision);
        assert_eq!(g.advantages[0], 0.0);

        // whole-group mode centres across decisions
        let mut g = group_with_rewards(&[(Decision::Full, 1.0), (Decision::Region, 0.0)]);
        normalize_advantages(&mut g, 1e-8, AdvantageMode::WholeGroup);
        assert!((g.advantages[0] - 1.0).abs() < 1e-7 && (g.advantages[1] + 1.0).abs() < 1e-7);
    }

    #[test]
    fn update_examples() {
        let p = PolicyParams::new(vec![0.5, -1.0, 0.2, 3.0]).unwrap();
        let mut g = group_with_rewards(&[(Decision::Full, 1.0), (Decision::Region, 0.0)]);
        g.samples[0].grad = [1.0, 2.0, 3.0, 4.0];
        g.samples[1].grad = [-1.0, 0.5, 0.0, 0.0];
        assert_eq!(update_step(&p, &[g.clone()], 0.1).unwrap(), p);

        let mut single = group_with_rewards(&[(Decision::Region, 0.0)]);
        single.samples[0].grad = [1.0, 2.0, 3.0, 4.0];
        single.advantages = vec![1.0];
        let up = update_step(&p, &[single.clone()], 0.1).unwrap();
        for k in 0..FEATURE_DIM {
            assert!((up.theta[k] - (p.theta[k] + 0.1 * single.samples[0].grad[k])).abs() < 1e-15);
        }

        single.advantages = vec![f64::NAN];
        assert!(matches!(update_step(&p, &[single], 0.1), Err(TrainError::NonFiniteGradient)));
    }

    #[test]
    fn repeated_update_raises_surrogate() {
        let env = EnvConfig::default();
        let q = query(8, &env);
        let mut p = PolicyParams::zeros();
        let mut g = sample_group(&p, &q, 8, &mut rng::stream(5, 0)).unwrap();
        score_group(&mut g, &q, &q.baseline(), &RewardWeights::uniform(), DEFAULT_ETA).unwrap();
        normalize_advantages(&mut g, 1e-8, AdvantageMode::WholeGroup);
        assert!(g.advantages.iter().any(|&a| a != 0.0));
        let surrogate = |p: &PolicyParams, g: &GroupSample| {
            let d = distribution(p, q.features());
            g.samples.iter().zip(&g.advantages).map(|(s, a)| a * d.log_probs[s.action_index]).sum::<f64>()
        };
        let mut prev = surrogate(&p, &g);
        for _ in 0..10 {
            let d = distribution(&p, q.features());
            for s in &mut g.samples {
                s.grad = log_prob_grad(q.features(), &d, s.action_index);
            }
            p = update_step(&p, std::slice::from_ref(&g), 0.01).unwrap();
            let now = surrogate(&p, &g);
            assert!(now > prev, "{now} <= {prev}");
            prev = now;
        }
    }

    #[test]
    fn score_group_examples() {
        let env = EnvConfig::default();
        // find an instance whose baseline ranks the positive first
        let q = (0..50).map(|s| query(s, &env)).find(|q| q.baseline().rank == Some(1)).unwrap();
        let p = params_with_full_bias(2000.0);
        let mut g = sample_group(&p, &q, 8, &mut rng::stream(1, 0)).unwrap();
        score_group(&mut g, &q, &q.baseline(), &RewardWeights::uniform(), DEFAULT_ETA).unwrap();
        for s in g.samples.iter().filter(|s| s.action.is_full()) {
            assert_eq!(s.reward.unwrap().total, 1.0);
        }

        // the no-op full-image anchor earns exactly 0
        let full_box = crate::env::BBox::full(16, 16);
        let idx = q.action_index(&Action::region(full_box)).unwrap();
        let mut g = GroupSample {
            query_id: "x".into(),
            samples: vec![GroupEntry { action_index: idx, ..entry(Action::region(full_box)) }],
            advantages: vec![0.0],
            forced_indices: BTreeSet::new(),
        };
        score_group(&mut g, &q, &q.baseline(), &RewardWeights::uniform(), DEFAULT_ETA).unwrap();
        assert_eq!(g.samples[0].reward.unwrap().total, 0.0);
    }

    #[test]
    fn target_crop_rewarded_on_noise_free_env() {
        let env = EnvConfig::default().noise_free();
        let mut checked = 0;
        for seed in 0..200 {
            let x = generate_instance(&env, seed).unwrap();
            let q = PreparedQuery::from_instance("q", &x, &anchors()).unwrap();
            let base = q.baseline();
            if base.rank == Some(1) {
                continue;
            }
            let mut g = GroupSample {
                query_id: "t".into(),
                samples: vec![entry(Action::region(x.target_box))],
                advantages: vec![0.0],
                forced_indices: BTreeSet::new(),
            };
            score_group(&mut g, &q, &base, &RewardWeights::uniform(), DEFAULT_ETA).unwrap();
            assert!(g.samples[0].reward.unwrap().total > 0.0, "seed {seed}");
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let env = EnvConfig::default();
        let mut stream = SyntheticStream::new(env, anchors());
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        let (p, curve) = train(&mut stream, &cfg, None).unwrap();
        assert_eq!(p, PolicyParams::zeros());
        assert!(curve.records.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let env = EnvConfig::default();
        let cfg = TrainConfig { steps: 30, eval_every: 10, ..TrainConfig::default() };
        let eval = synthetic_eval_set(&env, &anchors(), 20).unwrap();
        let run = || train(&mut SyntheticStream::new(env.clone(), anchors()), &cfg, Some(&eval)).unwrap();
        let (p1, c1) = run();
        let (p2, c2) = run();
        assert_eq!(p1, p2);
        assert_eq!(c1.to_csv(), c2.to_csv());
        assert_eq!(c1.records.len(), 30);
        assert!(c1.records[9].eval_mrr.is_some() && c1.records[8].eval_mrr.is_none());
        assert!(c1.to_csv().starts_with("step,mean_reward,full_rate,eval_mrr\n"));
    }

    #[test]
    fn zero_params_greedy_equals_full_baseline() {
        let env = EnvConfig::default();
        let eval = synthetic_eval_set(&env, &anchors(), 30).unwrap();
        let (rep, recs) = evaluate(&PolicyParams::zeros(), &eval, EvalMode::Greedy).unwrap();
        let (full, _) = evaluate_with(&eval, |_, _| Ok(Action::full())).unwrap();
        assert_eq!(rep, full);
        assert!(recs.iter().all(|r| r.action.is_full() && r.baseline_rank == r.post_rank));
    }

    #[test]
    fn stochastic_eval_is_reproducible() {
        let env = EnvConfig::default();
        let eval = synthetic_eval_set(&env, &anchors(), 25).unwrap();
        let a = evaluate(&PolicyParams::zeros(), &eval, EvalMode::Stochastic { seed: 9 }).unwrap();
        let b = evaluate(&PolicyParams::zeros(), &eval, EvalMode::Stochastic { seed: 9 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ideal_params_solve_noise_free_env() {
        let env = EnvConfig::default().noise_free();
        let eval = synthetic_eval_set(&env, &anchors(), 60).unwrap();
        // strong preference for the crop that best matches the question
        let p = PolicyParams::new(vec![200.0, 0.0, 0.0, 0.0]).unwrap();
        let (rep, _) = evaluate(&p, &eval, EvalMode::Greedy).unwrap();
        assert_eq!(rep.cond_recall(1), Some(1.0));
    }

    #[test]
    fn training_does_not_hurt_on_noise_free_env() {
        let env = EnvConfig::default().noise_free();
        let eval = synthetic_eval_set(&env, &anchors(), 100).unwrap();
        let before = evaluate(&PolicyParams::zeros(), &eval, EvalMode::Greedy).unwrap().0.mrr;
        let cfg = TrainConfig { steps: 300, eval_every: 0, ..TrainConfig::default() };
        let (p, _) = train(&mut SyntheticStream::new(env, anchors()), &cfg, None).unwrap();
        let after = evaluate(&p, &eval, EvalMode::Greedy).unwrap().0.mrr;
        assert!(after >= before, "{after} < {before}");
    }

    #[test]
    fn dataset_stream_cycles() {
        let env = EnvConfig::default();
        let qs: Vec<_> = (0..3).map(|s| {
            let mut q = query(s, &env);
            q.id = format!("d{s}");
            q
        }).collect();
        let mut st = DatasetStream::new(qs, 1).unwrap();
        let mut seen: Vec<String> = (0..6).map(|_| st.next_query().unwrap().id).collect();
        seen.sort();
        assert_eq!(seen, vec!["d0", "d0", "d1", "d1", "d2", "d2"]);
        assert!(matches!(DatasetStream::new(vec![], 0), Err(TrainError::EmptyDataset)));
    }
}
