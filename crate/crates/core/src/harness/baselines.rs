use std::collections::BTreeMap;

use super::analysis::read_area_distribution;
use super::{ExperimentConfig, HarnessError};
use crate::env::{center_box, random_box, Action, AreaSampler};
use crate::metrics::MetricsReport;
use crate::query::PreparedQuery;
use crate::rng;
use crate::trainer::{evaluate_with_ks, TrainError};

/// Evaluates the enabled heuristic baselines on identical queries.
///
/// Keys are `full`, `center` and `random`. The random baseline averages its
/// reports over `random_draws` independent draws.
pub fn run_baselines(
    cfg: &ExperimentConfig,
    queries: &[PreparedQuery],
) -> Result<BTreeMap<String, MetricsReport>, HarnessError> {
    let b = &cfg.baselines;
    let eval = |choose: &(dyn Fn(usize, &PreparedQuery) -> Action + Sync)| {
        evaluate_with_ks(queries, &cfg.eval_ks, &cfg.cond_ks, |i, q| Ok::<_, TrainError>(choose(i, q)))
            .map(|(rep, _)| rep)
    };
    let mut out = BTreeMap::new();
    if b.full {
        out.insert("full".to_string(), eval(&|_, _| Action::full())?);
    }
    if b.center {
        let f = b.center_fraction;
        out.insert("center".to_string(), eval(&|_, q| Action::region(center_box(q.width, q.height, f)))?);
    }
    if b.random {
        let sampler = match &b.area_file {
            Some(p) => read_area_distribution(p)?,
            None => AreaSampler::default(),
        };
        let reports = (0..b.random_draws as u64)
            .map(|d| {
                let seed = rng::derive_seed(cfg.env.seed, rng::NS_BASELINE, d);
                eval(&|i, q| {
                    let mut r = rng::stream(seed, i as u64);
                    Action::region(random_box(q.width, q.height, &sampler, &mut r))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.insert("random".to_string(), MetricsReport::mean_of(&reports)?);
    }
    Ok(out)
}
