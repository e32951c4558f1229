//! Learning-rate warmup on a data subset, then the rest of training on all data.

use serde::{Deserialize, Serialize};
use rayon::prelude::*;

use super::{compute_scores, DatasetConfig, ModelConfig, ScoreSource, Selection};
use crate::data::{select_subset, Dataset, Strategy, SubsetSelector};
use crate::error::{Error, Result};
use crate::landscape::{hessian_top_eigenvalue, PowerIteration};
use crate::model::ParamVector;
use crate::rng::derive_seed;
use crate::train::{evaluate, resume, train, TrainConfig};

/// A warmup data source; `size: None` means the whole training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupSubset {
    pub name: String,
    pub selection: Selection,
    #[serde(default)]
    pub size: Option<usize>,
}

fn default_probe_examples() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupSweepConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    /// Schedule shared by every run; `warmup_steps` is overridden per row.
    pub base: TrainConfig,
    pub warmups: Vec<u64>,
    pub subsets: Vec<WarmupSubset>,
    pub replicates: usize,
    pub seed: u64,
    /// Needed when any subset is `easiest` or `hardest`.
    #[serde(default)]
    pub scores: Option<ScoreSource>,
    /// Training examples the Hessian probe averages over.
    #[serde(default = "default_probe_examples")]
    pub probe_examples: usize,
    #[serde(default)]
    pub power: PowerIteration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupRow {
    pub warmup: u64,
    pub subset: String,
    pub replicate: usize,
    /// Chance accuracy when the run diverged.
    pub test_acc: f64,
    pub diverged: bool,
    /// Top Hessian eigenvalue right after warmup (at initialization for no warmup).
    pub top_eigenvalue: f64,
}

impl WarmupRow {
    pub fn csv(rows: &[WarmupRow]) -> String {
        let mut s = String::from("warmup,subset,replicate,test_acc,diverged,top_eigenvalue\n");
        for r in rows {
            s.push_str(&format!("{},{},{},{},{},{}\n", r.warmup, r.subset, r.replicate, r.test_acc, r.diverged, r.top_eigenvalue));
        }
        s
    }
}

fn warmup_set(cfg: &WarmupSweepConfig, sub: &WarmupSubset, train_ds: &Dataset, scores: Option<&crate::scores::ScoreTable>) -> Result<Option<Dataset>> {
    let Some(size) = sub.size else {
        return Ok(None);
    };
    let strategy = match sub.selection {
        Selection::Random => Strategy::RandomBalanced,
        Selection::Easiest => Strategy::LowestScore,
        Selection::Hardest => Strategy::HighestScore,
    };
    if sub.selection != Selection::Random && scores.is_none() {
        return Err(Error::Invalid(format!("subset `{}` needs a score source", sub.name)));
    }
    let sel = SubsetSelector { strategy, size, seed: derive_seed(cfg.seed, 77) };
    Ok(Some(select_subset(train_ds, &sel, scores)?))
}

/// Trains every (warmup length, subset, replicate) combination. Replicate `i`
/// uses the same initialization and seeds under every warmup and subset.
pub fn warmup_sweep(cfg: &WarmupSweepConfig) -> Result<Vec<WarmupRow>> {
    if cfg.replicates == 0 || cfg.subsets.is_empty() || cfg.warmups.is_empty() {
        return Err(Error::Invalid("warmup sweep needs replicates, subsets and warmup lengths".into()));
    }
    if let Some(&w) = cfg.warmups.iter().find(|&&w| w >= cfg.base.total_steps) {
        return Err(Error::Invalid(format!("warmup {w} leaves no training after it")));
    }
    let splits = cfg.dataset.load()?;
    let spec = cfg.model.spec()?;
    let needs_scores = cfg.subsets.iter().any(|s| s.selection != Selection::Random && s.size.is_some());
    let scores = match (&cfg.scores, needs_scores) {
        (Some(src), true) => Some(compute_scores(src, &splits.train, &spec, &cfg.base)?),
        _ => None,
    };
    let sets = cfg
        .subsets
        .iter()
        .map(|s| warmup_set(cfg, s, &splits.train, scores.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let probe = splits.train.gather(&(0..cfg.probe_examples.min(splits.train.len())).collect::<Vec<_>>());

    let mut jobs = Vec::new();
    for &w in &cfg.warmups {
        for si in 0..cfg.subsets.len() {
            for rep in 0..cfg.replicates {
                jobs.push((w, si, rep));
            }
        }
    }
    jobs.into_par_iter()
        .map(|(w, si, rep)| {
            let seed = derive_seed(cfg.seed, rep as u64);
            let run_cfg = TrainConfig {
                warmup_steps: w,
                init_seed: seed,
                order_seed: derive_seed(seed, 1),
                augment_seed: derive_seed(seed, 2),
                ..cfg.base.clone()
            };
            let init = spec.initialize(seed);
            let warm_ds = sets[si].as_ref().unwrap_or(&splits.train);
            let (acc, diverged, lambda) = run_one(&init, warm_ds, &splits.train, &splits.test, &probe, &run_cfg, w, cfg.power)?;
            Ok(WarmupRow { warmup: w, subset: cfg.subsets[si].name.clone(), replicate: rep, test_acc: acc, diverged, top_eigenvalue: lambda })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    init: &ParamVector,
    warm_ds: &Dataset,
    full: &Dataset,
    test: &Dataset,
    probe: &Dataset,
    cfg: &TrainConfig,
    warmup: u64,
    power: PowerIteration,
) -> Result<(f64, bool, f64)> {
    let chance = 1.0 / full.classes() as f64;
    let warmed = match train(init, warm_ds, cfg, warmup, None, &[]) {
        Ok(out) => out.state,
        Err(Error::Diverged { .. }) => return Ok((chance, true, f64::NAN)),
        Err(e) => return Err(e),
    };
    let lambda = hessian_top_eigenvalue(&warmed.params, probe, power)?;
    match resume(&warmed, full, cfg, cfg.total_steps - warmup, None, &[]) {
        Ok(out) => Ok((evaluate(out.params(), test)?.accuracy, false, lambda)),
        Err(Error::Diverged { step }) => {
            log::info!("warmup {warmup}: diverged at step {step}");
            Ok((chance, true, lambda))
        }
        Err(e) => Err(e),
    }
}
