//! Experiment configuration, content-addressed run directories and the
//! analyses built on top of IMP runs.
//!
//! A run directory is named after the SHA-256 of the canonical config JSON
//! (with the output directory left out) and the hashes of every input file.
//! It holds:
//!
//! ```text
//! config.json      resolved configuration
//! manifest.json    tool version, config hash, input and artifact hashes
//! scores.csv/json  difficulty scores used for the subset, if any
//! rep-<i>/         w_tr.lthc, mask-<r>.lthm, imp.csv, pretrain_log.csv, result.json
//! curve.csv/json   the aggregated sparsity curve
//! ```

mod curve;
mod export;
mod svg;
mod warmup;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{corrupt_labels, load_dataset, normalize_with, channel_stats, select_subset, generate, DataFormat, Dataset, Strategy, SubsetSelector, SyntheticSpec};
use crate::error::{Error, Result};
use crate::imp::{imp_run, ImpPlan, RoundRecord};
use crate::model::{cnn_spec, mlp_spec, ModelSpec};
use crate::prune::PruneScope;
use crate::rng::derive_seed;
use crate::scores::{el2n_scores, ScoreTable};
use crate::train::{evaluate, TrainConfig};

pub use curve::{compare_initializations, matching_initialization_check, pooled, CurveRow, Dominance, SparsityCurve};
pub use export::export_figures;
pub use warmup::{warmup_sweep, WarmupRow, WarmupSubset, WarmupSweepConfig};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Generated data; the last `test_per_class` examples of each class form the test split.
    Synthetic { spec: SyntheticSpec, test_per_class: usize },
    Files { format: DataFormat, train: PathBuf, test: PathBuf },
}

/// Train and test splits, both normalized with the training statistics.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Splits> {
        let (train, test) = match self {
            DatasetConfig::Synthetic { spec, test_per_class } => {
                let all = generate(&SyntheticSpec { per_class: spec.per_class + test_per_class, ..spec.clone() })?;
                let mut seen = vec![0; all.classes()];
                let (mut tr, mut te) = (Vec::new(), Vec::new());
                for (pos, &y) in all.labels().iter().enumerate() {
                    seen[y] += 1;
                    if seen[y] > spec.per_class { te.push(pos) } else { tr.push(pos) }
                }
                (all.gather(&tr), all.gather(&te))
            }
            DatasetConfig::Files { format, train, test } => (load_dataset(train, *format)?, load_dataset(test, *format)?),
        };
        if train.is_empty() || test.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let stats = channel_stats(&train);
        Ok(Splits { train: normalize_with(&train, &stats)?, test: normalize_with(&test, &stats)? })
    }

    fn input_files(&self) -> Vec<PathBuf> {
        match self {
            DatasetConfig::Synthetic { .. } => Vec::new(),
            DatasetConfig::Files { train, test, .. } => vec![train.clone(), test.clone()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelConfig {
    Mlp { widths: Vec<usize> },
    Cnn { input: (usize, usize, usize), conv: Vec<usize>, classes: usize },
}

impl ModelConfig {
    pub fn spec(&self) -> Result<Arc<ModelSpec>> {
        match self {
            ModelConfig::Mlp { widths } => Ok(Arc::new(mlp_spec(widths)?)),
            ModelConfig::Cnn { input, conv, classes } => Ok(Arc::new(cnn_spec(*input, conv, *classes)?)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Random,
    Easiest,
    Hardest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreSource {
    /// EL2N computed on the (possibly corrupted) training split.
    El2n { t: u64, networks: usize, seed: u64 },
    /// A saved score table (`id,score` CSV with its JSON sidecar).
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetConfig {
    pub selection: Selection,
    pub size: usize,
    #[serde(default)]
    pub scores: Option<ScoreSource>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewindName {
    Zero,
    HalfTStar,
    TStar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RewindStep {
    Named(RewindName),
    Step(u64),
}

impl RewindStep {
    pub fn resolve(self, t_star: u64) -> u64 {
        match self {
            RewindStep::Named(RewindName::Zero) => 0,
            RewindStep::Named(RewindName::HalfTStar) => t_star / 2,
            RewindStep::Named(RewindName::TStar) => t_star,
            RewindStep::Step(s) => s,
        }
    }
}

fn default_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    /// Pre-training subset; all (possibly corrupted) training data when absent.
    #[serde(default)]
    pub subset: Option<SubsetConfig>,
    pub t_r: RewindStep,
    pub t_star: u64,
    pub rounds: u32,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default)]
    pub scope: PruneScope,
    pub replicates: usize,
    pub seed: u64,
    /// Fraction of training labels randomized for pre-training (and scoring).
    #[serde(default)]
    pub corruption: f64,
    /// Pre-training schedule; its seeds are replaced per replicate.
    pub pretrain: TrainConfig,
    /// Main-phase schedule; its seeds are replaced per replicate.
    pub train: TrainConfig,
    #[serde(default)]
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Invalid("replicates must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.corruption) {
            return Err(Error::Invalid(format!("corruption {} outside [0, 1]", self.corruption)));
        }
        if let Some(s) = &self.subset {
            if s.selection != Selection::Random && s.scores.is_none() {
                return Err(Error::Invalid("easiest/hardest subsets need a score source".into()));
            }
        }
        self.pretrain.validate()?;
        self.train.validate()
    }

    pub fn rewind_step(&self) -> u64 {
        self.t_r.resolve(self.t_star)
    }

    /// Hash of the canonical config (output directory excluded) and input files.
    pub fn content_hash(&self) -> Result<(String, BTreeMap<String, String>)> {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let mut inputs = BTreeMap::new();
        for path in self.input_files() {
            inputs.insert(path.display().to_string(), file_hash(&path)?);
        }
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&canonical)?);
        for (p, digest) in &inputs {
            h.update(p.as_bytes());
            h.update(digest.as_bytes());
        }
        Ok((hex::encode(h.finalize()), inputs))
    }

    fn input_files(&self) -> Vec<PathBuf> {
        let mut files = self.dataset.input_files();
        if let Some(SubsetConfig { scores: Some(ScoreSource::File { path }), .. }) = &self.subset {
            files.push(path.clone());
        }
        files
    }

    /// Seeds used by replicate `i`: `(init, pretrain order/augment, main order/augment)`.
    pub fn replicate_configs(&self, i: usize) -> (u64, TrainConfig, TrainConfig) {
        let base = derive_seed(self.seed, 1000 + i as u64);
        let init = derive_seed(base, 0);
        let pre = TrainConfig { init_seed: init, order_seed: derive_seed(base, 1), augment_seed: derive_seed(base, 2), ..self.pretrain.clone() };
        let main = TrainConfig { init_seed: init, order_seed: derive_seed(base, 3), augment_seed: derive_seed(base, 4), ..self.train.clone() };
        (init, pre, main)
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
}

/// One replicate's IMP records plus the accuracy of `w_{t_r}` itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub t_r: u64,
    pub pretrain_test_acc: f64,
    pub pretrain_train_acc: f64,
    /// Mean minibatch gradient norm over the pre-training steps (none when `t_r = 0`).
    pub pretrain_grad_norm: Option<f64>,
    pub records: Vec<RoundRecord>,
}

#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub run_dir: PathBuf,
    pub curve: SparsityCurve,
    pub replicates: Vec<ReplicateResult>,
    /// True when everything was read back from a completed run directory.
    pub cached: bool,
}

impl ExperimentRun {
    pub fn rewind_point(&self, replicate: usize) -> Result<Checkpoint> {
        Checkpoint::read_from(&self.run_dir.join(format!("rep-{replicate}")).join("w_tr.lthc"))
    }
}

pub fn run_dir_for(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let (hash, _) = cfg.content_hash()?;
    let label = if cfg.name.is_empty() { "run" } else { cfg.name.as_str() };
    Ok(cfg.out_dir.join("runs").join(format!("{label}-{}", &hash[..16])))
}

/// Builds the pre-training set (corruption, then subset selection) for a replicate.
pub fn pretrain_set(cfg: &ExperimentConfig, splits: &Splits, spec: &Arc<ModelSpec>, run_dir: Option<&Path>, replicate: usize) -> Result<Dataset> {
    let corrupted = corrupted_train(cfg, splits)?;
    let Some(sub) = &cfg.subset else { return Ok(corrupted) };
    let (strategy, table) = match sub.selection {
        Selection::Random => (Strategy::RandomBalanced, None),
        Selection::Easiest => (Strategy::LowestScore, Some(scores_for(cfg, sub, &corrupted, spec, run_dir)?)),
        Selection::Hardest => (Strategy::HighestScore, Some(scores_for(cfg, sub, &corrupted, spec, run_dir)?)),
    };
    let sel = SubsetSelector { strategy, size: sub.size, seed: derive_seed(cfg.seed, 2000 + replicate as u64) };
    select_subset(&corrupted, &sel, table.as_ref())
}

fn corrupted_train(cfg: &ExperimentConfig, splits: &Splits) -> Result<Dataset> {
    if cfg.corruption > 0.0 {
        corrupt_labels(&splits.train, cfg.corruption, derive_seed(cfg.seed, 7))
    } else {
        Ok(splits.train.clone())
    }
}

fn scores_for(cfg: &ExperimentConfig, sub: &SubsetConfig, ds: &Dataset, spec: &Arc<ModelSpec>, run_dir: Option<&Path>) -> Result<ScoreTable> {
    let cached = run_dir.map(|d| d.join("scores.csv"));
    if let Some(path) = cached.as_ref().filter(|p| p.exists()) {
        return ScoreTable::load(path);
    }
    let table = compute_scores(sub.scores.as_ref().expect("validated"), ds, spec, &cfg.pretrain)?;
    if let Some(path) = cached {
        table.save(&path)?;
    }
    Ok(table)
}

/// Loads or computes difficulty scores for `ds`. EL2N networks train with
/// `cfg`'s schedule (extended to reach `t` if needed).
pub fn compute_scores(source: &ScoreSource, ds: &Dataset, spec: &Arc<ModelSpec>, cfg: &TrainConfig) -> Result<ScoreTable> {
    match source {
        ScoreSource::File { path } => ScoreTable::load(path),
        ScoreSource::El2n { t, networks, seed } => {
            let seeds: Vec<u64> = (0..*networks as u64).map(|k| derive_seed(*seed, k)).collect();
            let score_cfg = TrainConfig { total_steps: cfg.total_steps.max(*t), ..cfg.clone() };
            el2n_scores(spec, ds, *t, &score_cfg, &seeds)
        }
    }
}

/// Runs (or resumes, or reads back) every replicate of an experiment.
pub fn run_experiment_detailed(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    let (hash, inputs) = cfg.content_hash()?;
    let run_dir = run_dir_for(cfg)?;
    if let Some(run) = load_cached(&run_dir, &hash, &inputs)? {
        return Ok(run);
    }
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    write_json(&run_dir.join("config.json"), &serde_json::json!({ "config": cfg, "t_r": cfg.rewind_step() }))?;

    let splits = cfg.dataset.load()?;
    let spec = cfg.model.spec()?;
    let t_r = cfg.rewind_step();
    // scores are shared by all replicates; compute them once up front
    pretrain_set(cfg, &splits, &spec, Some(&run_dir), 0)?;

    let replicates = (0..cfg.replicates)
        .into_par_iter()
        .map(|i| run_replicate(cfg, &splits, &spec, &run_dir, i, t_r))
        .collect::<Result<Vec<_>>>()?;

    let points: Vec<Vec<(f64, f64)>> = replicates.iter().map(|r| r.records.iter().map(|x| (x.density, x.test_acc)).collect()).collect();
    let curve = SparsityCurve::from_replicates(&points, &hash)?;
    std::fs::write(run_dir.join("curve.csv"), curve.to_csv()).map_err(|e| Error::io(&run_dir, e))?;
    write_json(&run_dir.join("curve.json"), &curve)?;
    let manifest = Manifest { tool_version: TOOL_VERSION.to_string(), config_hash: hash, inputs, artifacts: artifact_hashes(&run_dir)? };
    write_json(&run_dir.join("manifest.json"), &manifest)?;
    Ok(ExperimentRun { run_dir, curve, replicates, cached: false })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<SparsityCurve> {
    Ok(run_experiment_detailed(cfg)?.curve)
}

fn run_replicate(cfg: &ExperimentConfig, splits: &Splits, spec: &Arc<ModelSpec>, run_dir: &Path, i: usize, t_r: u64) -> Result<ReplicateResult> {
    let dir = run_dir.join(format!("rep-{i}"));
    let done = dir.join("result.json");
    if done.exists() {
        let bytes = std::fs::read(&done).map_err(|e| Error::io(&done, e))?;
        return Ok(serde_json::from_slice(&bytes)?);
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let pre_ds = pretrain_set(cfg, splits, spec, Some(run_dir), i)?;
    let (init_seed, cfg_pre, cfg_main) = cfg.replicate_configs(i);
    let init = spec.initialize(init_seed);
    let plan = ImpPlan {
        pretrain: &pre_ds,
        train: &splits.train,
        test: &splits.test,
        t_r,
        rounds: cfg.rounds,
        fraction: cfg.fraction,
        scope: cfg.scope,
        cfg_pre,
        cfg_main,
    };
    let result = imp_run(&init, &plan)?;
    result.rewind_point.write_to(&dir.join("w_tr.lthc"))?;
    for m in &result.masks {
        m.write_to(&dir.join(format!("mask-{}.lthm", m.round())))?;
    }
    std::fs::write(dir.join("imp.csv"), result.to_csv()).map_err(|e| Error::io(&dir, e))?;
    std::fs::write(dir.join("pretrain_log.csv"), result.pretrain_log.to_csv()).map_err(|e| Error::io(&dir, e))?;
    let rep = ReplicateResult {
        replicate: i,
        t_r,
        pretrain_test_acc: evaluate(&result.rewind_point.params, &splits.test)?.accuracy,
        pretrain_train_acc: evaluate(&result.rewind_point.params, &splits.train)?.accuracy,
        pretrain_grad_norm: (t_r > 0).then(|| result.pretrain_log.mean_grad_norm(t_r as usize)),
        records: result.records,
    };
    write_json(&done, &rep)?;
    Ok(rep)
}

fn load_cached(run_dir: &Path, hash: &str, inputs: &BTreeMap<String, String>) -> Result<Option<ExperimentRun>> {
    let manifest_path = run_dir.join("manifest.json");
    if !manifest_path.exists() {
        return Ok(None);
    }
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?)?;
    if manifest.config_hash != hash || &manifest.inputs != inputs || artifact_hashes(run_dir)? != manifest.artifacts {
        log::warn!("cache at {} is stale; recomputing", run_dir.display());
        return Ok(None);
    }
    let curve: SparsityCurve = serde_json::from_slice(&std::fs::read(run_dir.join("curve.json")).map_err(|e| Error::io(run_dir, e))?)?;
    let mut replicates = Vec::new();
    for i in 0.. {
        let path = run_dir.join(format!("rep-{i}")).join("result.json");
        if !path.exists() {
            break;
        }
        replicates.push(serde_json::from_slice(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?)?);
    }
    Ok(Some(ExperimentRun { run_dir: run_dir.to_path_buf(), curve, replicates, cached: true }))
}

/// SHA-256 of every file under `dir` except the manifest, keyed by relative path.
fn artifact_hashes(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                let rel = p.strip_prefix(dir).expect("walked from dir").display().to_string();
                out.insert(rel, file_hash(&p)?);
            }
        }
    }
    Ok(out)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}
