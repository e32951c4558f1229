//! One function per subcommand: read the job JSON, run it, write results under `--out`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use rewind_core::checkpoint::Checkpoint;
use rewind_core::experiment::{
    compare_initializations, compute_scores, export_figures, run_experiment_detailed, warmup_sweep as sweep, CurveRow, DatasetConfig,
    ExperimentConfig, ModelConfig, ScoreSource, SparsityCurve, Splits, WarmupRow, WarmupSweepConfig,
};
use rewind_core::landscape::{barrier_of, lmc_onset, loss_barrier, spawn_children, BarrierMode, Metric, ModelLoss};
use rewind_core::model::ModelSpec;
use rewind_core::rng::derive_seed;
use rewind_core::scores::lmc_scores;
use rewind_core::stats::{histogram_csv, mean, std_err};
use rewind_core::train::{evaluate, grad_norm_histogram, train as train_net, TrainConfig};

use crate::Common;

fn load<T: DeserializeOwned>(c: &Common) -> Result<T> {
    let path = c.config.as_ref().context("this subcommand needs --config <path>")?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn out_dir(c: &Common) -> Result<&Path> {
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(&c.out)
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: Serialize>(path: PathBuf, value: &T) -> Result<()> {
    write(path, serde_json::to_vec_pretty(value)?)
}

fn with_seeds(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { init_seed: seed, order_seed: derive_seed(seed, 1), augment_seed: derive_seed(seed, 2), ..cfg.clone() }
}

/// Dataset, model and schedule shared by most jobs.
#[derive(Deserialize)]
struct Base {
    dataset: DatasetConfig,
    model: ModelConfig,
    train: TrainConfig,
    #[serde(default)]
    seed: u64,
}

impl Base {
    fn seed(&self, c: &Common) -> u64 {
        c.seed.unwrap_or(self.seed)
    }

    fn setup(&self) -> Result<(Splits, std::sync::Arc<ModelSpec>)> {
        Ok((self.dataset.load()?, self.model.spec()?))
    }
}

#[derive(Deserialize)]
struct TrainJob {
    #[serde(flatten)]
    base: Base,
    /// Steps to run; the whole schedule when absent.
    #[serde(default)]
    steps: Option<u64>,
    #[serde(default)]
    checkpoint_at: Vec<u64>,
}

pub fn train(c: &Common) -> Result<()> {
    let job: TrainJob = load(c)?;
    let out = out_dir(c)?;
    let (splits, spec) = job.base.setup()?;
    let seed = job.base.seed(c);
    let cfg = with_seeds(&job.base.train, seed);
    let steps = job.steps.unwrap_or(cfg.total_steps);
    let run = train_net(&spec.initialize(seed), &splits.train, &cfg, steps, None, &job.checkpoint_at)?;
    run.state.write_to(&out.join("final.lthc"))?;
    for ck in &run.checkpoints {
        ck.write_to(&out.join(format!("step-{}.lthc", ck.step)))?;
    }
    write(out.join("train_log.csv"), run.log.to_csv())?;
    write(out.join("grad_norm_hist.csv"), histogram_csv(&grad_norm_histogram(&run.log, run.log.0.len(), 20)))?;
    let (tr, te) = (evaluate(run.params(), &splits.train)?, evaluate(run.params(), &splits.test)?);
    let summary = serde_json::json!({
        "steps": steps,
        "train_loss": tr.loss, "train_acc": tr.accuracy,
        "test_loss": te.loss, "test_acc": te.accuracy,
    });
    write_json(out.join("eval.json"), &summary)?;
    println!("test accuracy {:.4} after {steps} steps", te.accuracy);
    Ok(())
}

pub fn imp(c: &Common) -> Result<()> {
    let mut cfg: ExperimentConfig = load(c)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.out_dir = out_dir(c)?.to_path_buf();
    let run = run_experiment_detailed(&cfg)?;
    println!("{}{}", if run.cached { "(cached) " } else { "" }, run.run_dir.display());
    print!("{}", run.curve.to_csv());
    Ok(())
}

#[derive(Deserialize)]
struct El2nJob {
    #[serde(flatten)]
    base: Base,
    t: u64,
    networks: usize,
    /// Label corruption applied before scoring.
    #[serde(default)]
    corruption: f64,
}

pub fn el2n(c: &Common) -> Result<()> {
    let job: El2nJob = load(c)?;
    let out = out_dir(c)?;
    let (splits, spec) = job.base.setup()?;
    let seed = job.base.seed(c);
    let ds = if job.corruption > 0.0 {
        rewind_core::data::corrupt_labels(&splits.train, job.corruption, derive_seed(seed, 7))?
    } else {
        splits.train
    };
    let table = compute_scores(&ScoreSource::El2n { t: job.t, networks: job.networks, seed }, &ds, &spec, &job.base.train)?;
    table.save(&out.join("el2n.csv"))?;
    println!("{} EL2N scores, mean {:.4}", table.len(), table.mean());
    Ok(())
}

/// Trains `count` parents from independent initializations to step `t_r`.
fn parents(base: &Base, splits: &Splits, spec: &std::sync::Arc<ModelSpec>, seed: u64, t_r: u64, count: usize) -> Result<Vec<Checkpoint>> {
    use rayon::prelude::*;
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(seed, 100 + i);
            Ok(train_net(&spec.initialize(s), &splits.train, &with_seeds(&base.train, s), t_r, None, &[])?.state)
        })
        .collect()
}

#[derive(Deserialize)]
struct LmcJob {
    #[serde(flatten)]
    base: Base,
    t_r: u64,
    #[serde(default = "one")]
    parents: usize,
    children: usize,
}

fn one() -> usize {
    1
}

pub fn lmc_score(c: &Common) -> Result<()> {
    let job: LmcJob = load(c)?;
    let out = out_dir(c)?;
    let (splits, spec) = job.base.setup()?;
    let seed = job.base.seed(c);
    let ps = parents(&job.base, &splits, &spec, seed, job.t_r, job.parents)?;
    let table = lmc_scores(&ps, &splits.train, job.children, &job.base.train, derive_seed(seed, 9))?;
    table.save(&out.join("lmc.csv"))?;
    println!("{} LMC scores, mean {:.4}", table.len(), table.mean());
    Ok(())
}

#[derive(Clone, Copy, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Deserialize)]
struct BarrierJob {
    #[serde(flatten)]
    base: Base,
    /// Compare these two checkpoints directly instead of spawning children.
    #[serde(default)]
    endpoints: Option<[PathBuf; 2]>,
    /// Parent: a checkpoint file, or pre-training to `t_r` when absent.
    #[serde(default)]
    parent: Option<PathBuf>,
    #[serde(default)]
    t_r: u64,
    #[serde(default = "two")]
    children: usize,
    metric: Metric,
    mode: BarrierMode,
    #[serde(default)]
    split: Split,
}

fn two() -> usize {
    2
}

pub fn barrier(c: &Common) -> Result<()> {
    let job: BarrierJob = load(c)?;
    let out = out_dir(c)?;
    let (splits, spec) = job.base.setup()?;
    let ds = match job.split {
        Split::Train => &splits.train,
        Split::Test => &splits.test,
    };
    let reports = if let Some([a, b]) = &job.endpoints {
        let (a, b) = (Checkpoint::read_from(a)?, Checkpoint::read_from(b)?);
        vec![barrier_of(&ModelLoss { ds, metric: job.metric }, &a.params, &b.params, job.metric, &job.mode)?]
    } else {
        let seed = job.base.seed(c);
        let parent = match &job.parent {
            Some(p) => Checkpoint::read_from(p)?,
            None => parents(&job.base, &splits, &spec, seed, job.t_r, 1)?.remove(0),
        };
        spawn_children(&parent, job.children, &splits.train, &job.base.train, derive_seed(seed, 9))?
            .iter()
            .map(|pair| loss_barrier(pair, ds, job.metric, &job.mode))
            .collect::<rewind_core::Result<Vec<_>>>()?
    };
    let aggregates: Vec<f64> = reports.iter().map(|r| r.aggregate).collect();
    for (k, r) in reports.iter().enumerate() {
        write(out.join(format!("barrier-{k}.csv")), r.to_csv())?;
    }
    let per_example: Vec<f64> = (0..ds.len()).map(|i| mean(&reports.iter().map(|r| r.per_example[i].1).collect::<Vec<_>>())).collect();
    let summary = serde_json::json!({
        "pairs": reports.len(),
        "aggregates": aggregates,
        "path_max": reports.iter().map(|r| r.path_max).collect::<Vec<_>>(),
        "mean": mean(&aggregates),
        "stderr": std_err(&aggregates),
        "per_example_mean": mean(&per_example),
    });
    write_json(out.join("barrier.json"), &summary)?;
    println!("mean barrier {:.5} over {} pair(s)", mean(&aggregates), reports.len());
    Ok(())
}

#[derive(Deserialize)]
struct OnsetJob {
    #[serde(flatten)]
    base: Base,
    steps: Vec<u64>,
    children: usize,
}

pub fn onset(c: &Common) -> Result<()> {
    let job: OnsetJob = load(c)?;
    let out = out_dir(c)?;
    let (splits, spec) = job.base.setup()?;
    let seed = job.base.seed(c);
    let mut steps = job.steps.clone();
    steps.sort_unstable();
    steps.dedup();
    let Some(&last) = steps.last() else { bail!("`steps` is empty") };
    let cfg = with_seeds(&job.base.train, seed);
    let run = train_net(&spec.initialize(seed), &splits.train, &cfg, last, None, &steps)?;
    let (onset, barriers) = lmc_onset(&run.checkpoints, &splits.train, &cfg, job.children, derive_seed(seed, 9))?;
    let mut csv = String::from("step,barrier\n");
    for (s, b) in steps.iter().zip(&barriers) {
        csv.push_str(&format!("{s},{b}\n"));
    }
    write(out.join("onset.csv"), csv)?;
    write_json(out.join("onset.json"), &serde_json::json!({ "onset": onset, "threshold": rewind_core::landscape::LMC_THRESHOLD }))?;
    match onset {
        Some(s) => println!("linear mode connectivity from step {s}"),
        None => println!("no onset within the probed steps"),
    }
    Ok(())
}

pub fn warmup_sweep(c: &Common) -> Result<()> {
    let mut cfg: WarmupSweepConfig = load(c)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let out = out_dir(c)?;
    let rows = sweep(&cfg)?;
    write(out.join("warmup_sweep.csv"), WarmupRow::csv(&rows))?;
    Ok(())
}

fn read_curve(path: &Path) -> Result<SparsityCurve> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        return Ok(serde_json::from_str(&text)?);
    }
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            bail!("{}: bad curve row `{line}`", path.display());
        }
        rows.push(CurveRow { density: f[0].parse()?, mean: f[1].parse()?, stderr: f[2].parse()?, n: f[3].parse()? });
    }
    let single = rows.iter().all(|r| r.n == 1);
    Ok(SparsityCurve { rows, config_hash: String::new(), stderr_undefined: single })
}

pub fn compare(c: &Common, a: &Path, b: &Path, tolerance: f64) -> Result<()> {
    let (ca, cb) = (read_curve(a)?, read_curve(b)?);
    let verdict = compare_initializations(&ca, &cb, tolerance)?;
    let name = serde_json::to_value(verdict)?;
    println!("{}", name.as_str().unwrap_or_default());
    if c.out.exists() {
        write_json(c.out.join("compare.json"), &serde_json::json!({ "a": a, "b": b, "tolerance": tolerance, "result": verdict }))?;
    }
    Ok(())
}

pub fn export(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let files = export_figures(dir)?;
    if files.is_empty() {
        println!("nothing to export in {}", dir.display());
    }
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}
