//! Linear interpolation between trained networks, loss and error barriers
//! along the segment, the onset of linear mode connectivity, and a
//! finite-difference power iteration for the top Hessian eigenvalue.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Seeds};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec, ParamVector};
use crate::rng::{self, derive_seed, Domain};
use crate::train::{per_example_loss, resume, TrainConfig};

/// Error barriers below this count as zero when locating the onset.
pub const LMC_THRESHOLD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ZeroOneError,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierMode {
    Midpoint,
    Sweep(Vec<f64>),
}

impl BarrierMode {
    /// `{0, 0.1, …, 1}`.
    pub fn default_sweep() -> Self {
        BarrierMode::Sweep((0..=10).map(|i| i as f64 / 10.0).collect())
    }

    fn alphas(&self) -> Vec<f64> {
        match self {
            BarrierMode::Midpoint => vec![0.5],
            BarrierMode::Sweep(grid) => grid.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierReport {
    pub metric: Metric,
    pub mode: BarrierMode,
    /// Mean of the per-example barriers.
    pub aggregate: f64,
    /// Largest excess of the mean loss over the chord on the evaluated grid.
    pub path_max: f64,
    pub per_example: Vec<(u64, f64)>,
    /// Mean loss at `w` (α = 1) and at `w′` (α = 0).
    pub endpoint_losses: (f64, f64),
}

impl BarrierReport {
    pub fn values(&self) -> Vec<f64> {
        self.per_example.iter().map(|&(_, b)| b).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,barrier\n");
        for (id, b) in &self.per_example {
            s.push_str(&format!("{id},{b}\n"));
        }
        s
    }
}

/// Per-example losses of a parameter vector, the quantity whose barrier is measured.
pub trait PerExampleLoss {
    fn ids(&self) -> Vec<u64>;
    fn per_example(&self, params: &ParamVector) -> Result<Vec<f64>>;
}

/// Cross-entropy or 0-1 error of a model on a dataset.
pub struct ModelLoss<'a> {
    pub ds: &'a Dataset,
    pub metric: Metric,
}

impl PerExampleLoss for ModelLoss<'_> {
    fn ids(&self) -> Vec<u64> {
        self.ds.ids().to_vec()
    }

    fn per_example(&self, params: &ParamVector) -> Result<Vec<f64>> {
        let (ce, err) = per_example_loss(params, self.ds)?;
        Ok(match self.metric {
            Metric::CrossEntropy => ce,
            Metric::ZeroOneError => err.into_iter().map(f64::from).collect(),
        })
    }
}

/// `α·w + (1 − α)·w′`.
pub fn interpolate(w: &ParamVector, w_prime: &ParamVector, alpha: f64) -> Result<ParamVector> {
    if !w.same_layout(w_prime) {
        return Err(Error::Shape("interpolating parameter vectors of different layouts".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let a = alpha as f32;
    let values = w.values().iter().zip(w_prime.values()).map(|(&x, &y)| y + a * (x - y)).collect();
    ParamVector::from_values(w.spec(), values)
}

/// Barrier of an arbitrary per-example loss along the segment from `w′` to `w`.
pub fn barrier_of(loss: &dyn PerExampleLoss, w: &ParamVector, w_prime: &ParamVector, metric: Metric, mode: &BarrierMode) -> Result<BarrierReport> {
    let ids = loss.ids();
    if ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !w.same_layout(w_prime) {
        return Err(Error::Shape("barrier between parameter vectors of different layouts".into()));
    }
    let alphas = mode.alphas();
    if alphas.is_empty() {
        return Err(Error::Invalid("empty alpha grid".into()));
    }
    let at_w = loss.per_example(w)?;
    let at_wp = loss.per_example(w_prime)?;
    let n = ids.len() as f64;
    let mut best = vec![f64::NEG_INFINITY; ids.len()];
    let mut path_max = f64::NEG_INFINITY;
    for &alpha in &alphas {
        let mid = loss.per_example(&interpolate(w, w_prime, alpha)?)?;
        let mut total = 0.0;
        for i in 0..ids.len() {
            let excess = mid[i] - (at_wp[i] + alpha * (at_w[i] - at_wp[i]));
            best[i] = best[i].max(excess);
            total += excess;
        }
        path_max = path_max.max(total / n);
    }
    let per_example: Vec<(u64, f64)> = ids.into_iter().zip(best).collect();
    Ok(BarrierReport {
        metric,
        mode: mode.clone(),
        aggregate: mean_sorted(per_example.iter().map(|p| p.1)),
        path_max,
        per_example,
        endpoint_losses: (at_w.iter().sum::<f64>() / n, at_wp.iter().sum::<f64>() / n),
    })
}

/// Order-independent mean (values are summed in sorted order).
pub(crate) fn mean_sorted(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Two children of one parent, differing only in data order and augmentation.
#[derive(Clone, Debug)]
pub struct ChildPair {
    pub parent: [u8; 32],
    pub a: ParamVector,
    pub b: ParamVector,
    pub seeds: (Seeds, Seeds),
}

pub fn loss_barrier(pair: &ChildPair, ds: &Dataset, metric: Metric, mode: &BarrierMode) -> Result<BarrierReport> {
    barrier_of(&ModelLoss { ds, metric }, &pair.a, &pair.b, metric, mode)
}

/// Seeds of child `k` derived from `seed_base`.
pub fn child_seeds(parent: &Checkpoint, seed_base: u64, k: u64) -> Seeds {
    Seeds { init: parent.seeds.init, order: derive_seed(seed_base, 2 * k), augment: derive_seed(seed_base, 2 * k + 1) }
}

/// Trains `count` copies of `parent` to the end of `cfg`'s schedule and
/// returns every unordered pair.
pub fn spawn_children(parent: &Checkpoint, count: usize, ds: &Dataset, cfg: &TrainConfig, seed_base: u64) -> Result<Vec<ChildPair>> {
    spawn_with_seeds(parent, &(0..count as u64).map(|k| child_seeds(parent, seed_base, k)).collect::<Vec<_>>(), ds, cfg)
}

pub fn spawn_with_seeds(parent: &Checkpoint, seeds: &[Seeds], ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<ChildPair>> {
    if parent.step > cfg.total_steps {
        return Err(Error::Invalid(format!("parent step {} beyond the schedule", parent.step)));
    }
    let steps = cfg.total_steps - parent.step;
    let children = seeds
        .par_iter()
        .map(|s| {
            let child_cfg = TrainConfig { order_seed: s.order, augment_seed: s.augment, ..cfg.clone() };
            resume(parent, ds, &child_cfg, steps, None, &[]).map(|o| o.state.params)
        })
        .collect::<Result<Vec<_>>>()?;
    let hash = parent.hash();
    let mut pairs = Vec::new();
    for i in 0..children.len() {
        for j in i + 1..children.len() {
            pairs.push(ChildPair { parent: hash, a: children[i].clone(), b: children[j].clone(), seeds: (seeds[i], seeds[j]) });
        }
    }
    Ok(pairs)
}

/// Smallest step whose barrier, and every later one, is below [`LMC_THRESHOLD`].
pub fn onset_from_barriers(steps: &[u64], barriers: &[f64]) -> Option<u64> {
    let mut onset = None;
    for (&s, &b) in steps.iter().zip(barriers).rev() {
        if b < LMC_THRESHOLD {
            onset = Some(s);
        } else {
            break;
        }
    }
    onset
}

/// Mean midpoint 0-1 barrier over the child pairs of each parent, and the
/// resulting onset step.
pub fn lmc_onset(parents: &[Checkpoint], ds: &Dataset, cfg: &TrainConfig, children: usize, seed_base: u64) -> Result<(Option<u64>, Vec<f64>)> {
    if parents.windows(2).any(|w| w[0].step >= w[1].step) {
        return Err(Error::Invalid("parent checkpoints must have increasing steps".into()));
    }
    let mut barriers = Vec::with_capacity(parents.len());
    for p in parents {
        let pairs = spawn_children(p, children.max(2), ds, cfg, seed_base)?;
        let mut total = 0.0;
        for pair in &pairs {
            total += loss_barrier(pair, ds, Metric::ZeroOneError, &BarrierMode::Midpoint)?.aggregate;
        }
        barriers.push(total / pairs.len() as f64);
    }
    let steps: Vec<u64> = parents.iter().map(|p| p.step).collect();
    Ok((onset_from_barriers(&steps, &barriers), barriers))
}

/// 0-1 loss per example ID.
pub fn per_example_error(params: &ParamVector, ds: &Dataset) -> Result<Vec<(u64, u8)>> {
    let (_, err) = per_example_loss(params, ds)?;
    Ok(ds.ids().iter().copied().zip(err).collect())
}

/// Gradient of a scalar objective, evaluated in 64-bit arithmetic.
pub trait GradientOracle {
    fn dim(&self) -> usize;
    fn grad(&self, w: &[f64]) -> Result<Vec<f64>>;
}

/// Mean cross-entropy of a model over a fixed set of examples.
pub struct ModelObjective<'a> {
    pub spec: &'a ModelSpec,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl<'a> ModelObjective<'a> {
    pub fn new(spec: &'a ModelSpec, ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let positions: Vec<usize> = (0..ds.len()).collect();
        let (inputs, labels) = ds.batch(&positions);
        Ok(ModelObjective { spec, inputs: inputs.into_iter().map(f64::from).collect(), labels })
    }
}

impl GradientOracle for ModelObjective<'_> {
    fn dim(&self) -> usize {
        self.spec.total
    }

    fn grad(&self, w: &[f64]) -> Result<Vec<f64>> {
        const CHUNK: usize = 1000;
        let n = self.spec.example_len();
        let mut total = vec![0.0; self.spec.total];
        let count = self.labels.len() as f64;
        for (xs, ys) in self.inputs.chunks(CHUNK * n).zip(self.labels.chunks(CHUNK)) {
            let (_, g) = model::loss_and_grad(self.spec, w, xs, ys)?;
            let weight = ys.len() as f64 / count;
            total.iter_mut().zip(g).for_each(|(t, g)| *t += weight * g);
        }
        Ok(total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerIteration {
    pub iterations: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        PowerIteration { iterations: 100, tolerance: 1e-4, seed: 0 }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `H·v ≈ [g(w + εv) − g(w − εv)] / 2ε` with `ε = 1e-3·(1 + ‖w‖)/‖v‖`.
pub fn hvp(oracle: &dyn GradientOracle, w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let vn = norm(v);
    if vn == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let eps = 1e-3 * (1.0 + norm(w)) / vn;
    let plus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a + eps * b).collect();
    let minus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a - eps * b).collect();
    let (gp, gm) = (oracle.grad(&plus)?, oracle.grad(&minus)?);
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
}

/// Power iteration on finite-difference Hessian-vector products, returning
/// the Rayleigh quotient once it changes by less than `tolerance` (relative)
/// or the iteration cap is reached.
pub fn top_eigenvalue(oracle: &dyn GradientOracle, w: &[f64], opts: PowerIteration) -> Result<f64> {
    if opts.iterations == 0 {
        return Err(Error::Invalid("power iteration needs at least one iteration".into()));
    }
    if w.len() != oracle.dim() {
        return Err(Error::Shape(format!("{} parameters for an objective of {}", w.len(), oracle.dim())));
    }
    let mut rng = rng::stream(opts.seed, Domain::Probe, 0);
    let mut v: Vec<f64> = (0..w.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut lambda = f64::NAN;
    for _ in 0..opts.iterations {
        let hv = hvp(oracle, w, &v)?;
        let next: f64 = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
        if !next.is_finite() {
            return Err(Error::NonFinite("Rayleigh quotient"));
        }
        let converged = lambda.is_finite() && (next - lambda).abs() <= opts.tolerance * next.abs();
        lambda = next;
        let hn = norm(&hv);
        if converged || hn == 0.0 {
            break;
        }
        v = hv.iter().map(|x| x / hn).collect();
    }
    Ok(lambda)
}

/// Top eigenvalue of the mean cross-entropy Hessian of `params` on `ds`.
pub fn hessian_top_eigenvalue(params: &ParamVector, ds: &Dataset, opts: PowerIteration) -> Result<f64> {
    let objective = ModelObjective::new(params.spec(), ds)?;
    let w: Vec<f64> = params.values().iter().map(|&v| v as f64).collect();
    top_eigenvalue(&objective, &w, opts)
}
