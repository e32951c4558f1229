//! Minibatch SGD with classical momentum, coupled weight decay, linear warmup
//! and milestone decay.
//!
//! The data order is a pure function of the global step: step `s` reads batch
//! `s mod b` of the permutation for epoch `s / b` (with `b` batches per
//! epoch), and its augmentation draws come from a stream keyed by `s`. A run
//! can therefore stop at any step and resume to the same bits.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Seeds};
use crate::data::{augment, epoch_order, Dataset};
use crate::error::{Error, Result};
use crate::model::{self, ParamVector};
use crate::prune::{apply_mask_in_place, PruneMask};
use crate::rng::{self, Domain};
use crate::stats::{histogram, Bin};
use crate::tensor::{Tensor, PROB_FLOOR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_milestones: Vec<u64>,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub order_seed: u64,
    pub augment_seed: u64,
    pub init_seed: u64,
    /// Pad-and-crop plus horizontal flip on every batch.
    #[serde(default)]
    pub augment: bool,
    /// Zero the momentum buffer instead of restoring it when IMP rewinds.
    #[serde(default)]
    pub reset_momentum_on_rewind: bool,
}

impl TrainConfig {
    /// Main-phase settings of the CIFAR-10 / ResNet-20 runs.
    pub fn cifar10() -> Self {
        TrainConfig {
            batch_size: 128,
            peak_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_factor: 0.1,
            lr_milestones: vec![31_200, 46_800],
            warmup_steps: 0,
            total_steps: 62_400,
            order_seed: 0,
            augment_seed: 0,
            init_seed: 0,
            augment: true,
            reset_momentum_on_rewind: false,
        }
    }

    /// Pre-training settings of the CIFAR-10 runs (learning rate 0.4).
    pub fn cifar10_pretrain() -> Self {
        TrainConfig { peak_lr: 0.4, ..Self::cifar10() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::Invalid(why));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return bad(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.lr_decay_factor <= 0.0 {
            return bad("momentum in [0, 1), weight_decay ≥ 0 and lr_decay_factor > 0 required".into());
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones {:?} are not strictly increasing", self.lr_milestones));
        }
        if self.lr_milestones.last().is_some_and(|&m| m >= self.total_steps) {
            return bad(format!("milestones {:?} must precede total_steps {}", self.lr_milestones, self.total_steps));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!("warmup {} exceeds total_steps {}", self.warmup_steps, self.total_steps));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds { init: self.init_seed, order: self.order_seed, augment: self.augment_seed }
    }
}

/// Learning rate used for the update at `step`.
pub fn lr_at_step(cfg: &TrainConfig, step: u64) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let passed = cfg.lr_milestones.iter().filter(|&&m| step >= m).count();
    cfg.peak_lr * cfg.lr_decay_factor.powi(passed as i32)
}

/// One classical-momentum update in place:
/// `g = grad + wd·w`, `buf = μ·buf + g`, `w = w − lr·buf`.
/// Masked coordinates get no update and are held at exactly zero.
pub fn sgd_step(
    params: &mut [f32],
    buf: &mut [f32],
    grad: &[f32],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    mask: Option<&PruneMask>,
) {
    let (lr, mu, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    for i in 0..params.len() {
        let g = grad[i] + wd * params[i];
        buf[i] = mu * buf[i] + g;
        params[i] -= lr * buf[i];
    }
    if let Some(m) = mask {
        apply_mask_in_place(params, m);
        apply_mask_in_place(buf, m);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog(pub Vec<StepRecord>);

impl StepLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss,grad_norm\n");
        for r in &self.0 {
            s.push_str(&format!("{},{},{},{}\n", r.step, r.lr, r.loss, r.grad_norm));
        }
        s
    }

    pub fn mean_grad_norm(&self, first_k: usize) -> f64 {
        let norms: Vec<f64> = self.0.iter().take(first_k).map(|r| r.grad_norm).collect();
        crate::stats::mean(&norms)
    }
}

/// Histogram of the first `first_k` per-step gradient norms (all of them if
/// the log is shorter).
pub fn grad_norm_histogram(log: &StepLog, first_k: usize, bins: usize) -> Vec<Bin> {
    let norms: Vec<f64> = log.0.iter().take(first_k).map(|r| r.grad_norm).collect();
    histogram(&norms, bins)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// State after the last executed step.
    pub state: Checkpoint,
    pub log: StepLog,
    /// Snapshots at the requested steps, in step order.
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainOutcome {
    pub fn params(&self) -> &ParamVector {
        &self.state.params
    }
}

/// Trains from `params` (step 0, zero momentum) for exactly `steps` updates.
pub fn train(
    params: &ParamVector,
    ds: &Dataset,
    cfg: &TrainConfig,
    steps: u64,
    mask: Option<&PruneMask>,
    checkpoint_at: &[u64],
) -> Result<TrainOutcome> {
    let start = Checkpoint { params: params.clone(), momentum: None, step: 0, seeds: cfg.seeds(), mask: None };
    resume(&start, ds, cfg, steps, mask, checkpoint_at)
}

/// Continues from a checkpoint for `steps` more updates, using the global
/// step for the schedule and the data order.
pub fn resume(
    from: &Checkpoint,
    ds: &Dataset,
    cfg: &TrainConfig,
    steps: u64,
    mask: Option<&PruneMask>,
    checkpoint_at: &[u64],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let end = from.step + steps;
    if end > cfg.total_steps {
        return Err(Error::Invalid(format!("training to step {end} exceeds total_steps {}", cfg.total_steps)));
    }
    let spec = from.params.spec().clone();
    if ds.example_len() != spec.example_len() {
        return Err(Error::Shape(format!("examples of {} values for a model taking {}", ds.example_len(), spec.example_len())));
    }
    if let Some(m) = mask {
        if m.keep().len() != spec.total {
            return Err(Error::Shape("mask does not match the parameter layout".into()));
        }
    }
    let mut params = from.params.values().to_vec();
    let mut buf = from.momentum.clone().unwrap_or_else(|| vec![0.0; spec.total]);
    if let Some(m) = mask {
        apply_mask_in_place(&mut params, m);
        apply_mask_in_place(&mut buf, m);
    }
    let mask_hash = mask.map(|m| m.checksum());
    let snapshot = |params: &[f32], buf: &[f32], step: u64| -> Result<Checkpoint> {
        Ok(Checkpoint {
            params: ParamVector::from_values(&spec, params.to_vec())?,
            momentum: Some(buf.to_vec()),
            step,
            seeds: cfg.seeds(),
            mask: mask_hash,
        })
    };

    let n = ds.len();
    let per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let (c, h, w) = ds.image_shape();
    let mut order: Option<(u64, Vec<usize>)> = None;
    let mut log = Vec::with_capacity(steps as usize);
    let mut checkpoints = Vec::new();
    let mut wanted: Vec<u64> = checkpoint_at.iter().copied().filter(|s| (from.step..=end).contains(s)).collect();
    wanted.sort_unstable();
    wanted.dedup();
    let mut wanted = wanted.into_iter().peekable();

    for step in from.step..end {
        if wanted.next_if_eq(&step).is_some() {
            checkpoints.push(snapshot(&params, &buf, step)?);
        }
        let epoch = step / per_epoch;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, epoch_order(n, cfg.order_seed, epoch)));
        }
        let perm = &order.as_ref().unwrap().1;
        let b = (step % per_epoch) as usize;
        let positions = &perm[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
        let (mut inputs, labels) = ds.batch(positions);
        if cfg.augment {
            let batch = Tensor::new(vec![labels.len(), c, h, w], inputs)?;
            inputs = augment(&batch, &mut rng::stream(cfg.augment_seed, Domain::Augment, step))?.into_data();
        }
        let (loss, mut grad) = model::loss_and_grad(&spec, &params, &inputs, &labels).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { step },
            e => e,
        })?;
        if let Some(m) = mask {
            apply_mask_in_place(&mut grad, m);
        }
        let grad_norm = grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged { step });
        }
        let lr = lr_at_step(cfg, step);
        sgd_step(&mut params, &mut buf, &grad, lr, cfg.momentum, cfg.weight_decay, mask);
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step });
        }
        log.push(StepRecord { step, lr, loss: loss as f64, grad_norm });
    }
    if wanted.next_if_eq(&end).is_some() {
        checkpoints.push(snapshot(&params, &buf, end)?);
    }
    Ok(TrainOutcome { state: snapshot(&params, &buf, end)?, log: StepLog(log), checkpoints })
}

const EVAL_CHUNK: usize = 500;

/// Softmax outputs for every example, `N × K` row-major.
pub fn probabilities(params: &ParamVector, ds: &Dataset) -> Result<Vec<f32>> {
    let spec = params.spec();
    let mut out = Vec::with_capacity(ds.len() * spec.classes);
    let positions: Vec<usize> = (0..ds.len()).collect();
    for chunk in positions.chunks(EVAL_CHUNK) {
        let (inputs, _) = ds.batch(chunk);
        let z = model::logits(spec, params.values(), &inputs)?;
        out.extend_from_slice(crate::tensor::softmax(&z)?.data());
    }
    Ok(out)
}

/// Per-example cross-entropy (probability floored) and 0-1 error.
pub fn per_example_loss(params: &ParamVector, ds: &Dataset) -> Result<(Vec<f64>, Vec<u8>)> {
    let k = params.spec().classes;
    let probs = probabilities(params, ds)?;
    let mut ce = Vec::with_capacity(ds.len());
    let mut err = Vec::with_capacity(ds.len());
    for (row, &y) in probs.chunks(k).zip(ds.labels()) {
        ce.push(-(row[y] as f64).max(PROB_FLOOR).ln());
        err.push((argmax(row) != y) as u8);
    }
    Ok((ce, err))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eval {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn evaluate(params: &ParamVector, ds: &Dataset) -> Result<Eval> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (ce, err) = per_example_loss(params, ds)?;
    let n = ds.len() as f64;
    Ok(Eval { loss: ce.iter().sum::<f64>() / n, accuracy: 1.0 - err.iter().map(|&e| e as f64).sum::<f64>() / n })
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    // first maximum wins, matching the tie rule used everywhere else
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
