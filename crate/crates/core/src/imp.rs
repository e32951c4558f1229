//! Iterative magnitude pruning with weight rewinding.
//!
//! 1. Pre-train `w₀` for `t_r` steps on the pre-training set to get `w_{t_r}`.
//! 2. For each round: train `m ⊙ w_{t_r}` on the full set from step `t_r` to
//!    the end of the schedule, prune the smallest surviving weights, rewind.
//! 3. Train the last mask to completion.
//!
//! Every trained network is evaluated, so one run yields `rounds + 1` points
//! of an accuracy-versus-density curve.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::prune::{apply_mask, magnitude_prune_scoped, PruneMask, PruneScope};
use crate::train::{evaluate, resume, train, StepLog, TrainConfig};

/// Inputs of one IMP run besides the initial weights.
#[derive(Clone, Debug)]
pub struct ImpPlan<'a> {
    pub pretrain: &'a Dataset,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub t_r: u64,
    pub rounds: u32,
    pub fraction: f64,
    pub scope: PruneScope,
    pub cfg_pre: TrainConfig,
    pub cfg_main: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    /// Measured fraction of prunable weights kept.
    pub density: f64,
    pub test_acc: f64,
    pub train_acc: f64,
    pub mask_checksum: String,
    /// Checksum of `m ⊙ w_{t_r}` as training of this round began.
    pub start_checksum: String,
    pub final_checksum: String,
}

#[derive(Clone, Debug)]
pub struct ImpResult {
    pub records: Vec<RoundRecord>,
    /// `w_{t_r}` together with its momentum buffer.
    pub rewind_point: Checkpoint,
    pub masks: Vec<PruneMask>,
    pub finals: Vec<ParamVector>,
    pub pretrain_log: StepLog,
}

impl ImpResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("round,density,test_acc,train_acc\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{},{}\n", r.round, r.density, r.test_acc, r.train_acc));
        }
        s
    }
}

/// `w_{t_r}`: `t_r` steps of pre-training from `init`.
pub fn pretrain(init: &ParamVector, plan: &ImpPlan) -> Result<(Checkpoint, StepLog)> {
    if plan.t_r > plan.cfg_pre.total_steps {
        return Err(Error::Invalid(format!("t_r {} beyond the pre-training schedule {}", plan.t_r, plan.cfg_pre.total_steps)));
    }
    let out = train(init, plan.pretrain, &plan.cfg_pre, plan.t_r, None, &[])?;
    Ok((out.state, out.log))
}

pub fn imp_run(init: &ParamVector, plan: &ImpPlan) -> Result<ImpResult> {
    if plan.rounds == 0 {
        return Err(Error::Invalid("IMP needs at least one round".into()));
    }
    if plan.t_r >= plan.cfg_main.total_steps {
        return Err(Error::Invalid(format!("t_r {} leaves no main training before step {}", plan.t_r, plan.cfg_main.total_steps)));
    }
    let (rewind_point, pretrain_log) = pretrain(init, plan)?;
    let spec = init.spec();
    let mut mask = PruneMask::full(spec).with_parent(rewind_point.hash());
    let mut records = Vec::with_capacity(plan.rounds as usize + 1);
    let mut masks = Vec::with_capacity(plan.rounds as usize + 1);
    let mut finals = Vec::with_capacity(plan.rounds as usize + 1);
    for round in 0..=plan.rounds {
        let start = rewound(&rewind_point, &mask, &plan.cfg_main);
        let start_checksum = hex::encode(start.params.checksum());
        let steps = plan.cfg_main.total_steps - plan.t_r;
        let out = resume(&start, plan.train, &plan.cfg_main, steps, Some(&mask), &[])?;
        let trained = out.state.params;
        records.push(RoundRecord {
            round,
            density: mask.density(),
            test_acc: evaluate(&trained, plan.test)?.accuracy,
            train_acc: evaluate(&trained, plan.train)?.accuracy,
            mask_checksum: hex::encode(mask.checksum()),
            start_checksum,
            final_checksum: hex::encode(trained.checksum()),
        });
        log::info!("imp round {round}: density {:.4} test {:.4}", mask.density(), records.last().unwrap().test_acc);
        let next = if round < plan.rounds { Some(magnitude_prune_scoped(&trained, &mask, plan.fraction, plan.scope)?) } else { None };
        masks.push(mask);
        finals.push(trained);
        match next {
            Some(m) => mask = m,
            None => break,
        }
    }
    Ok(ImpResult { records, rewind_point, masks, finals, pretrain_log })
}

/// The rewound starting state for a round: `m ⊙ w_{t_r}` with the momentum
/// buffer restored (or zeroed when the config asks for it).
fn rewound(point: &Checkpoint, mask: &PruneMask, cfg: &TrainConfig) -> Checkpoint {
    let mut start = point.clone();
    start.params = apply_mask(&point.params, mask);
    if cfg.reset_momentum_on_rewind {
        start.momentum = None;
    }
    start
}
