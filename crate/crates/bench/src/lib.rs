//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use rewind_core::data::{generate, Dataset, SyntheticSpec};
use rewind_core::model::{build_mlp, ModelSpec, ParamVector};
use rewind_core::train::TrainConfig;

/// The 784-100-10 MLP used throughout the desk-scale experiments.
pub fn mlp() -> (Arc<ModelSpec>, ParamVector) {
    build_mlp(&[784, 100, 10], 0).expect("valid widths")
}

/// `per_class` examples of each of ten 28×28 classes.
pub fn digits(per_class: usize) -> Dataset {
    generate(&SyntheticSpec::mnist_like(per_class, 0)).expect("valid spec")
}

pub fn schedule(total: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 128,
        peak_lr: 0.1,
        momentum: 0.9,
        weight_decay: 1e-4,
        lr_decay_factor: 0.1,
        lr_milestones: vec![],
        warmup_steps: 0,
        total_steps: total,
        order_seed: 1,
        augment_seed: 2,
        init_seed: 0,
        augment: false,
        reset_momentum_on_rewind: false,
    }
}
