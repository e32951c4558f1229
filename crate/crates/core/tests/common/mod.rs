//! Fixtures shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::ops::Range;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rewind_core::model::{gradient_check, GradCheck, Layer, ModelSpec};

/// A small model exercising one layer type, and the parameter range whose
/// gradient flows through that layer.
pub struct GradCase {
    pub name: &'static str,
    pub spec: Arc<ModelSpec>,
    pub coords: Range<usize>,
}

fn dense(inputs: usize, outputs: usize) -> Layer {
    Layer::Dense { inputs, outputs, bias: true }
}

fn conv(c: usize, o: usize, hw: usize) -> Layer {
    Layer::Conv3x3 { in_channels: c, out_channels: o, height: hw, width: hw }
}

pub fn grad_cases() -> Vec<GradCase> {
    let case = |name, input: Vec<usize>, layers: Vec<Layer>, first_layer_params: bool| {
        let spec = Arc::new(ModelSpec::from_layers(input, layers).unwrap());
        let coords = if first_layer_params {
            let end = spec.segments.iter().filter(|s| s.layer == 0).map(|s| s.offset + s.len()).max().unwrap();
            0..end
        } else {
            0..spec.total
        };
        GradCase { name, spec, coords }
    };
    vec![
        case("dense", vec![20], vec![dense(20, 8)], false),
        case("relu", vec![8], vec![dense(8, 16), Layer::Relu, dense(16, 5)], true),
        case("conv3x3", vec![2, 6, 6], vec![conv(2, 6, 6), Layer::Flatten, dense(216, 4)], true),
        case("max_pool2", vec![2, 6, 6], vec![conv(2, 6, 6), Layer::MaxPool2, Layer::Flatten, dense(54, 4)], true),
        case("avg_pool2", vec![2, 6, 6], vec![conv(2, 6, 6), Layer::AvgPool2, Layer::Flatten, dense(54, 4)], true),
        case("flatten", vec![3, 4, 4], vec![Layer::Flatten, dense(48, 6)], false),
    ]
}

/// Runs the finite-difference check for one case on `count` random
/// coordinates, with random weights and a random batch of 4.
pub fn run_grad_case(case: &GradCase, count: usize, seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize, scale: f64| -> Vec<f64> {
        (0..n).map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect()
    };
    let params = normal(case.spec.total, 0.5);
    let batch = 4;
    let inputs = normal(batch * case.spec.example_len(), 1.0);
    let labels: Vec<usize> = (0..batch).map(|i| i % case.spec.classes).collect();
    let span = case.coords.len();
    let coords: Vec<usize> = sample(&mut rng, span, count.min(span)).into_iter().map(|i| case.coords.start + i).collect();
    gradient_check(&case.spec, &params, &inputs, &labels, &coords, 1e-4).unwrap()
}
