use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Isotropic unit-variance Gaussian blobs, one per class.
    Blobs,
    /// Image-like data: each class is a few smooth prototypes; examples are
    /// noisy copies, a tail of which is blended toward another class.
    Prototypes,
}

/// Image extents: a flat length or `[C, H, W]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Dims {
    Flat(usize),
    Image([usize; 3]),
}

impl Dims {
    fn chw(&self) -> (usize, usize, usize) {
        match *self {
            Dims::Flat(d) => (1, 1, d),
            Dims::Image([c, h, w]) => (c, h, w),
        }
    }
}

fn default_classes() -> usize {
    2
}
fn default_modes() -> usize {
    3
}
fn default_noise() -> f64 {
    0.3
}
fn default_ambiguity() -> f64 {
    0.6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub per_class: usize,
    pub dims: Dims,
    /// Blobs: distance between class means in units of σ.
    /// Prototypes: contrast of the prototypes relative to the pixel noise.
    pub separation: f64,
    pub seed: u64,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Prototypes per class (prototypes kind only).
    #[serde(default = "default_modes")]
    pub modes: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Largest blend weight toward a foreign prototype (prototypes kind only).
    #[serde(default = "default_ambiguity")]
    pub ambiguity: f64,
}

impl SyntheticSpec {
    pub fn blobs(classes: usize, per_class: usize, dims: usize, separation: f64, seed: u64) -> Self {
        SyntheticSpec {
            kind: SyntheticKind::Blobs,
            per_class,
            dims: Dims::Flat(dims),
            separation,
            seed,
            classes,
            modes: default_modes(),
            noise: default_noise(),
            ambiguity: default_ambiguity(),
        }
    }

    /// Ten-class 28×28 single-channel data.
    pub fn mnist_like(per_class: usize, seed: u64) -> Self {
        SyntheticSpec {
            kind: SyntheticKind::Prototypes,
            per_class,
            dims: Dims::Image([1, 28, 28]),
            separation: 1.0,
            seed,
            classes: 10,
            modes: default_modes(),
            noise: default_noise(),
            ambiguity: default_ambiguity(),
        }
    }
}

/// Generates the dataset described by `spec`. Examples are laid out class by
/// class; the output is a pure function of the spec.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.per_class == 0 || spec.classes < 2 {
        return Err(Error::Invalid("synthetic data needs per_class ≥ 1 and classes ≥ 2".into()));
    }
    let (c, h, w) = spec.dims.chw();
    let d = c * h * w;
    if d == 0 {
        return Err(Error::Invalid("zero-sized synthetic examples".into()));
    }
    let n = spec.per_class * spec.classes;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    match spec.kind {
        SyntheticKind::Blobs => {
            let means = blob_means(spec.classes, d, spec.separation, spec.seed);
            for (k, mean) in means.iter().enumerate() {
                for i in 0..spec.per_class {
                    let mut rng = rng::stream(spec.seed, Domain::Synthetic, (k * spec.per_class + i) as u64 + 1);
                    data.extend(mean.iter().map(|&m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (m + z) as f32
                    }));
                    labels.push(k);
                }
            }
        }
        SyntheticKind::Prototypes => {
            if spec.modes == 0 {
                return Err(Error::Invalid("prototypes need at least one mode".into()));
            }
            let protos = prototypes(spec, c, h, w);
            // mode frequencies fall off geometrically so later modes are rare
            let weights: Vec<f64> = (0..spec.modes).map(|m| 0.5f64.powi(m as i32)).collect();
            let total: f64 = weights.iter().sum();
            for k in 0..spec.classes {
                for i in 0..spec.per_class {
                    let mut rng = rng::stream(spec.seed, Domain::Synthetic, (k * spec.per_class + i) as u64 + 1);
                    let mode = pick(&weights, total, rng.random::<f64>());
                    let difficulty: f64 = rng.random();
                    let other_class = (k + rng.random_range(1..spec.classes)) % spec.classes;
                    let other_mode = rng.random_range(0..spec.modes);
                    let blend = spec.ambiguity * difficulty.powi(3);
                    let sigma = spec.noise * (0.5 + difficulty);
                    let own = &protos[k * spec.modes + mode];
                    let foreign = &protos[other_class * spec.modes + other_mode];
                    for (&a, &b) in own.iter().zip(foreign) {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        let v = (1.0 - blend) * a + blend * b + sigma * z;
                        data.push(v.clamp(0.0, 1.0) as f32);
                    }
                    labels.push(k);
                }
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, spec.classes)
}

fn pick(weights: &[f64], total: f64, u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w / total;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Class means with pairwise distance `separation`: scaled basis vectors when
/// the dimension allows, otherwise random directions.
fn blob_means(classes: usize, d: usize, separation: f64, seed: u64) -> Vec<Vec<f64>> {
    if classes == 2 {
        let mut a = vec![0.0; d];
        a[0] = separation / 2.0;
        let b = a.iter().map(|v| -v).collect();
        return vec![a, b];
    }
    if d >= classes {
        let s = separation / std::f64::consts::SQRT_2;
        return (0..classes)
            .map(|k| (0..d).map(|j| if j == k { s } else { 0.0 }).collect())
            .collect();
    }
    let mut rng = rng::stream(seed, Domain::Synthetic, 0);
    (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x / norm * separation / std::f64::consts::SQRT_2).collect()
        })
        .collect()
}

/// Smooth stroke-like patterns: a handful of Gaussian bumps per channel,
/// scaled to `[0, separation]` before clamping.
fn prototypes(spec: &SyntheticSpec, c: usize, h: usize, w: usize) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(spec.seed, Domain::Synthetic, 0);
    (0..spec.classes * spec.modes)
        .map(|_| {
            let mut img = vec![0.0f64; c * h * w];
            for ch in 0..c {
                let bumps = rng.random_range(4..=7);
                for _ in 0..bumps {
                    let cy = rng.random_range(0.2..0.8) * h as f64;
                    let cx = rng.random_range(0.2..0.8) * w as f64;
                    let sy = rng.random_range(0.06..0.2) * h as f64;
                    let sx = rng.random_range(0.06..0.2) * w as f64;
                    for y in 0..h {
                        for x in 0..w {
                            let e = ((y as f64 - cy) / sy).powi(2) + ((x as f64 - cx) / sx).powi(2);
                            img[(ch * h + y) * w + x] += (-0.5 * e).exp();
                        }
                    }
                }
            }
            let max = img.iter().cloned().fold(0.0, f64::max).max(1e-12);
            img.iter().map(|v| (v / max * spec.separation).min(1.0)).collect()
        })
        .collect()
}
