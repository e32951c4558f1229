//! Datasets with stable example IDs and the transformations applied to them.

mod augment;
mod formats;
mod synthetic;

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::scores::ScoreTable;
use crate::tensor::Tensor;

pub use augment::{augment, augment_image, PAD};
pub use formats::{read_cifar_binary, read_idx_images, read_idx_labels};
pub use synthetic::{generate, SyntheticKind, SyntheticSpec};

/// Per-channel statistics used for normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Images `[N, C, H, W]`, integer labels and IDs that survive every derived view.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    ids: Vec<u64>,
    classes: usize,
    stats: Option<NormStats>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Idx,
    CifarBinary,
    SyntheticSpec,
}

/// Standard deviation floor applied during normalization.
pub const STD_FLOOR: f32 = 1e-8;

impl Dataset {
    /// Assembles a dataset, assigning IDs `0..N` in order.
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let ids = (0..labels.len() as u64).collect();
        Self::with_ids(images, labels, ids, classes)
    }

    pub fn with_ids(images: Tensor, labels: Vec<usize>, ids: Vec<u64>, classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!("images must be [N, C, H, W], got {:?}", images.shape())));
        }
        let n = images.shape()[0];
        if labels.len() != n || ids.len() != n {
            return Err(Error::Shape(format!("{n} images, {} labels, {} ids", labels.len(), ids.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Index(format!("label {bad} with {classes} classes")));
        }
        let mut seen = std::collections::HashSet::with_capacity(n);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Invalid(format!("duplicate example id {dup}")));
        }
        Ok(Dataset { images, labels, ids, classes, stats: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `(C, H, W)` of every image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn example_len(&self) -> usize {
        let (c, h, w) = self.image_shape();
        c * h * w
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn image(&self, pos: usize) -> &[f32] {
        let n = self.example_len();
        &self.images.data()[pos * n..(pos + 1) * n]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn stats(&self) -> Option<&NormStats> {
        self.stats.as_ref()
    }

    pub fn positions_by_id(&self) -> HashMap<u64, usize> {
        self.ids.iter().enumerate().map(|(p, &id)| (id, p)).collect()
    }

    /// A new dataset made of the examples at `positions`, in that order.
    pub fn gather(&self, positions: &[usize]) -> Dataset {
        let n = self.example_len();
        let (c, h, w) = self.image_shape();
        let mut data = Vec::with_capacity(positions.len() * n);
        for &p in positions {
            data.extend_from_slice(self.image(p));
        }
        let images = if positions.is_empty() {
            Tensor::zeros(vec![0, c, h, w])
        } else {
            Tensor::new(vec![positions.len(), c, h, w], data).expect("gathered shape")
        };
        Dataset {
            images,
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            ids: positions.iter().map(|&p| self.ids[p]).collect(),
            classes: self.classes,
            stats: self.stats.clone(),
        }
    }

    /// Examples with the given IDs, kept in dataset order.
    pub fn select_ids(&self, ids: &[u64]) -> Result<Dataset> {
        let wanted: std::collections::HashSet<u64> = ids.iter().copied().collect();
        let index = self.positions_by_id();
        if let Some(missing) = ids.iter().find(|id| !index.contains_key(id)) {
            return Err(Error::Invalid(format!("id {missing} is not in the dataset")));
        }
        let positions: Vec<usize> = (0..self.len()).filter(|&p| wanted.contains(&self.ids[p])).collect();
        Ok(self.gather(&positions))
    }

    /// A flat input batch and its labels.
    pub fn batch(&self, positions: &[usize]) -> (Vec<f32>, Vec<usize>) {
        let n = self.example_len();
        let mut data = Vec::with_capacity(positions.len() * n);
        for &p in positions {
            data.extend_from_slice(self.image(p));
        }
        (data, positions.iter().map(|&p| self.labels[p]).collect())
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        if labels.len() != self.len() {
            return Err(Error::Shape("label count".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::Index(format!("label {bad} with {} classes", self.classes)));
        }
        Ok(Dataset { labels, ..self.clone() })
    }

    /// Per-class counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// SHA-256 over pixels, labels and IDs.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        for (&y, &id) in self.labels.iter().zip(&self.ids) {
            h.update((y as u64).to_le_bytes());
            h.update(id.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Reads a dataset from disk.
///
/// * `Idx`: `path` is the image file; the label file sits next to it with
///   `images`→`labels` and `idx3`→`idx1` in its name.
/// * `CifarBinary`: `path` is one batch file or a directory of `*.bin` batches.
/// * `SyntheticSpec`: `path` is a JSON [`SyntheticSpec`].
pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    match format {
        DataFormat::Idx => {
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::Invalid(format!("bad IDX path {}", path.display())))?;
            let label_name = name.replace("images", "labels").replace("idx3", "idx1");
            if label_name == name {
                return Err(Error::Invalid(format!("cannot derive label file from {name}")));
            }
            let label_path = path.with_file_name(label_name);
            let images = read_idx_images(&read(path)?)?;
            let labels = read_idx_labels(&read(&label_path)?, 10)?;
            if labels.len() != images.shape()[0] {
                return Err(Error::format("idx", format!("{} images but {} labels", images.shape()[0], labels.len())));
            }
            Dataset::new(images, labels, 10)
        }
        DataFormat::CifarBinary => {
            let mut files = Vec::new();
            if path.is_dir() {
                let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
                for entry in entries {
                    let p = entry.map_err(|e| Error::io(path, e))?.path();
                    if p.extension().is_some_and(|e| e == "bin") {
                        files.push(p);
                    }
                }
                files.sort();
            } else {
                files.push(path.to_path_buf());
            }
            let mut bytes = Vec::new();
            for f in &files {
                bytes.extend(read(f)?);
            }
            let (images, labels) = read_cifar_binary(&bytes, 10)?;
            Dataset::new(images, labels, 10)
        }
        DataFormat::SyntheticSpec => {
            let spec: SyntheticSpec = serde_json::from_slice(&read(path)?)?;
            generate(&spec)
        }
    }
}

/// Computes per-channel mean/std over `ds` (the training split) and applies
/// them. A dataset that already carries statistics is returned unchanged.
pub fn normalize(ds: &Dataset) -> Dataset {
    if ds.stats.is_some() {
        return ds.clone();
    }
    let stats = channel_stats(ds);
    normalize_with(ds, &stats).expect("stats computed from this dataset")
}

pub fn channel_stats(ds: &Dataset) -> NormStats {
    let (c, h, w) = ds.image_shape();
    let plane = h * w;
    let mut sum = vec![0f64; c];
    let mut sq = vec![0f64; c];
    for pos in 0..ds.len() {
        for (ch, px) in ds.image(pos).chunks(plane).enumerate() {
            for &v in px {
                sum[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
    }
    let count = (ds.len() * plane).max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| ((s / count - m * m).max(0.0)).sqrt() as f32)
        .collect();
    NormStats { mean: mean.iter().map(|&m| m as f32).collect(), std }
}

/// Applies stored statistics (e.g. training-split stats to a test split).
pub fn normalize_with(ds: &Dataset, stats: &NormStats) -> Result<Dataset> {
    if ds.stats.is_some() {
        return Ok(ds.clone());
    }
    let (c, h, w) = ds.image_shape();
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::Shape(format!("stats for {} channels, images have {c}", stats.mean.len())));
    }
    let plane = h * w;
    let mut out = ds.clone();
    for (i, px) in out.images.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        let (m, s) = (stats.mean[ch], stats.std[ch].max(STD_FLOOR));
        px.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    out.stats = Some(stats.clone());
    Ok(out)
}

/// Reassigns labels for exactly `round(fraction · N)` uniformly chosen
/// examples, each to a label drawn uniformly from all `K` classes (the true
/// label may be redrawn).
pub fn corrupt_labels(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Invalid(format!("corruption fraction {fraction} outside [0, 1]")));
    }
    let count = (fraction * ds.len() as f64).round() as usize;
    if count == 0 {
        return Ok(ds.clone());
    }
    let mut rng = rng::stream(seed, Domain::Corrupt, 0);
    let chosen = rand::seq::index::sample(&mut rng, ds.len(), count);
    let mut labels = ds.labels.clone();
    for pos in chosen.iter() {
        labels[pos] = rng.random_range(0..ds.classes);
    }
    ds.with_labels(labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Strategy {
    RandomBalanced,
    LowestScore,
    HighestScore,
    ExplicitIds { ids: Vec<u64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetSelector {
    #[serde(flatten)]
    pub strategy: Strategy,
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Carves a subset of exactly `size` examples (all of them, with a warning,
/// if `size` exceeds the dataset). Score strategies break ties by ascending ID.
pub fn select_subset(ds: &Dataset, sel: &SubsetSelector, scores: Option<&ScoreTable>) -> Result<Dataset> {
    let mut m = sel.size;
    if m > ds.len() {
        log::warn!("subset of {m} requested from {} examples; using all", ds.len());
        m = ds.len();
    }
    let positions: Vec<usize> = match &sel.strategy {
        Strategy::RandomBalanced => balanced_positions(ds, m, sel.seed),
        Strategy::LowestScore | Strategy::HighestScore => {
            let table = scores.ok_or_else(|| Error::Invalid("score strategy without a score table".into()))?;
            let mut scored = Vec::with_capacity(ds.len());
            for (pos, &id) in ds.ids.iter().enumerate() {
                let s = table.get(id).ok_or(Error::MissingScore(id))?;
                scored.push((s, id, pos));
            }
            let highest = matches!(sel.strategy, Strategy::HighestScore);
            scored.sort_by(|a, b| {
                let by_score = if highest { b.0.total_cmp(&a.0) } else { a.0.total_cmp(&b.0) };
                by_score.then(a.1.cmp(&b.1))
            });
            let mut chosen: Vec<usize> = scored[..m].iter().map(|t| t.2).collect();
            chosen.sort_unstable();
            chosen
        }
        Strategy::ExplicitIds { ids } => {
            return ds.select_ids(ids);
        }
    };
    Ok(ds.gather(&positions))
}

fn balanced_positions(ds: &Dataset, m: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::stream(seed, Domain::Subset, 0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (pos, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(pos);
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }
    // quota per class: ⌊m/K⌋ plus one for a random set of m mod K classes,
    // shifting quota away from classes that run out
    let mut quota = vec![0usize; ds.classes];
    let mut remaining = m;
    loop {
        let open: Vec<usize> = (0..ds.classes).filter(|&c| quota[c] < by_class[c].len()).collect();
        if remaining == 0 || open.is_empty() {
            break;
        }
        let share = remaining / open.len();
        if share == 0 {
            let mut order = open.clone();
            order.shuffle(&mut rng);
            for &c in order.iter().take(remaining) {
                quota[c] += 1;
            }
            break;
        }
        for &c in &open {
            let take = share.min(by_class[c].len() - quota[c]);
            quota[c] += take;
            remaining -= take;
        }
    }
    let mut chosen: Vec<usize> = by_class
        .iter()
        .zip(&quota)
        .flat_map(|(members, &q)| members[..q].iter().copied())
        .collect();
    chosen.sort_unstable();
    chosen
}

/// Shuffled example order for one pass, keyed by `(order_seed, epoch)`.
pub fn epoch_order(n: usize, order_seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(order_seed, Domain::Order, epoch);
    order.shuffle(&mut rng);
    order
}

/// Minibatches (as dataset positions) for one epoch. The final short batch is kept.
pub fn batch_iterator(ds: &Dataset, batch_size: usize, order_seed: u64, epoch: u64) -> impl Iterator<Item = Vec<usize>> {
    let order = epoch_order(ds.len(), order_seed, epoch);
    let size = batch_size.max(1);
    (0..order.len().div_ceil(size)).map(move |b| order[b * size..((b + 1) * size).min(order.len())].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::{ScoreKind, ScoreTable};

    pub(crate) fn toy(n_per_class: usize, classes: usize) -> Dataset {
        let n = n_per_class * classes;
        let images = Tensor::new(vec![n, 1, 2, 2], (0..n * 4).map(|i| (i % 17) as f32 / 17.0).collect()).unwrap();
        let labels = (0..n).map(|i| i % classes).collect();
        Dataset::new(images, labels, classes).unwrap()
    }

    #[test]
    fn ids_are_assigned_in_order_and_validated() {
        let ds = toy(3, 2);
        assert_eq!(ds.ids(), &[0, 1, 2, 3, 4, 5]);
        let bad = Dataset::new(Tensor::zeros(vec![2, 1, 1, 1]), vec![0, 5], 2);
        assert!(matches!(bad, Err(Error::Index(_))));
        let dup = Dataset::with_ids(Tensor::zeros(vec![2, 1, 1, 1]), vec![0, 1], vec![7, 7], 2);
        assert!(dup.is_err());
    }

    #[test]
    fn normalization_statistics() {
        // 10 single-channel 1×2 images with hand-computable stats
        let vals: Vec<f32> = (0..20).map(|i| i as f32).collect();
        let ds = Dataset::new(Tensor::new(vec![10, 1, 1, 2], vals).unwrap(), vec![0; 10], 1).unwrap();
        let stats = channel_stats(&ds);
        assert!((stats.mean[0] - 9.5).abs() < 1e-6);
        // population std of 0..19 = sqrt((20²-1)/12)
        assert!((stats.std[0] - (399.0f32 / 12.0).sqrt()).abs() < 1e-5);
        let normed = normalize(&ds);
        let after = channel_stats(&Dataset { stats: None, ..normed.clone() });
        assert!(after.mean[0].abs() < 1e-3 && (after.std[0] - 1.0).abs() < 1e-3);
        assert_eq!(normalize(&normed), normed);
    }

    #[test]
    fn constant_channel_is_centered_without_nan() {
        let ds = Dataset::new(Tensor::new(vec![3, 1, 1, 2], vec![0.7; 6]).unwrap(), vec![0; 3], 1).unwrap();
        let n = normalize(&ds);
        assert!(n.images().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corruption_extremes() {
        let ds = toy(50, 10);
        assert_eq!(corrupt_labels(&ds, 0.0, 3).unwrap(), ds);
        assert!(corrupt_labels(&ds, 1.5, 3).is_err());
        let c = corrupt_labels(&ds, 1.0, 3).unwrap();
        assert_eq!(c.ids(), ds.ids());
        assert_eq!(c.images(), ds.images());
    }

    #[test]
    fn balanced_subset_counts() {
        let ds = toy(30, 10);
        let sel = SubsetSelector { strategy: Strategy::RandomBalanced, size: 100, seed: 4 };
        let sub = select_subset(&ds, &sel, None).unwrap();
        assert_eq!(sub.class_counts(), vec![10; 10]);
        let sel = SubsetSelector { size: 37, ..sel };
        let counts = select_subset(&ds, &sel, None).unwrap().class_counts();
        assert_eq!(counts.iter().sum::<usize>(), 37);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn balanced_subset_with_short_class() {
        let images = Tensor::zeros(vec![12, 1, 1, 1]);
        let labels = vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1];
        let ds = Dataset::new(images, labels, 2).unwrap();
        let sel = SubsetSelector { strategy: Strategy::RandomBalanced, size: 8, seed: 0 };
        let sub = select_subset(&ds, &sel, None).unwrap();
        assert_eq!(sub.class_counts(), vec![6, 2]);
    }

    #[test]
    fn score_subsets_and_tie_break() {
        let ds = toy(1, 3);
        let table = ScoreTable::new(ScoreKind::El2n, vec![(0, 0.1), (1, 0.9), (2, 0.5)]);
        let sel = SubsetSelector { strategy: Strategy::LowestScore, size: 2, seed: 0 };
        assert_eq!(select_subset(&ds, &sel, Some(&table)).unwrap().ids(), &[0, 2]);
        let sel = SubsetSelector { strategy: Strategy::HighestScore, size: 1, seed: 0 };
        assert_eq!(select_subset(&ds, &sel, Some(&table)).unwrap().ids(), &[1]);

        let ds = toy(2, 3);
        let flat = ScoreTable::new(ScoreKind::El2n, (0..6).map(|i| (i, 0.3)).collect());
        for strategy in [Strategy::LowestScore, Strategy::HighestScore] {
            let sel = SubsetSelector { strategy, size: 3, seed: 0 };
            assert_eq!(select_subset(&ds, &sel, Some(&flat)).unwrap().ids(), &[0, 1, 2]);
        }
    }

    #[test]
    fn score_subset_requires_every_score() {
        let ds = toy(2, 2);
        let partial = ScoreTable::new(ScoreKind::El2n, vec![(0, 0.1), (1, 0.2)]);
        let sel = SubsetSelector { strategy: Strategy::LowestScore, size: 1, seed: 0 };
        assert!(matches!(select_subset(&ds, &sel, Some(&partial)), Err(Error::MissingScore(_))));
        assert!(select_subset(&ds, &sel, None).is_err());
    }

    #[test]
    fn oversized_subset_is_clamped() {
        let ds = toy(2, 2);
        let sel = SubsetSelector { strategy: Strategy::RandomBalanced, size: 100, seed: 0 };
        assert_eq!(select_subset(&ds, &sel, None).unwrap().len(), 4);
    }

    #[test]
    fn ids_follow_their_images_through_views() {
        let ds = toy(10, 3);
        let corrupted = corrupt_labels(&ds, 0.5, 1).unwrap();
        let sel = SubsetSelector { strategy: Strategy::RandomBalanced, size: 9, seed: 2 };
        let sub = select_subset(&corrupted, &sel, None).unwrap();
        let explicit = SubsetSelector { strategy: Strategy::ExplicitIds { ids: vec![sub.ids()[3], sub.ids()[0]] }, size: 2, seed: 0 };
        let again = select_subset(&sub, &explicit, None).unwrap();
        let index = ds.positions_by_id();
        for view in [&sub, &again] {
            for (p, id) in view.ids().iter().enumerate() {
                assert_eq!(view.image(p), ds.image(index[id]));
            }
        }
    }

    #[test]
    fn batches_cover_epoch_and_keep_last_partial() {
        let ds = toy(50, 2);
        let sizes: Vec<usize> = batch_iterator(&ds, 32, 1, 0).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);
        let mut all: Vec<usize> = batch_iterator(&ds, 32, 1, 0).flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn order_is_keyed_by_seed_and_epoch() {
        assert_eq!(epoch_order(100, 5, 2), epoch_order(100, 5, 2));
        assert_ne!(epoch_order(100, 5, 2), epoch_order(100, 6, 2));
        assert_ne!(epoch_order(100, 5, 2), epoch_order(100, 5, 3));
    }
}
