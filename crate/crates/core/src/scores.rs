//! Example-difficulty scores keyed by example ID.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::landscape::{loss_barrier, spawn_children, BarrierMode, Metric};
use crate::model::ModelSpec;
use crate::rng::derive_seed;
use crate::train::{probabilities, train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    El2n,
    Lmc,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreMeta {
    /// Training step at which the scores were taken.
    pub iteration: u64,
    /// Networks (EL2N) or child pairs (LMC) averaged over.
    pub replicates: usize,
    pub seeds: Vec<u64>,
    pub dataset_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub kind: ScoreKind,
    pub meta: ScoreMeta,
    scores: BTreeMap<u64, f64>,
}

impl ScoreTable {
    pub fn new(kind: ScoreKind, entries: Vec<(u64, f64)>) -> Self {
        ScoreTable { kind, meta: ScoreMeta::default(), scores: entries.into_iter().collect() }
    }

    pub fn with_meta(mut self, meta: ScoreMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn get(&self, id: u64) -> Option<f64> {
        self.scores.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `(id, score)` in ascending ID order.
    pub fn iter(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.scores.iter().map(|(&id, &s)| (id, s))
    }

    pub fn mean(&self) -> f64 {
        let mut v: Vec<f64> = self.scores.values().copied().collect();
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Writes `id,score` CSV at `path` and the metadata to `path` with a `.json` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut csv = String::from("id,score\n");
        for (id, s) in self.iter() {
            csv.push_str(&format!("{id},{s}\n"));
        }
        std::fs::write(path, csv).map_err(|e| Error::io(path, e))?;
        let sidecar = path.with_extension("json");
        let json = serde_json::json!({ "kind": self.kind, "meta": self.meta, "count": self.len() });
        std::fs::write(&sidecar, serde_json::to_vec_pretty(&json)?).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some("id,score") {
            return Err(Error::format("score csv", "missing `id,score` header"));
        }
        let mut scores = BTreeMap::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let (id, s) = line
                .split_once(',')
                .ok_or_else(|| Error::format("score csv", format!("bad row `{line}`")))?;
            let id: u64 = id.parse().map_err(|_| Error::format("score csv", format!("bad id `{id}`")))?;
            let s: f64 = s.parse().map_err(|_| Error::format("score csv", format!("bad score `{s}`")))?;
            scores.insert(id, s);
        }
        let sidecar = path.with_extension("json");
        #[derive(Deserialize)]
        struct Sidecar {
            kind: ScoreKind,
            meta: ScoreMeta,
        }
        let side: Sidecar = match std::fs::read(&sidecar) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(e) => return Err(Error::io(&sidecar, e)),
        };
        Ok(ScoreTable { kind: side.kind, meta: side.meta, scores })
    }
}

/// `‖p − onehot(label)‖₂` for one probability row.
pub fn el2n_of(probs: &[f32], label: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let d = p as f64 - if k == label { 1.0 } else { 0.0 };
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Example-wise mean of several score vectors aligned with `ids`. Values are
/// summed in sorted order, so the result does not depend on the order of
/// `runs`.
pub fn average_runs(kind: ScoreKind, ids: &[u64], runs: &[Vec<f64>]) -> Result<ScoreTable> {
    if runs.is_empty() {
        return Err(Error::Invalid("no runs to average".into()));
    }
    if runs.iter().any(|r| r.len() != ids.len()) {
        return Err(Error::Shape("score runs do not cover the same examples".into()));
    }
    let entries = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let mut v: Vec<f64> = runs.iter().map(|r| r[i]).collect();
            v.sort_by(f64::total_cmp);
            (id, v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    Ok(ScoreTable::new(kind, entries))
}

/// EL2N: train one network per seed for `t` steps from its own
/// initialization, then average `‖p(w_t, x) − y‖₂` over the networks.
pub fn el2n_scores(spec: &Arc<ModelSpec>, ds: &Dataset, t: u64, cfg: &TrainConfig, seeds: &[u64]) -> Result<ScoreTable> {
    if seeds.is_empty() {
        return Err(Error::Invalid("EL2N needs at least one network".into()));
    }
    let k = spec.classes;
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let run_cfg = TrainConfig { init_seed: seed, order_seed: derive_seed(seed, 1), augment_seed: derive_seed(seed, 2), ..cfg.clone() };
            let out = train(&spec.initialize(seed), ds, &run_cfg, t, None, &[])?;
            let probs = probabilities(out.params(), ds)?;
            Ok(probs.chunks(k).zip(ds.labels()).map(|(row, &y)| el2n_of(row, y)).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let meta = ScoreMeta { iteration: t, replicates: seeds.len(), seeds: seeds.to_vec(), dataset_hash: ds.content_hash() };
    Ok(average_runs(ScoreKind::El2n, ds.ids(), &runs)?.with_meta(meta))
}

/// LMC scores: for each parent, train `children` copies to completion and
/// take the per-example midpoint cross-entropy barrier of every child pair;
/// the score is the mean over all pairs of all parents.
pub fn lmc_scores(parents: &[Checkpoint], ds: &Dataset, children: usize, cfg: &TrainConfig, seed_base: u64) -> Result<ScoreTable> {
    if parents.is_empty() || children < 2 {
        return Err(Error::Invalid("LMC scores need a parent and at least two children".into()));
    }
    let mut runs = Vec::new();
    let mut seeds = Vec::new();
    for (r, parent) in parents.iter().enumerate() {
        let base = derive_seed(seed_base, r as u64);
        seeds.push(base);
        for pair in spawn_children(parent, children, ds, cfg, base)? {
            runs.push(loss_barrier(&pair, ds, Metric::CrossEntropy, &BarrierMode::Midpoint)?.values());
        }
    }
    let meta = ScoreMeta { iteration: parents[0].step, replicates: runs.len(), seeds, dataset_hash: ds.content_hash() };
    Ok(average_runs(ScoreKind::Lmc, ds.ids(), &runs)?.with_meta(meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};
    use crate::model::build_mlp;

    fn cfg(total: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            peak_lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_decay_factor: 0.1,
            lr_milestones: vec![],
            warmup_steps: 0,
            total_steps: total,
            order_seed: 0,
            augment_seed: 0,
            init_seed: 0,
            augment: false,
            reset_momentum_on_rewind: false,
        }
    }

    #[test]
    fn el2n_is_bounded_and_seed_order_free() {
        let ds = generate(&SyntheticSpec::blobs(3, 20, 4, 2.0, 1)).unwrap();
        let (spec, _) = build_mlp(&[4, 8, 3], 0).unwrap();
        let a = el2n_scores(&spec, &ds, 10, &cfg(20), &[1, 2, 3]).unwrap();
        let b = el2n_scores(&spec, &ds, 10, &cfg(20), &[3, 1, 2]).unwrap();
        assert_eq!(a.iter().collect::<Vec<_>>(), b.iter().collect::<Vec<_>>());
        assert_eq!(a.len(), ds.len());
        assert!(a.iter().all(|(_, s)| (0.0..=2f64.sqrt()).contains(&s)));
        assert_eq!(a.meta.replicates, 3);
        assert!(el2n_scores(&spec, &ds, 10, &cfg(20), &[]).is_err());
    }

    #[test]
    fn pair_average_is_mean_of_tables() {
        let runs = vec![vec![0.1, 0.4], vec![0.3, 0.0], vec![0.2, 0.2]];
        let t = average_runs(ScoreKind::Lmc, &[5, 9], &runs).unwrap();
        assert!((t.get(5).unwrap() - 0.2).abs() < 1e-15);
        assert!((t.get(9).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn lmc_scores_cover_dataset() {
        let ds = generate(&SyntheticSpec::blobs(2, 15, 3, 3.0, 4)).unwrap();
        let (_, init) = build_mlp(&[3, 6, 2], 2).unwrap();
        let c = cfg(12);
        let parent = Checkpoint { params: init, momentum: None, step: 4, seeds: c.seeds(), mask: None };
        let t = lmc_scores(&[parent.clone(), parent], &ds, 3, &c, 7).unwrap();
        assert_eq!(t.len(), ds.len());
        assert_eq!(t.meta.replicates, 6);
        assert!(t.iter().all(|(_, s)| s.is_finite()));
    }

    #[test]
    fn el2n_closed_forms() {
        assert_eq!(el2n_of(&[0.0, 1.0, 0.0], 1), 0.0);
        assert!((el2n_of(&[0.1; 10], 3) - 0.9f64.sqrt()).abs() < 1e-7);
        assert!((el2n_of(&[1.0, 0.0], 1) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn csv_and_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let meta = ScoreMeta { iteration: 40, replicates: 4, seeds: vec![1, 2, 3, 4], dataset_hash: "ab".into() };
        let t = ScoreTable::new(ScoreKind::El2n, vec![(3, 0.25), (1, 1.0 / 3.0)]).with_meta(meta);
        t.save(&path).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("id,score\n1,"));
        assert_eq!(ScoreTable::load(&path).unwrap(), t);
    }
}
