//! Magnitude pruning masks.
//!
//! Prune counts are computed cumulatively: after `r` rounds at fraction `f`
//! exactly `⌊(1 − (1 − f)^r) · P⌋` of the `P` prunable coordinates are gone.
//! In the first round this is `⌊f · P⌋`; later rounds take whatever keeps the
//! cumulative count on that schedule, so the realized density never drifts
//! more than one coordinate from `(1 − f)^r`.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamVector};

const MAGIC: &[u8; 4] = b"LTHM";
const VERSION: u32 = 1;
// absorbs representation error in (1 − f)^r · P before flooring
const COUNT_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    /// One magnitude threshold across all weight tensors.
    #[default]
    Global,
    /// The same fraction removed from every weight tensor separately.
    PerLayer,
}

/// Binary keep-mask aligned with a [`ParamVector`]. Biases are always kept.
#[derive(Clone, Debug)]
pub struct PruneMask {
    keep: Vec<bool>,
    spec: Arc<ModelSpec>,
    /// Product of `(1 − f)` over every prune applied so far.
    nominal: f64,
    round: u32,
    parent: [u8; 32],
}

impl PartialEq for PruneMask {
    fn eq(&self, other: &Self) -> bool {
        self.keep == other.keep && self.round == other.round && self.parent == other.parent
    }
}

impl PruneMask {
    pub fn full(spec: &Arc<ModelSpec>) -> Self {
        PruneMask { keep: vec![true; spec.total], spec: Arc::clone(spec), nominal: 1.0, round: 0, parent: [0; 32] }
    }

    /// A mask from explicit keep bits; non-prunable coordinates are forced on.
    pub fn from_bits(spec: &Arc<ModelSpec>, mut keep: Vec<bool>) -> Result<Self> {
        if keep.len() != spec.total {
            return Err(Error::Shape(format!("{} mask bits for {} parameters", keep.len(), spec.total)));
        }
        for (k, p) in keep.iter_mut().zip(spec.prunable_flags()) {
            *k |= !p;
        }
        let mut mask = PruneMask { keep, spec: Arc::clone(spec), nominal: 1.0, round: 0, parent: [0; 32] };
        mask.nominal = mask.density();
        Ok(mask)
    }

    pub fn with_parent(mut self, parent: [u8; 32]) -> Self {
        self.parent = parent;
        self
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn parent(&self) -> [u8; 32] {
        self.parent
    }

    pub fn spec(&self) -> &Arc<ModelSpec> {
        &self.spec
    }

    pub fn surviving(&self) -> usize {
        self.spec
            .segments
            .iter()
            .filter(|s| s.prunable())
            .map(|s| self.keep[s.range()].iter().filter(|&&k| k).count())
            .sum()
    }

    /// Fraction of prunable coordinates still kept.
    pub fn density(&self) -> f64 {
        self.surviving() as f64 / self.spec.prunable_count().max(1) as f64
    }

    /// `(1 − f)^r` for the prunes applied so far.
    pub fn nominal_density(&self) -> f64 {
        self.nominal
    }

    /// True when every kept bit of `self` is also kept in `outer`.
    pub fn is_nested_in(&self, outer: &PruneMask) -> bool {
        self.keep.len() == outer.keep.len() && self.keep.iter().zip(&outer.keep).all(|(&a, &b)| !a || b)
    }

    /// SHA-256 of the packed bits.
    pub fn checksum(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        Sha256::digest(pack(&self.keep)).into()
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(64 + self.keep.len() / 8);
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((self.keep.len() as u64).to_le_bytes());
        out.extend(self.round.to_le_bytes());
        out.extend(self.nominal.to_le_bytes());
        out.extend_from_slice(&self.parent);
        out.extend(pack(&self.keep));
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: &Path, spec: &Arc<ModelSpec>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, spec)
    }

    fn decode(bytes: &[u8], spec: &Arc<ModelSpec>) -> Result<Self> {
        let bad = |why: &str| Error::format("LTHM", why.to_string());
        const HEADER: usize = 4 + 4 + 8 + 4 + 8 + 32;
        if bytes.len() < HEADER || &bytes[..4] != MAGIC {
            return Err(bad("missing LTHM header"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if len != spec.total {
            return Err(bad(&format!("mask of {len} bits for {} parameters", spec.total)));
        }
        let round = u32_at(16);
        let nominal = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
        let parent: [u8; 32] = bytes[28..60].try_into().unwrap();
        let body = &bytes[HEADER..];
        if body.len() != len.div_ceil(8) {
            return Err(bad("truncated bit payload"));
        }
        let keep = (0..len).map(|i| body[i / 8] >> (i % 8) & 1 == 1).collect();
        let mask = PruneMask { keep, spec: Arc::clone(spec), nominal, round, parent };
        if spec.prunable_flags().iter().zip(&mask.keep).any(|(&p, &k)| !p && !k) {
            return Err(bad("a non-prunable coordinate is masked"));
        }
        Ok(mask)
    }
}

/// LSB-first bit packing.
fn pack(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

/// `(1 − fraction)^rounds`.
pub fn sparsity_after_rounds(rounds: u32, fraction: f64) -> f64 {
    (1.0 - fraction).powi(rounds as i32)
}

/// Coordinates that must be gone once the nominal density reaches `nominal`.
fn pruned_target(nominal: f64, prunable: usize) -> usize {
    (((1.0 - nominal) * prunable as f64) + COUNT_EPS).floor() as usize
}

/// Removes the lowest-magnitude surviving weights globally (ties by ascending
/// coordinate index) and returns the next-round mask.
pub fn magnitude_prune(params: &ParamVector, mask: &PruneMask, fraction: f64) -> Result<PruneMask> {
    magnitude_prune_scoped(params, mask, fraction, PruneScope::Global)
}

pub fn magnitude_prune_scoped(params: &ParamVector, mask: &PruneMask, fraction: f64, scope: PruneScope) -> Result<PruneMask> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Invalid(format!("prune fraction {fraction} outside (0, 1)")));
    }
    if params.len() != mask.keep.len() {
        return Err(Error::Shape(format!("{} parameters for a mask of {}", params.len(), mask.keep.len())));
    }
    if mask.surviving() == 0 {
        return Err(Error::EmptyMask);
    }
    let nominal = mask.nominal * (1.0 - fraction);
    let spec = params.spec();
    let weights = || spec.segments.iter().filter(|s| s.prunable());
    let groups: Vec<Vec<usize>> = match scope {
        PruneScope::Global => vec![weights().flat_map(|s| s.range()).collect()],
        PruneScope::PerLayer => weights().map(|s| s.range().collect()).collect(),
    };
    let values = params.values();
    let mut keep = mask.keep.clone();
    for coords in groups {
        let already = coords.iter().filter(|&&i| !keep[i]).count();
        let mut alive: Vec<usize> = coords.into_iter().filter(|&i| keep[i]).collect();
        let take = pruned_target(nominal, already + alive.len()).saturating_sub(already).min(alive.len());
        alive.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
        for &i in &alive[..take] {
            keep[i] = false;
        }
    }
    Ok(PruneMask { keep, spec: Arc::clone(spec), nominal, round: mask.round + 1, parent: mask.parent })
}

/// `m ⊙ w`, with masked coordinates set to `+0.0`.
pub fn apply_mask(params: &ParamVector, mask: &PruneMask) -> ParamVector {
    let mut out = params.clone();
    apply_mask_in_place(out.values_mut(), mask);
    out
}

pub(crate) fn apply_mask_in_place(values: &mut [f32], mask: &PruneMask) {
    for (v, &k) in values.iter_mut().zip(&mask.keep) {
        if !k {
            *v = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_mlp, mlp_spec, Layer};
    use proptest::prelude::*;

    fn five_weights(values: Vec<f32>) -> ParamVector {
        let spec = Arc::new(ModelSpec::from_layers(vec![5], vec![Layer::Dense { inputs: 5, outputs: 1, bias: false }]).unwrap());
        ParamVector::from_values(&spec, values).unwrap()
    }

    #[test]
    fn prunes_smallest_magnitudes() {
        let p = five_weights(vec![0.5, -0.1, 0.3, 0.05, -0.9]);
        let m = magnitude_prune(&p, &PruneMask::full(p.spec()), 0.4).unwrap();
        assert_eq!(m.keep(), &[true, false, true, false, true]);
        assert_eq!(m.round(), 1);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let p = five_weights(vec![0.2; 5]);
        let spec = Arc::new(ModelSpec::from_layers(vec![4], vec![Layer::Dense { inputs: 4, outputs: 1, bias: false }]).unwrap());
        let p4 = ParamVector::from_values(&spec, vec![-0.2, 0.2, 0.2, -0.2]).unwrap();
        let m = magnitude_prune(&p4, &PruneMask::full(&spec), 0.5).unwrap();
        assert_eq!(m.keep(), &[false, false, true, true]);
        let m = magnitude_prune(&p, &PruneMask::full(p.spec()), 0.5).unwrap();
        assert_eq!(m.keep(), &[false, false, true, true, true]);
    }

    #[test]
    fn biases_survive_and_empty_mask_errors() {
        let (spec, params) = build_mlp(&[4, 3, 2], 0).unwrap();
        let zero = PruneMask::from_bits(&spec, vec![false; spec.total]).unwrap();
        assert_eq!(zero.surviving(), 0);
        let masked = apply_mask(&params, &zero);
        for (i, s) in spec.segments.iter().enumerate() {
            let kept = masked.segment(i) == params.segment(i);
            let zeroed = masked.segment(i).iter().all(|&v| v == 0.0);
            assert!(if s.prunable() { zeroed } else { kept });
        }
        assert!(matches!(magnitude_prune(&params, &zero, 0.2), Err(Error::EmptyMask)));
        assert!(magnitude_prune(&params, &PruneMask::full(&spec), 1.0).is_err());
    }

    #[test]
    fn apply_mask_is_idempotent_and_full_mask_is_identity() {
        let (spec, params) = build_mlp(&[6, 5, 3], 3).unwrap();
        assert_eq!(apply_mask(&params, &PruneMask::full(&spec)), params);
        let m = magnitude_prune(&params, &PruneMask::full(&spec), 0.3).unwrap();
        let once = apply_mask(&params, &m);
        assert_eq!(apply_mask(&once, &m), once);
    }

    #[test]
    fn two_rounds_reach_064() {
        let (spec, params) = build_mlp(&[10, 10, 5], 1).unwrap();
        let m1 = magnitude_prune(&params, &PruneMask::full(&spec), 0.2).unwrap();
        let m2 = magnitude_prune(&params, &m1, 0.2).unwrap();
        assert_eq!(m2.surviving(), 96);
        assert!(m2.is_nested_in(&m1));
    }

    #[test]
    fn caption_densities() {
        for (r, want) in [(8, 0.168), (10, 0.107), (12, 0.069)] {
            assert!((sparsity_after_rounds(r, 0.2) - want).abs() < 5e-4);
        }
        assert_eq!(sparsity_after_rounds(0, 0.2), 1.0);
    }

    #[test]
    fn realized_density_tracks_schedule_on_the_mlp() {
        let (spec, params) = build_mlp(&[784, 100, 10], 7).unwrap();
        let p = spec.prunable_count() as f64;
        let mut mask = PruneMask::full(&spec);
        for r in 1..=12 {
            mask = magnitude_prune(&params, &mask, 0.2).unwrap();
            let err = (mask.density() - 0.8f64.powi(r)).abs() * p;
            assert!(err <= 1.0, "round {r}: off by {err} coordinates");
        }
    }

    #[test]
    fn per_layer_scope_prunes_each_tensor() {
        let (spec, params) = build_mlp(&[20, 10, 5], 2).unwrap();
        let m = magnitude_prune_scoped(&params, &PruneMask::full(&spec), 0.2, PruneScope::PerLayer).unwrap();
        for s in spec.segments.iter().filter(|s| s.prunable()) {
            let kept = m.keep()[s.range()].iter().filter(|&&k| k).count();
            assert_eq!(kept, s.len() - s.len() / 5);
        }
    }

    #[test]
    fn lthm_round_trip_and_rejects_corruption() {
        let (spec, params) = build_mlp(&[9, 7, 3], 5).unwrap();
        let m = magnitude_prune(&params, &PruneMask::full(&spec), 0.2).unwrap().with_parent([7; 32]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round1.lthm");
        m.write_to(&path).unwrap();
        let back = PruneMask::read_from(&path, &spec).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.nominal_density(), m.nominal_density());
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        assert!(PruneMask::decode(&bytes, &spec).is_err());
        bytes[0] = b'X';
        assert!(PruneMask::decode(&bytes, &spec).is_err());
        let other = Arc::new(mlp_spec(&[9, 8, 3]).unwrap());
        assert!(PruneMask::read_from(&path, &other).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn masks_stay_nested_and_on_schedule(seed in 0u64..1000, rounds in 1u32..8, f in 0.05f64..0.6) {
            let (spec, params) = build_mlp(&[12, 9, 4], seed).unwrap();
            let p = spec.prunable_count() as f64;
            let mut mask = PruneMask::full(&spec);
            for r in 1..=rounds {
                let next = magnitude_prune(&params, &mask, f).unwrap();
                prop_assert!(next.is_nested_in(&mask));
                prop_assert!((next.density() - (1.0 - f).powi(r as i32)).abs() * p <= 1.0);
                mask = next;
            }
        }
    }
}
