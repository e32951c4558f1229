//! The `LTHC` checkpoint file.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "LTHC" | version u32 | count u64 | step u64 | count × f32 params
//! | input rank u32, rank × u32 | layer count u32, per layer: tag u8, n u32, n × u32
//! | has_momentum u8 [count × f32] | init, order, augment seeds 3 × u64
//! | has_mask u8 [32-byte mask checksum]
//! ```

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{Layer, ModelSpec, ParamVector};

const MAGIC: &[u8; 4] = b"LTHC";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub order: u64,
    pub augment: u64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamVector,
    pub momentum: Option<Vec<f32>>,
    pub step: u64,
    pub seeds: Seeds,
    pub mask: Option<[u8; 32]>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let spec = self.params.spec();
        let mut b = Vec::with_capacity(64 + 8 * self.params.len());
        b.extend_from_slice(MAGIC);
        b.extend(VERSION.to_le_bytes());
        b.extend((self.params.len() as u64).to_le_bytes());
        b.extend(self.step.to_le_bytes());
        for v in self.params.values() {
            b.extend(v.to_le_bytes());
        }
        b.extend((spec.input_shape.len() as u32).to_le_bytes());
        for &d in &spec.input_shape {
            b.extend((d as u32).to_le_bytes());
        }
        b.extend((spec.layers.len() as u32).to_le_bytes());
        for layer in &spec.layers {
            let (tag, extents) = describe(layer);
            b.push(tag);
            b.extend((extents.len() as u32).to_le_bytes());
            for e in extents {
                b.extend((e as u32).to_le_bytes());
            }
        }
        match &self.momentum {
            Some(m) => {
                b.push(1);
                for v in m {
                    b.extend(v.to_le_bytes());
                }
            }
            None => b.push(0),
        }
        for s in [self.seeds.init, self.seeds.order, self.seeds.augment] {
            b.extend(s.to_le_bytes());
        }
        match &self.mask {
            Some(h) => {
                b.push(1);
                b.extend_from_slice(h);
            }
            None => b.push(0),
        }
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("LTHC", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("LTHC", format!("unsupported version {version}")));
        }
        let count = r.u64()? as usize;
        let step = r.u64()?;
        let params = r.f32s(count)?;
        let rank = r.u32()? as usize;
        let input_shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let tag = r.take(1)?[0];
            let n = r.u32()? as usize;
            let extents = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            layers.push(rebuild(tag, &extents)?);
        }
        let spec = Arc::new(ModelSpec::from_layers(input_shape, layers)?);
        if spec.total != count {
            return Err(Error::format("LTHC", format!("layout holds {} parameters, header says {count}", spec.total)));
        }
        let momentum = match r.take(1)?[0] {
            0 => None,
            1 => Some(r.f32s(count)?),
            f => return Err(Error::format("LTHC", format!("bad momentum flag {f}"))),
        };
        let seeds = Seeds { init: r.u64()?, order: r.u64()?, augment: r.u64()? };
        let mask = match r.take(1)?[0] {
            0 => None,
            1 => Some(r.take(32)?.try_into().unwrap()),
            f => return Err(Error::format("LTHC", format!("bad mask flag {f}"))),
        };
        if r.at != bytes.len() {
            return Err(Error::format("LTHC", "trailing bytes"));
        }
        Ok(Checkpoint { params: ParamVector::from_values(&spec, params)?, momentum, step, seeds, mask })
    }

    /// SHA-256 of the encoded file.
    pub fn hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        Sha256::digest(self.encode()).into()
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn describe(layer: &Layer) -> (u8, Vec<usize>) {
    match *layer {
        Layer::Dense { inputs, outputs, bias } => (0, vec![inputs, outputs, bias as usize]),
        Layer::Conv3x3 { in_channels, out_channels, height, width } => (1, vec![in_channels, out_channels, height, width]),
        Layer::Relu => (2, vec![]),
        Layer::MaxPool2 => (3, vec![]),
        Layer::AvgPool2 => (4, vec![]),
        Layer::Flatten => (5, vec![]),
    }
}

fn rebuild(tag: u8, e: &[usize]) -> Result<Layer> {
    Ok(match (tag, e) {
        (0, &[inputs, outputs, bias]) if bias <= 1 => Layer::Dense { inputs, outputs, bias: bias == 1 },
        (1, &[in_channels, out_channels, height, width]) => Layer::Conv3x3 { in_channels, out_channels, height, width },
        (2, []) => Layer::Relu,
        (3, []) => Layer::MaxPool2,
        (4, []) => Layer::AvgPool2,
        (5, []) => Layer::Flatten,
        _ => return Err(Error::format("LTHC", format!("bad layer descriptor {tag} {e:?}"))),
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::format("LTHC", "truncated"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format("LTHC", "count overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_cnn, build_mlp};

    fn sample(momentum: bool, mask: bool) -> Checkpoint {
        let (_, params) = build_cnn((1, 8, 8), &[4], 3, 9).unwrap();
        let n = params.len();
        Checkpoint {
            params,
            momentum: momentum.then(|| (0..n).map(|i| i as f32 * 1e-3).collect()),
            step: 417,
            seeds: Seeds { init: 1, order: 2, augment: u64::MAX },
            mask: mask.then_some([0xab; 32]),
        }
    }

    #[test]
    fn header_layout() {
        let c = sample(false, false);
        let b = c.encode();
        assert_eq!(&b[..4], b"LTHC");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), c.params.len() as u64);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 417);
        assert_eq!(f32::from_le_bytes(b[24..28].try_into().unwrap()), c.params.values()[0]);
    }

    #[test]
    fn round_trips_with_and_without_optional_parts() {
        for (m, k) in [(false, false), (true, false), (false, true), (true, true)] {
            let c = sample(m, k);
            assert_eq!(Checkpoint::decode(&c.encode()).unwrap(), c);
        }
        let (_, params) = build_mlp(&[5, 4, 2], 1).unwrap();
        let c = Checkpoint { params, momentum: None, step: 0, seeds: Seeds::default(), mask: None };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w0.lthc");
        c.write_to(&path).unwrap();
        assert_eq!(Checkpoint::read_from(&path).unwrap(), c);
    }

    #[test]
    fn rejects_damaged_files() {
        let b = sample(true, true).encode();
        assert!(Checkpoint::decode(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(Checkpoint::decode(&magic).is_err());
        let mut count = b;
        count[8] ^= 1;
        assert!(Checkpoint::decode(&count).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = sample(true, false);
        let mut b = a.clone();
        b.step += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
    }
}
