use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format("idx", "truncated header"))
}

/// IDX image file (`0x00000803`, big-endian dims) → `[N, 1, H, W]` scaled to `[0, 1]`.
pub fn read_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::format("idx", format!("image magic {magic:#010x}")));
    }
    let (n, h, w) = (be_u32(bytes, 4)? as usize, be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    let body = &bytes[16..];
    let expected = n * h * w;
    if body.len() != expected {
        return Err(Error::format("idx", format!("expected {expected} pixel bytes, found {}", body.len())));
    }
    if expected == 0 {
        return Err(Error::EmptyDataset);
    }
    Tensor::new(vec![n, 1, h, w], body.iter().map(|&b| b as f32 / 255.0).collect())
}

/// IDX label file (`0x00000801`); any label `>= classes` is rejected.
pub fn read_idx_labels(bytes: &[u8], classes: usize) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::format("idx", format!("label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format("idx", format!("expected {n} labels, found {}", body.len())));
    }
    check_labels(body, classes, "idx")
}

/// CIFAR binary batches: repeated `<label byte><3072 bytes CHW>` records.
pub fn read_cifar_binary(bytes: &[u8], classes: usize) -> Result<(Tensor, Vec<usize>)> {
    if bytes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format("cifar", format!("{} bytes is not a whole number of records", bytes.len())));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut raw_labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        raw_labels.push(rec[0]);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let labels = check_labels(&raw_labels, classes, "cifar")?;
    Ok((Tensor::new(vec![n, 3, 32, 32], pixels)?, labels))
}

fn check_labels(raw: &[u8], classes: usize, format: &'static str) -> Result<Vec<usize>> {
    raw.iter()
        .map(|&b| {
            if (b as usize) < classes {
                Ok(b as usize)
            } else {
                Err(Error::format(format, format!("label {b} outside 0..{classes}")))
            }
        })
        .collect()
}
