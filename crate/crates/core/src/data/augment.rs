use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Zero padding on each side before the random crop.
pub const PAD: usize = 4;

/// Pads one `C×H×W` image by [`PAD`], crops back to `H×W` at offset
/// `(dy, dx)` in `0..=2·PAD`, then optionally flips horizontally.
pub fn augment_image(img: &[f32], c: usize, h: usize, w: usize, dy: usize, dx: usize, flip: bool) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            // source row in unpadded coordinates
            let sy = (y + dy) as isize - PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let ox = if flip { w - 1 - x } else { x };
                let sx = (x + dx) as isize - PAD as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + ox] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Random crop and flip for every image of a `[B, C, H, W]` batch.
pub fn augment(batch: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let &[b, c, h, w] = batch.shape() else {
        return Err(Error::Shape(format!("augment expects [B, C, H, W], got {:?}", batch.shape())));
    };
    let n = c * h * w;
    let mut out = Vec::with_capacity(b * n);
    for img in batch.data().chunks(n) {
        let dy = rng.random_range(0..=2 * PAD);
        let dx = rng.random_range(0..=2 * PAD);
        let flip = rng.random_bool(0.5);
        out.extend(augment_image(img, c, h, w, dy, dx, flip));
    }
    Tensor::new(batch.shape().to_vec(), out)
}
