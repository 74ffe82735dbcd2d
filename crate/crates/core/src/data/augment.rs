use rand::Rng;

use super::Batch;
use crate::seed::{self, tag};
use crate::tensor::Tensor;
use crate::{Error, Result};

const PAD: usize = 4;

/// Mirrors one HWC image left-to-right.
pub fn flip_horizontal(img: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + x) * c;
            let dst = (y * w + (w - 1 - x)) * c;
            out[dst..dst + c].copy_from_slice(&img[src..src + c]);
        }
    }
    out
}

/// Zero-pads an HWC image by 4 pixels per side and cuts the `h×w` window
/// whose top-left corner is `(dy, dx)` in padded coordinates.
pub fn crop_padded(img: &[f64], h: usize, w: usize, c: usize, dy: usize, dx: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        let sy = (y + dy) as isize - PAD as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = (x + dx) as isize - PAD as isize;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let src = (sy as usize * w + sx as usize) * c;
            let dst = (y * w + x) * c;
            out[dst..dst + c].copy_from_slice(&img[src..src + c]);
        }
    }
    out
}

/// Random pad-4 crop and horizontal flip (p = 0.5) per image. The stream for
/// each image is keyed by `(seed, id)`. Standardization is not applied here;
/// it is the model's first fixed layer.
pub fn augment_cifar(batch: &Batch, seed: u64) -> Result<Batch> {
    let s = batch.images.shape();
    if s[1..] != [32, 32, 3] {
        return Err(Error::shape("augment_cifar", format!("expected 32x32x3, got {s:?}")));
    }
    let (h, w, c) = (32, 32, 3);
    let mut data = Vec::with_capacity(batch.images.len());
    for (i, &id) in batch.ids.iter().enumerate() {
        let mut rng = seed::stream(seed, &[tag::AUGMENT, id]);
        let dy = rng.random_range(0..=2 * PAD);
        let dx = rng.random_range(0..=2 * PAD);
        let flip = rng.random_bool(0.5);
        let mut img = crop_padded(batch.images.row(i), h, w, c, dy, dx);
        if flip {
            img = flip_horizontal(&img, h, w, c);
        }
        data.extend(img);
    }
    Ok(batch.with_images(Tensor::new(s.to_vec(), data)?))
}
