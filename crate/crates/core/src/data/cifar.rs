//! CIFAR-10 binary batches: 3073-byte records (label byte, then 1024 red,
//! 1024 green, 1024 blue bytes, each plane row-major 32×32).

use std::fs;
use std::path::Path;

use super::{digest, Dataset};
use crate::tensor::Tensor;
use crate::{Error, Result};

const RECORD: usize = 3073;
const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;

/// Parses one or more concatenated batches into NHWC images and labels.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    if bytes.len() % RECORD != 0 {
        return Err(Error::format(
            path,
            format!("size {} is not a multiple of {RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / RECORD;
    let mut pixels = vec![0.0; n * PLANE * 3];
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(Error::format(path, format!("record {i}: label {label} > 9")));
        }
        labels.push(usize::from(label));
        let img = &mut pixels[i * PLANE * 3..(i + 1) * PLANE * 3];
        for c in 0..3 {
            let plane = &rec[1 + c * PLANE..1 + (c + 1) * PLANE];
            for (p, &b) in plane.iter().enumerate() {
                img[p * 3 + c] = f64::from(b) / 255.0;
            }
        }
    }
    Ok((pixels, labels))
}

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar10<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut provenance = Vec::new();
    for p in paths {
        let bytes = fs::read(p.as_ref())?;
        let (px, lb) = parse_cifar10(&bytes, p.as_ref())?;
        pixels.extend(px);
        labels.extend(lb);
        provenance.push(digest(&bytes));
    }
    if labels.is_empty() {
        return Err(Error::InsufficientData("no CIFAR-10 records".into()));
    }
    let images = Tensor::new(vec![labels.len(), SIDE, SIDE, 3], pixels)?;
    Dataset::new(images, labels, 10, provenance)
}
