//! MNIST IDX files: big-endian magic, big-endian dimensions, unsigned bytes.

use std::fs;
use std::path::Path;

use super::{digest, Dataset};
use crate::tensor::Tensor;
use crate::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x} (IDX images)"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let want = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != want {
        return Err(Error::format(
            path,
            format!("truncated payload: header promises {want} bytes, found {}", payload.len()),
        ));
    }
    Ok((n, rows, cols, payload.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x} (IDX labels)"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::format(
            path,
            format!("truncated payload: header promises {n} labels, found {}", payload.len()),
        ));
    }
    Ok(payload.to_vec())
}

/// Loads an images/labels file pair; pixels are divided by 255.
pub fn load_mnist(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let ib = fs::read(ip)?;
    let lb = fs::read(lp)?;
    let (n, rows, cols, pixels) = parse_idx_images(&ib, ip)?;
    let raw_labels = parse_idx_labels(&lb, lp)?;
    if raw_labels.len() != n {
        return Err(Error::format(
            lp,
            format!("count mismatch: {n} images but {} labels", raw_labels.len()),
        ));
    }
    if let Some(&bad) = raw_labels.iter().find(|&&l| l > 9) {
        return Err(Error::format(lp, format!("label {bad} out of range")));
    }
    let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let images = Tensor::new(vec![n, rows, cols, 1], data)?;
    Dataset::new(
        images,
        raw_labels.into_iter().map(usize::from).collect(),
        10,
        vec![digest(&ib), digest(&lb)],
    )
}

/// Re-encodes a single-channel dataset as an IDX images file.
pub fn encode_idx_images(d: &Dataset) -> Vec<u8> {
    let [h, w, _] = d.image_shape();
    let mut out = Vec::with_capacity(16 + d.images.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for v in [d.len(), h, w] {
        out.extend_from_slice(&(v as u32).to_be_bytes());
    }
    out.extend(d.images.data().iter().map(|&v| (v * 255.0).round() as u8));
    out
}

pub fn encode_idx_labels(d: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + d.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(d.len() as u32).to_be_bytes());
    out.extend(d.labels.iter().map(|&l| l as u8));
    out
}
