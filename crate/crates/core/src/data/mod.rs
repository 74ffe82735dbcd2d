//! Dataset ingestion, augmentation and deterministic splitting.
//!
//! Pixels are always stored in `[0, 1]`; all perturbation budgets downstream
//! are expressed in that scale.

mod augment;
mod cifar;
mod mnist;

pub use augment::{augment_cifar, crop_padded, flip_horizontal};
pub use cifar::{load_cifar10, parse_cifar10};
pub use mnist::{encode_idx_images, encode_idx_labels, load_mnist, parse_idx_images, parse_idx_labels};

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::seed::{self, tag};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Images `[n, h, w, c]` in `[0, 1]` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// SHA-256 digests of the files the data came from.
    pub provenance: Vec<String>,
}

/// A slice of examples ready for a model. `ids` key the per-example random
/// streams used by attacks and augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

impl Batch {
    pub fn new(images: Tensor, labels: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        if images.shape()[0] != labels.len() || labels.len() != ids.len() {
            return Err(Error::shape(
                "batch",
                format!(
                    "{} images, {} labels, {} ids",
                    images.shape()[0],
                    labels.len(),
                    ids.len()
                ),
            ));
        }
        Ok(Self { images, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `range` as a new batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Batch {
        Batch {
            images: self.images.rows(range.clone()),
            labels: self.labels[range.clone()].to_vec(),
            ids: self.ids[range].to_vec(),
        }
    }

    pub fn with_images(&self, images: Tensor) -> Batch {
        Batch {
            images,
            labels: self.labels.clone(),
            ids: self.ids.clone(),
        }
    }
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, provenance: Vec<String>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("images {:?} vs {} labels", images.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::shape("dataset", "pixel outside [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Examples at `indices`; their ids are the positions in this dataset.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| i as u64).collect(),
        }
    }

    pub fn all(&self) -> Batch {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        }
    }

    /// The first `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

pub(crate) fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Converts a budget given on the 0–255 pixel scale into `[0, 1]` units.
pub fn epsilon_from_255(eps: f64) -> f64 {
    let e = eps / 255.0;
    assert!(
        (e * 255.0 - eps).abs() <= 1e-12 * eps.abs().max(1.0),
        "epsilon conversion lost precision"
    );
    e
}

/// Seeded, class-stratified split into disjoint train and eval sets.
///
/// Classes are drawn round-robin from independently shuffled per-class
/// pools, so every class contributes within one example of `n / k` whenever
/// it has enough examples. Both outputs are shuffled.
pub fn subset_split(data: &Dataset, n_train: usize, n_eval: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, eval) = split_indices(&data.labels, data.num_classes, n_train, n_eval, seed)?;
    Ok((data.subset(&train), data.subset(&eval)))
}

/// Index form of [`subset_split`].
pub fn split_indices(
    labels: &[usize],
    num_classes: usize,
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_train + n_eval > labels.len() {
        return Err(Error::InsufficientData(format!(
            "requested {n_train} + {n_eval} examples from {}",
            labels.len()
        )));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        pools[l].push(i);
    }
    for (c, pool) in pools.iter_mut().enumerate() {
        pool.shuffle(&mut seed::stream(seed, &[tag::SPLIT, c as u64]));
    }
    let mut cursor = vec![0usize; num_classes];
    let mut next_class = 0usize;
    let mut draw = |count: usize| {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let c = next_class;
            next_class = (next_class + 1) % pools.len();
            if cursor[c] < pools[c].len() {
                out.push(pools[c][cursor[c]]);
                cursor[c] += 1;
            }
        }
        out
    };
    let mut train = draw(n_train);
    let mut eval = draw(n_eval);
    train.shuffle(&mut seed::stream(seed, &[tag::SPLIT, u64::MAX]));
    eval.shuffle(&mut seed::stream(seed, &[tag::SPLIT, u64::MAX - 1]));
    Ok((train, eval))
}

/// Mini-batch index lists for one epoch: a seeded permutation cut into
/// consecutive batches (the last one may be short).
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream(seed, &[tag::SHUFFLE, epoch as u64]));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
