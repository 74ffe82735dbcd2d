//! Adversarially robust training as a saddle-point problem.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors and a reverse-mode tape.
//! * [`nn`]: the convolutional model family, initialization and checkpoints.
//! * [`attack`]: the inner maximization (FGSM, PGD with restarts, CW/CW+,
//!   targeted PGD, R+FGSM) and its projections.
//! * [`train`]: the outer minimization (SGD with momentum on natural or
//!   adversarially perturbed batches).
//! * [`landscape`]: restart studies, concentration and geometry of maxima,
//!   segment probes.
//! * [`eval`]: robust accuracy, epsilon sweeps, transfer matrices, gradient
//!   angle histograms and weight inspection.
//! * [`data`]: MNIST IDX / CIFAR-10 binary ingestion, augmentation, splits.
//!
//! Work that is independent per example runs through [`par`], which uses
//! rayon when the `parallel` feature is enabled and plain iterators
//! otherwise. Randomness is always derived from [`seed`] streams keyed by
//! example and restart index, so results do not depend on thread count.

pub mod attack;
pub mod data;
pub mod error;
pub mod eval;
pub mod landscape;
pub mod nn;
pub mod par;
pub mod report;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
