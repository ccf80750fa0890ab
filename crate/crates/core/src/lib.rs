//! Feedback-recurrent U-Net segmentation library.
//!
//! Everything runs on the CPU on top of a small reverse-mode autodiff engine:
//!
//! - [`tensor`]: 4-D tensors, the gradient tape, and the differentiable ops
//!   (conv, transposed conv, pooling, batch norm, softmax, losses).
//! - [`param`]: parameter store, He-uniform init, and the Adam update.
//! - [`layers`]: conv blocks with per-round batch norm, ConvLSTM cells, and
//!   recurrent convolutional layers.
//! - [`models`]: the five segmenter variants (plain U-Net, recurrent U-Net,
//!   and three two-round feedback variants) plus the feedback forward driver.
//! - [`loss`] and [`metrics`]: class-weighted cross entropy, the combined
//!   two-round loss, confusion matrices and IoU.
//! - [`data`]: PGM rasters, dataset manifests, cropping, dihedral
//!   augmentation, fold splits, and a synthetic blob dataset generator.
//! - [`gradcheck`]: finite-difference verification of every op and of a full
//!   two-round model, in f64.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod models;
pub mod param;
pub mod tensor;

pub use error::{Error, Result};
pub use param::{adam_step, BufferId, ParamId, ParamStore, Parameter};
pub use tensor::{Elementwise, Pointwise, Precision, Real, Shape, Tape, TensorBuf, TensorId};
