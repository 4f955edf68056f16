//! Batch, Group and Instance normalization for volumetric `(N, D, H, W, C)`
//! tensors, embedded in a small 3D residual U-Net segmentation pipeline
//! with a benchmark harness for comparing the methods at batch size one.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense five-axis tensors and set reductions.
//! * [`norm`]: statistics partitions and the shared normalization kernel.
//! * [`layers`] and [`net`]: convolutions and the residual U-Net.
//! * [`objective`]: Dice, cross-entropy and the combined training loss.
//! * [`data`]: synthetic volumes, NRRD input and overlapping slabs.
//! * [`train`]: Adam, the training loop, evaluation and checkpoints.
//! * [`bench`]: experiment plans and Markdown/CSV reports.
//! * [`gradcheck`]: finite-difference suites for every backward pass.

pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod net;
pub mod norm;
pub mod objective;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use norm::{NormKind, NormMethod};
pub use tensor::{Real, Shape5, Tensor5};
