//! Multi-source domain-adaptive ensemble training, self-contained on CPU.
//!
//! A shared convolutional backbone with one classifier head per source
//! domain is trained so that the head ensemble transfers to an unseen target
//! domain, with or without unlabeled target data. The crate bundles the
//! reverse-mode tensor engine, the weak/strong augmentation pipeline, a
//! synthetic multi-domain dataset generator, the three training losses, the
//! SGD trainer, and a leave-one-domain-out benchmark harness.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod evalbench;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{grad_check, stop_gradient, Graph, Scalar, Tensor};
