//! Exemplar-free class-incremental learning with output-level knowledge distillation
//! and teacher batch-normalization adaptation.
//!
//! The crate is layered bottom-up:
//!
//! - [`autodiff`]: a small tape-based reverse-mode engine over [`Tensor`]s.
//! - [`nn`]: dense/conv layers, batch/layer/group normalization and the multi-head
//!   [`nn::IncrementalModel`] with snapshotting and a flat binary format.
//! - [`distill`]: the GKD/TKD/MKD/ANCL losses and the teacher update strategies.
//! - [`harness`]: schedules, SGD, warmup and the sequential task protocol.
//! - [`metrics`]: task-agnostic accuracy, forgetting, linear CKA, BN-statistics KLD.
//! - [`data`]: synthetic task streams, IDX/CIFAR readers, Gaussian corruption.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod distill;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
