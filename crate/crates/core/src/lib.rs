//! Iterative structured pruning with weight / learning-rate rewinding.
//!
//! The crate trains small image classifiers from scratch (LeNet-300-100 on
//! MNIST, a LeNet-5 variant on CIFAR-10), then repeatedly prunes whole
//! neurons or filters, rewinds the survivors to an early-epoch checkpoint and
//! retrains them. Three pruning policies are provided:
//!
//! * **ILP**: drop the units with the smallest weight L1 norm.
//! * **IAP**: drop a fixed fraction of units with the smallest mean
//!   post-ReLU activation.
//! * **AIAP**: drop every unit whose mean activation is at or below an
//!   adaptive threshold that grows when pruning progress stalls.
//!
//! Everything from tensors and reverse-mode autodiff up to the experiment
//! loop lives here; `structprune` (the binary) is a thin CLI over
//! [`cli::run`].

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod pruning;
pub mod rng;

pub use error::{Error, Result};
