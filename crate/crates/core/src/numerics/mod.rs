//! Dense tensors, reverse-mode autodiff, layer kernels, optimizers and
//! learning-rate schedules.
//!
//! Training runs in `f32`. Every kernel is generic over [`Scalar`] so the
//! same code path can be driven in `f64` for finite-difference gradient
//! checks.

pub mod kernels;
pub mod optim;
pub mod par;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use optim::{OptimizerKind, OptimizerState};
pub use schedule::LrSchedule;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
