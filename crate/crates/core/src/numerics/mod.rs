//! Dense tensors, a reverse-mode gradient tape, optimizers and schedules.
//!
//! Every model in the crate is generic over [`Float`] so the same forward
//! code can run in 32-bit for training and in 64-bit for finite-difference
//! checks.

mod float;
pub mod optim;
pub mod params;
pub mod rng;
pub mod schedule;
pub mod tape;
mod tensor;

pub use float::Float;
pub use optim::{OptimizerKind, OptimizerState};
pub use params::{Binder, Bindings, ParamRef, ParamStore};
pub use rng::Rng;
pub use schedule::CosineSchedule;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
