//! Dense `f64` tensors, a gradient tape, Adam, and a finite-difference checker.

pub mod adam;
pub mod fdcheck;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, WarmupSchedule};
pub use fdcheck::{finite_difference_check, FdConfig, FdReport};
pub use ops::causal_softmax;
pub use rng::{derive_seed, seeded, substream, SeedRng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
