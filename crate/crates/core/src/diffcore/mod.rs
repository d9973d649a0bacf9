//! Minimal reverse-mode differentiation engine.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output value
//! and whatever it needs for the backward sweep. Parameters live outside the
//! tape in a [`ParamStore`]; [`Graph::backward`] returns their gradients and
//! never mutates them. Optimizers in [`optim`] apply the update.

mod checkpoint;
mod gemm;
mod graph;
pub mod gradcheck;
mod ops;
pub mod optim;
mod params;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointEntry};
pub use gemm::gemm;
pub use gradcheck::{finite_diff_check, GradCheckReport, ParamGradError};
pub use graph::{BufferUpdate, Gradients, Graph, Mode, Var};
pub use ops::{BnStats, Conv2dSpec, Padding};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
