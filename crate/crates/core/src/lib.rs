//! Parameter-efficient fine-tuning engine and benchmark harness for EEG
//! classification models.
//!
//! The crate is organised by subsystem:
//!
//! - [`signalprep`]: resampling, zero-phase filtering, re-referencing,
//!   channel mapping and patching of raw recordings.
//! - [`diffcore`]: a small reverse-mode autodiff engine with SGD/Adam.
//! - [`modelzoo`]: declarative EEG architectures with their classification
//!   heads and parameter accounting.
//! - [`lora`]: low-rank adapter injection, counting and merging.
//! - [`evalharness`]: subject-independent cross-validation, statistics and
//!   the rank / layer / dropout ablation grids.
//! - [`synthdata`]: deterministic synthetic EEG for end-to-end tests.
//! - [`container`] and [`config`]: the on-disk data container and the
//!   experiment config file.

pub mod config;
pub mod container;
pub mod diffcore;
pub mod error;
pub mod evalharness;
pub mod lora;
pub mod modelzoo;
pub mod seed;
pub mod signalprep;
pub mod synthdata;

pub use diffcore::{Graph, Mode, Param, ParamId, ParamStore, Tensor, Var};
pub use error::{Error, Result};
pub use lora::{AdaptedModel, LoraConfig, TargetKind};
pub use modelzoo::{Architecture, LayerKind, Model, ModelConfig, ParamReport};
pub use signalprep::{Electrode, Montage, PatchedInput, Recording, TrialSet};
