//! Joint-embedding predictive knowledge distillation for a toy lip-reading task.
//!
//! A visual encoder learns to produce features that a generator maps into the
//! embedding space of a frozen "audio" teacher, trained in three stages with a
//! least-squares adversarial objective in the middle. The crate contains a
//! small reverse-mode autodiff engine, the four model groups, a synthetic
//! corpus with an exactly computable Bayes floor, the staged trainer and the
//! evaluation and comparison tooling.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod featfile;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod params;
pub mod rng;
pub mod selftest;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod workflow;

pub use config::RunConfig;
pub use error::{Error, FormatErrorKind, Result};
pub use params::{Group, GroupSet, ParamId, ParameterStore};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
