//! Generalizable knowledge distillation for semantic segmentation, desk
//! scale and fully self-contained.
//!
//! The crate provides:
//! - a dense f64 tensor type with reverse-mode autodiff ([`tensor`], [`graph`],
//!   [`gradcheck`]),
//! - toy vision-transformer encoders plus a linear segmentation decoder
//!   ([`models`]),
//! - the query-based soft distillation operator family ([`qsd`]),
//! - a procedural multi-domain synthetic segmentation corpus ([`datagen`]),
//! - multi-stage distill-then-freeze training protocols and baselines
//!   ([`pipeline`], [`optim`]),
//! - segmentation metrics, per-domain generalization reports, and training
//!   diagnostics ([`eval`]),
//! - binary checkpoint and corpus file formats ([`checkpoint`]).

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod qsd;
pub mod record;
pub mod seeding;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, TensorRef};
pub use tensor::Tensor;
