//! Cross-tabular image-tabular self-supervised learning.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`graph`]: dense `f64` tensors and a reverse-mode tape.
//! - [`table`]: schema-aware cohort loading and normalization.
//! - [`header`]: frozen header embeddings and the trainable adapter.
//! - [`pmolin`]: the prototype-guided mixture-of-linear layer.
//! - [`sat`]: the semantic-aware tabular encoder.
//! - [`fusion`]: image encoder, unified fusion and the prediction heads.
//! - [`ssl`]: contrastive and matching objectives.
//! - [`synth`]: synthetic multi-cohort generator with a Bayes reference.
//! - [`train`], [`metrics`], [`checkpoint`], [`diagnostics`]: the harness.

pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod fusion;
pub mod header;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pmolin;
pub mod sat;
pub mod ssl;
pub mod synth;
pub mod graph;
pub mod table;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{AttentionMask, Graph, Var};
pub use tensor::Tensor;
