//! Dual teacher-student self-training for noisily labeled sequence tagging.
//!
//! The library trains a small token classifier on distantly supervised
//! (dictionary-matched) labels and then refines it in a self-training loop:
//!
//! - two teacher-student pairs with different architectures, pretrained on
//!   the distant labels ([`trainer::pretrain`]);
//! - reliable-label selection from the teachers' agreement and confidence
//!   ([`selection`]);
//! - student updates on a composite loss of cross-entropy over reliable
//!   labels plus temperature-softened distillation from both teachers, with
//!   the two distillation weights solved each step as a constrained min-norm
//!   problem over feature-space gradients ([`distill`]);
//! - fine-grained student-to-teacher ensembling, where each network layer
//!   is either preserved or EMA-blended independently ([`ensemble`]);
//! - crosswise label updates and best-of-four dev selection
//!   ([`trainer::run`]).
//!
//! A synthetic corpus generator with controllable label noise
//! ([`corpus::synth_corpus`]) makes the whole pipeline exercisable
//! end-to-end at desk scale, and [`metrics`] scores entity-level
//! precision/recall/F1. The `atsen` binary exposes `synth`, `train`,
//! `ablate` and `eval` subcommands over a single TOML experiment file.

pub mod corpus;
pub mod distill;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod mat;
pub mod metrics;
pub mod selection;
pub mod tagger;
pub mod trainer;

pub use error::{Error, Result};
pub use mat::Mat;
