// SPDX-License-Identifier: MIT OR Apache-2.0

//! # dem-core
//!
//! Knowledge localization and knowledge editing for free-text targets on a
//! small, fully deterministic decoder-only transformer.
//!
//! - [`model`]: the transformer substrate (forward pass with an activation
//!   tape and interventions, hand-written reverse-mode gradients, greedy
//!   decoding, training, checkpoint files).
//! - [`localization`]: clean / corrupted / restoration tracing with
//!   multi-token targets, entity decoupling and the layer recall probe.
//! - [`editor`]: dynamics-aware layer selection and closed-form ridge
//!   updates of the MLP and attention output weights, with ablation modes.
//! - [`dataset`]: commonsense editing records, relation templates and a
//!   seeded toy corpus generator.
//! - [`eval`]: efficacy / generalization / specificity / commonsense /
//!   consistency / fluency metrics and the aggregate score.
//!
//! All arithmetic is `f64`; every random draw comes from an explicit seed.

pub mod container;
pub mod dataset;
pub mod editor;
pub mod error;
pub mod eval;
pub mod localization;
pub mod model;
pub mod numerics;
pub mod toy;

pub use error::{DemError, Result};
