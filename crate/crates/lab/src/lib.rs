//! Desk-scale laboratory for studying LLM-unlearning objectives.
//!
//! The crate trains a tiny autoregressive transformer on a synthetic
//! fictitious-author QA corpus, runs unlearning objectives against it, and
//! instruments every step with gradient dot products (the G-effect) plus an
//! extraction-strength / model-utility / forget-quality evaluation protocol.
//!
//! The numeric core is generic over [`scalar::Scalar`]; the aliases below fix
//! f64, which everything shipped in the binary uses.

pub mod corpus;
pub mod error;
pub mod evalsuite;
pub mod geffect;
pub mod model;
pub mod objectives;
pub mod plot;
pub mod scalar;
pub mod unlearner;

pub use error::{LabError, Result};

/// Default-precision model state.
pub type Model = model::ModelState<f64>;
/// Default-precision flat gradient.
pub type Gradient = model::FlatGradient<f64>;
