//! forgetlab: a desk-scale toolkit for dissecting catastrophic forgetting in
//! continually trained translation transformers.
//!
//! The crate trains a tiny encoder–decoder transformer on synthetic parallel
//! corpora, then takes it apart: freeze/update module sweeps, first-order
//! Taylor parameter importance, parameter-erasure curves, importance heatmaps
//! and importance-decile drift between the general-domain and in-domain
//! checkpoints.

pub mod container;
pub mod corpusgen;
pub mod error;
pub mod experiment;
pub mod forensics;
pub mod metrics;
pub mod nanoformer;
pub mod ndgrad;
pub mod trainer;

pub use error::{Error, Result};
