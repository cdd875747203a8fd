//! Self-training domain adaptation with dual-level pseudo-labels.
//!
//! A labeled bank of source pixel embeddings acts as a non-parametric
//! instance classifier next to the usual semantic classifier. Target pixels
//! get a semantic pseudo-label and an instance pseudo-label; the two are
//! aligned through the bank's class labels and regenerated from each other
//! before driving the consistency losses.
//!
//! Modules, bottom-up: [`numerics`], [`bank`], [`discrimination`],
//! [`regen`], [`synthdata`], [`selftrain`].

pub mod bank;
pub mod discrimination;
pub mod error;
pub mod numerics;
pub mod regen;
pub mod selftrain;
pub mod synthdata;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
