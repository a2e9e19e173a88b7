//! Attribute-aware hashing for fine-grained retrieval.
//!
//! The pipeline ingests multi-scale feature pyramids, refines them into a
//! token sequence, decodes one attribute feature per learnable query with
//! cross-attention, and compresses each attribute into one hash bit.
//! Training uses an asymmetric pairwise inner-product loss against database
//! codes, optionally widened by circularly shifted query branches.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod analysis;
pub mod dataset;
pub mod decoder;
pub mod init;
pub mod io;
pub mod model;
pub mod objective;
pub mod pyramid;
pub mod retrieval;
pub mod synthgen;
