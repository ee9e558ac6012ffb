//! Concept-structured dictionary learning for embedding spaces: a labelled
//! semi-NMF whose atoms are grouped per concept, plus the decomposition,
//! retrieval, captioning and alignment tools built on it.

pub mod disentangle;
pub mod error;
pub mod io;
pub mod learn;
pub mod nnls;
pub mod pq;
pub mod pseudo_label;
pub mod retrieval;
pub mod synthetic;
pub mod text;
pub mod types;

#[cfg(test)]
mod oracle;

pub use error::{Error, Result};
pub use types::*;
