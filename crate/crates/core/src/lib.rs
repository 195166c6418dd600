//! Few-shot anomaly detection by hierarchical adaptation of a frozen
//! vision-language backbone.
//!
//! The pipeline runs residual adapters and learnable context prompts over
//! frozen multi-layer features, aligns the two modalities with a sequential
//! pair of gated cross-attentions, and scores queries with a blend of a
//! semantic and a prototype branch.

pub mod adaptation;
mod attention;
pub mod backbone;
pub mod checkpoint;
mod class;
pub mod clsa;
pub mod error;
pub mod evalmetrics;
pub mod experiment;
pub mod gradcheck;
pub mod inference;
mod io;
pub mod model;
pub mod numcore;
pub mod synthdata;
pub mod training;

pub use class::Class;
pub use error::{Error, Result};
