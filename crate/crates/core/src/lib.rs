//! Precomputed multi-hop feature propagation, node-adaptive attention over
//! propagation steps, and multi-stage self-training with reliable labels.

pub mod attention;
pub mod binio;
pub mod dense;
pub mod error;
pub mod graph;
pub mod io;
pub mod model;
pub mod propagation;
pub mod real;
pub mod training;

pub use error::{Error, Result};
