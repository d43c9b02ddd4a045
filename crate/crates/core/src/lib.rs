//! Mechanistic toolkit for studying how preference tuning lowers toxicity in
//! small decoder-only transformers: value-vector attribution, neuron groups,
//! activation patching, and training-free activation editing.

pub mod attribution;
pub mod dpo;
pub mod error;
pub mod evalmetrics;
pub mod formats;
pub mod intervention;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod synthbench;

pub use error::{Error, ErrorClass, Result};
