pub mod error;
pub mod estimate;
pub mod gaussinfo;
pub mod graph;
pub mod harness;
pub mod linalg;
pub mod mlp;
pub mod rng;
pub mod synth;

pub use error::{Result, ScbmError};
