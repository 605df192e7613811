//! Distributed Shapley-value explanations for edges of a graph convolutional
//! network's node predictions.

pub mod bench;
pub mod comm;
pub mod document;
pub mod error;
pub mod fidelity;
pub mod gnn;
pub mod graph;
pub mod oracle;
pub mod pipeline;
pub mod sampler;
pub mod solver;
pub mod synthetic;

pub use error::{Error, ErrorKind, Result};
