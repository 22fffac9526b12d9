//! Neighbor mixture models for labels on graphs.

pub mod error;
pub mod exec;
pub mod grad;
pub mod graph;
pub mod kernel;
pub mod learning;
pub mod model;
pub mod parameterize;
pub mod predict;
pub mod rng;
pub mod special;
pub mod synth;
pub mod taped;
pub mod target;
pub mod variational;

pub use error::{NmmError, Result};
pub use graph::{Graph, NodeSet};
pub use kernel::{LabeledNodes, NeighborAssignment, NmmParams};
