//! Deterministic simulator for federated node classification on
//! heterophilic graphs.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod federated;
pub mod graph;
pub mod io;
pub mod model;
pub mod optim;
pub mod partition;
pub mod rng;
pub mod sparse;
pub mod synthgen;

pub use error::{Error, Result};
pub use graph::{Graph, NeighborLabelDistribution, NodeSplit};
