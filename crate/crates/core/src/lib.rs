//! Vision-and-dialogue navigation on topological graphs.
//!
//! A navigator moves over a graph of viewpoints toward a target object. When
//! the entropy of its action distribution is high it can ask an oracle for
//! directions; the oracle answers from the shortest path to the target.

pub mod askpolicy;
pub mod dialogue;
pub mod episodes;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod navgraph;
pub mod navigator;
pub mod util;

pub use error::{Error, Result};
