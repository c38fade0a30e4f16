//! Multi-way natural joins over a simulated cluster.
//!
//! Queries are shuffled in one round with HCube and joined on each worker with
//! LeapFrog over sorted-array tries. A cost-based optimizer decides which
//! hypertree nodes to pre-compute, trading extra shuffling for cheaper joins.

pub mod cluster;
pub mod datasets;
pub mod engine;
pub mod error;
pub mod ghd;
pub mod hcube;
pub mod leapfrog;
pub mod optimizer;
pub mod relational;
pub mod sampler;
pub mod trie;

pub use error::{Error, Result};
