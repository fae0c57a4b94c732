//! Mixture of subgraph experts: anonymous-walk subgraph extraction, random
//! walk kernels against learnable hidden graphs, sparse expert routing, and
//! Weisfeiler-Leman style expressivity checks.

pub mod cache;
pub mod canon;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod kernel;
pub mod moe;
pub mod nn;
pub mod rng;
pub mod run;
pub mod train;
pub mod verify;
pub mod walks;
pub mod wl;

pub use error::{MoseError, Result};
pub use graph::{Graph, NodeSubgraph};
