//! Decentralized safety filtering for coupled networked systems using
//! collaborative control barrier functions.
//!
//! Nodes evolve as `ẋ_i = f_i(x_i, x_{N_i^+}) + g_i(x_i) u_i`. Each node keeps
//! its own constraint `h_i(x_i) ≥ 0` through a second-order barrier chain in
//! which incoming neighbors' controls appear. Before every control update the
//! nodes negotiate how much of the safety margin each neighbor must supply
//! ([`collab`]); each node then filters its nominal control inside the region
//! it agreed to ([`simulate::safety_filter`]).

pub mod barrier;
pub mod collab;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod simulate;

pub use error::{Error, Result};
pub use graph::{NetworkGraph, NodeId};
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
