//! Dual-map vision-and-language navigation: a topological graph and an
//! egocentric feature grid encoded side by side, fused, and decoded into
//! navigation actions.

pub mod encoder;
pub mod error;
pub mod geometry;
pub mod grid_mapper;
pub mod harness;
pub mod mgaf;
pub mod nn;
pub mod policy;
pub mod sim_env;
pub mod topo_mapper;
pub mod training;
pub mod util;
pub mod vgwg;

pub use error::{Error, Result};
