//! Noisy Toom cellular automata composed with a one-dimensional rule, and a
//! checked construction of explanation trees for every observed deviation.
//!
//! The modules build on each other bottom-up:
//!
//! * [`lattice`]: sites, configurations and space-time points.
//! * [`rules`]: Toom voting, tabulated line rules and their composition.
//! * [`noise_sim`]: noisy trajectories next to the ideal one.
//! * [`deviation`]: the deviation field, its covering-space lift and the
//!   propagation inequality.
//! * [`geometry`]: the three scaled linear functionals, sizes and spans.
//! * [`sitegraph`]: arrows and forks of the space-time graph.
//! * [`explanation`]: excuses, clusters, the spanning construction,
//!   refinement, and the explanation-tree builder and verifier.
//! * [`wtrees`]: weighted-tree cuts, separators and subtree counting.
//! * [`harness`]: bound arithmetic, Monte Carlo drivers and file formats.

pub mod deviation;
pub mod error;
pub mod explanation;
pub mod geometry;
pub mod harness;
pub mod lattice;
pub mod noise_sim;
pub mod rules;
pub mod sitegraph;
pub mod wtrees;

pub use error::{Error, Result};
pub use lattice::{Configuration, LatticeShape, SpaceTimeConfiguration, SpaceTimePoint};
