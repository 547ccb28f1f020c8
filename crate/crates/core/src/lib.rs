//! Shared-memory event-driven dataflow execution engine and a Barnes-Hut
//! N-body application built on it.
//!
//! The crate is organized bottom-up:
//! - [`math`]: fixed-order 3-vector arithmetic.
//! - [`engine`]: lightweight tasks, single-assignment futures addressed by
//!   global ids, when-all joins, per-worker FIFO queues, quiescence with
//!   deadlock reporting.
//! - [`octree`]: Barnes-Hut tree, acceptance criterion, interaction lists,
//!   and the softened force kernel.
//! - [`icgen`]: bit-exact RNG, Plummer sampler, particle file format.
//! - [`dataflow`]: the flattened-tree force stage expressed as engine
//!   futures and tasks, with grain-size control.
//! - [`sim`]: leapfrog time integration over pluggable force backends
//!   (dataflow, static-chunked threads, serial) and energy diagnostics.

pub mod dataflow;
pub mod engine;
pub mod icgen;
pub mod math;
pub mod octree;
pub mod sim;

pub use math::Vec3;
pub use octree::{ForceParams, Particle, Theta};
