//! Physics-grounded reinforcement learning for a flow-matching trajectory
//! generator on simulated rigid-body motion.
//!
//! Modules, bottom-up:
//! - [`sim`]: ground-truth 2D rigid-body simulator (collision, pendulum,
//!   free fall, rolling).
//! - [`raster`]: per-object occupancy masks, mask centers and mask IoU.
//! - [`reward`]: trajectory offset, acceleration-peak collision detection,
//!   temporal collision weights and the weighted-offset reward.
//! - [`nn`]: dense network with analytic gradients and Adam.
//! - [`flow`]: conditional flow matching, ODE/SDE samplers and transition
//!   log-densities.
//! - [`mdcycle`]: group rollouts, group-relative policy optimization and the
//!   threshold-gated mimicry/discovery objective.
//! - [`bench`]: datasets, benchmark evaluation, ablations and reports.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod error;
pub mod flow;
pub mod geom;
pub mod mdcycle;
pub mod nn;
pub mod par;
pub mod raster;
pub mod reward;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
pub use geom::Vec2;
