//! Physics-informed autoregressive PDE solving.
//!
//! A state-space network rolls a 1-D solution forward in time from its
//! known initial condition and is trained to minimize finite-difference PDE
//! residuals of its own rollout, with gradients taken through the whole
//! unrolled sequence.

pub mod ablation;
pub mod bench;
pub mod fd;
pub mod model;
pub mod metrics;
pub mod numerics;
pub mod train;
