//! Operational space control for a planar revolute arm, with the mass matrix
//! supplied either analytically or by a learned Lagrangian model.
//!
//! The crate is organized bottom-up:
//!
//! * [`dynamics`]: ground-truth rigid-body model of the arm (mass matrix,
//!   gravity, velocity terms, forward/inverse dynamics).
//! * [`sim`]: fixed-step simulation, domain randomization, reference
//!   trajectories, and episode rollouts.
//! * [`controller`]: the task-space controller plus joint-space baselines,
//!   all generic over where the mass matrix comes from.
//! * [`delan`]: the learned base dynamics model (structured mass matrix with
//!   analytical configuration derivatives).
//! * [`residual`]: bounded multiplicative correction on top of the frozen
//!   base, conditioned on a latent summary of recent history.
//! * [`learn`]: losses, hand-rolled gradients, Adam, and the pretrain and
//!   finetune loops.
//! * [`harness`]: configuration, checkpoints, metrics, and the experiment
//!   drivers behind the command line.

pub mod controller;
pub mod delan;
pub mod dynamics;
pub mod harness;
pub mod learn;
pub mod residual;
pub mod sim;
