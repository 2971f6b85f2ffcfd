//! Stochastic event-based scheduling of multiple sensors that share a single
//! channel for remote state estimation.
//!
//! Each sensor runs a steady-state Kalman filter on its own LTI process and
//! decides whether to send its local estimate through a randomized trigger.
//! Sensors contend through a priority queue, so exactly one of them transmits
//! every slot. The remote estimator keeps the MMSE estimate of every process
//! and its exact conditional error covariance.
//!
//! The crate provides
//! - the system model and Riccati machinery ([`model`], [`filtering`]),
//! - the trigger and its closed-form probabilities ([`trigger`]),
//! - the remote estimator and its covariance maps ([`estimator`]),
//! - periodic, greedy and MDP schedulers ([`scheduling`], [`mdp`]),
//! - the relaxed-rate lower bound on the optimal cost ([`lowerbound`]),
//! - a seeded Monte Carlo harness with file I/O ([`harness`], [`config`]).

pub mod config;
pub mod estimator;
pub mod filtering;
pub mod harness;
pub mod lowerbound;
pub mod mdp;
pub mod model;
pub mod optimize;
pub mod scheduling;
pub mod trigger;

pub use nalgebra;

pub use estimator::{CovMaps, RemoteEstimate};
pub use filtering::{solve_dare, LocalEstimate, SteadyStateFilter};
pub use model::{LtiSystem, SystemSet};
pub use scheduling::{Queue, SchedulePolicy, TransmissionOutcome};
