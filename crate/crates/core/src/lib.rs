//! Distributed data-based predictive control of linear network systems.
//!
//! Agents at the nodes of a network learn a trajectory representation from a
//! single recorded experiment (Hankel matrices of their local signals), pose
//! a finite-horizon LQR with terminal constraint as a separable QP, solve it
//! cooperatively with a primal-dual flow that only exchanges messages between
//! neighbors, and stop when a residual certificate guarantees the first input
//! is within a tolerance of the optimum. [`controller`] wraps this in a
//! receding-horizon loop.
//!
//! Pipeline: [`network`] (ground truth and data) → [`data`] (Hankel blocks,
//! excitation checks) → [`problem`] (agent QPs) → [`solver`] (flow and
//! certificate) → [`controller`].

// `!(x > 0.0)` is used on purpose so that NaN parameters are rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod data;
pub mod error;
pub mod fixture;
pub mod linalg;
pub mod network;
pub mod par;
pub mod problem;
pub mod solver;

pub use error::{Error, Result};
