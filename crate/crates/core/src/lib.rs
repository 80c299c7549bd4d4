//! Two-phase training for fully-connected softplus networks.
//!
//! A base first-order method trains every layer for `τ` steps, the hidden
//! layers are then perturbed with non-degenerate Gaussian noise, and a second
//! phase continues in a way that keeps the neural tangent kernel's rank: either
//! by training only the last layer (a convex problem over fixed features) or by
//! lazy full-network steps that are rejected whenever the rank would drop.
//!
//! Alongside the trainer the crate ships executable checks for the conditions
//! that make the second phase converge globally (input distinguishability,
//! full-row-rank features, NTK rank preservation) and evaluators for the
//! resulting suboptimality bounds along a recorded trajectory.

pub mod bounds;
pub mod cli;
pub mod data;
pub mod error;
pub mod expressivity;
pub mod gradcheck;
pub mod linalg;
pub mod loss;
pub mod network;
pub mod ntk;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use loss::LossKind;
pub use network::{NetworkSpec, Params};
