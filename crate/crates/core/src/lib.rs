//! Deterministic simulator for Byzantine-robust decentralized stochastic
//! optimization with a total-variation consensus penalty.
//!
//! The crate covers the regular agents' update rules (DPSGD, DRSA,
//! BRAVO-SAGA, BRAVO-LSVRG), the Byzantine message models, the graph and data
//! plumbing that feeds them, and the computable theory diagnostics
//! (penalty threshold, learning-error bound, Lyapunov value, and the exact
//! lower-bound instance).

pub mod algorithms;
pub mod attacks;
pub mod engine;
pub mod model;
pub mod problems;
pub mod rng;
pub mod theory;
pub mod topology;

pub use model::{sign_vec, sq_dist, AgentId, ModelVector, StackedState};
pub use rng::{Purpose, RngStream};
