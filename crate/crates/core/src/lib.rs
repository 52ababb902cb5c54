//! Optimal-transport ambiguity sets and their propagation calculus.
//!
//! The crate models distributional uncertainty as a ball of probability
//! distributions around a finitely supported center: every distribution the
//! center can be transported onto within a cost budget. It provides
//!
//! * exact discrete optimal-transport discrepancies with the optimal
//!   coupling ([`transport`]), verified against a permutation brute-force
//!   oracle;
//! * the propagation rules for those balls through linear and nonlinear
//!   maps, convolutions, and Hadamard products ([`ambiguity`]);
//! * uncertainty propagation for linear time-invariant systems, consensus
//!   iterations, and least-squares estimation ([`systems`]);
//! * worst-case CVaR evaluation and distributionally robust trajectory
//!   planning ([`drcvar`]).
//!
//! Distributions, costs, and ambiguity sets are immutable values; every
//! operation is pure, so independent computations can run concurrently.

pub mod ambiguity;
pub mod drcvar;
mod error;
pub mod linalg;
pub mod measures;
pub mod systems;
pub mod transport;

pub use error::{Error, Result};
