//! Eco-driving through a signalized intersection when the remaining green
//! time is uncertain.
//!
//! The crate solves a chain of Hamilton-Jacobi-Bellman equations with
//! semi-Lagrangian schemes on a Cartesian `(d, v, t)` grid:
//!
//! 1. a stationary problem for the green phase after the light has cycled,
//! 2. time-dependent problems for the yellow and red phases, with cut cells
//!    along the constraint curves,
//! 3. a chain of conditional value functions for the green phase whose end
//!    is only known as a discrete distribution.
//!
//! Feedback controls stored during the solves are used to trace branching
//! trajectories, and the time weight can be calibrated against a travel-time
//! budget to produce fuel/discomfort Pareto fronts.

pub mod cli;
pub mod error;
pub mod grid;
pub mod model;
pub mod oracle;
pub mod pareto;
pub mod solver;
pub mod tracer;

pub use error::{Error, Result};
