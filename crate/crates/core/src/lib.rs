//! Optimal consumption and investment with proportional transaction costs
//! in a Lévy market: solvency cones, the nonlocal HJB operator, Lyapunov
//! certificates, a monotone grid solver and a Monte Carlo policy simulator.

pub mod cone;
pub mod error;
pub mod grid;
pub mod levy;
pub mod linalg;
pub mod lyapunov;
pub mod operator;
pub mod rng;
pub mod sim;
pub mod solver;

pub use cone::{ConeConfig, ConeSpec, CostMatrix};
pub use error::{Error, Result};
pub use levy::{JumpAtom, LevyModel};
pub use operator::{Branch, ScalarField, UtilitySpec};
