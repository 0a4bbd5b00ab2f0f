//! Feedback-synthesis workbench for nonlinear control systems.
//!
//! The crate builds stabilizing feedback laws from control-Lyapunov
//! functions (smooth universal formula, pointwise argmin, proximal aiming
//! through a Moreau envelope), simulates the resulting closed loops under
//! sample-and-hold semantics with measurement error and disturbances, tests
//! necessary conditions for continuous stabilizability, and checks
//! ISS/iISS-style decay estimates against simulated trajectory bundles.
//!
//! Everything is deterministic: random generators are seeded explicitly,
//! argmin ties are broken by a fixed rule, and reports are assembled in
//! index order, so identical inputs produce identical artifacts.

pub mod cli;
pub mod clf;
pub mod comparison;
pub mod error;
pub mod iss;
pub mod nonsmooth;
pub mod obstructions;
pub mod sim;
pub mod systems;
pub mod vecn;

pub use error::{Error, Result};
