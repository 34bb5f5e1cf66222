//! Monotone finite-difference solver for the penalized equation
//! `∂_t v + max(H[v], P[v] − K) = 0` on stencil grids, with the a priori
//! estimate harness used to study its `K`- and `h`-behavior.

pub mod data;
pub mod error;
pub mod estimates;
pub mod exec;
pub mod grid;
pub mod hamiltonian;
pub mod pucci;
pub mod reference;
pub mod solver;
pub mod stencil;

pub use error::{Error, Result};
