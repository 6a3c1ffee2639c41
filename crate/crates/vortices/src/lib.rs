//! Abelian symplectic vortex equations on discretized flat tori.
//!
//! The crate solves and verifies the first-order system
//!
//!   dbar_A z = 0,        lambda^-2 fhat + eps^-2 muhat(z) = 0
//!
//! for linear torus actions on C^N, together with the exact energy
//! decomposition, the compactness bound, index arithmetic, adiabatic
//! continuation, Mobius balancing on the sphere, and the finite-dimensional
//! equivariant gradient flow.  Sign and identification conventions are
//! collected in `docs/conventions.md` at the workspace root.

pub mod error;
pub mod eqflow;
pub mod field;
pub mod geometry;
pub mod linop;
pub mod mobius;
pub mod snapshot;
pub mod solver;
pub mod sum;
pub mod target;
pub mod vortex;

pub use error::{Result, VortexError};
