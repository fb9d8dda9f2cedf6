//! Hamiltonian dynamics of two qubits on the projective state space CP³.
//!
//! The crate covers the unconstrained geometric flow (equivalent to the
//! Schrödinger equation), the flow constrained to the separable quadric
//! CP¹×CP¹ by Lagrange multipliers, chaos diagnostics for the constrained
//! system, and a quantum-state-diffusion unraveling with a
//! separability-driving Lindblad operator.

// Negated comparisons are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chaos;
pub mod constraints;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod observables;
pub mod ode;
pub mod qsd;
pub mod roots;
pub mod verify;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
