//! Quantum cellular automata on finite configurations.
//!
//! The crate models QCA dynamics on the lattice ℤⁿ restricted to finitely
//! supported configurations, in both pictures:
//!
//! * **Schrödinger picture** ([`evolution`]): sparse state vectors evolved by
//!   lattice-gas automata (propagation + collision) or partitioned unitary
//!   circuits.
//! * **Heisenberg picture** ([`heisenberg`]): local-rule *-automorphisms of
//!   the quasi-local algebra, given by their images on one cell's matrix
//!   units, with validation (homomorphism, translation invariance, causality,
//!   structural reversibility).
//!
//! On top of those sits [`structure`]: given only a local rule, decide
//! whether the automaton is a lattice gas in disguise and, if so, recover the
//! hidden sub-cell factorization and collision operator, plus a finite-window
//! intertwiner tying the two pictures together.
//!
//! The crate is `no_std` (with `alloc`); IO and file formats live in the
//! companion CLI crate.

#![cfg_attr(not(test), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod cmat;
pub mod error;
pub mod evolution;
pub mod heisenberg;
pub mod lattice;
pub mod operators;
pub mod rng;
pub mod samples;
pub mod structure;
pub mod tensor;
pub mod tol;

pub use cmat::CMatrix;
pub use error::{Error, Result};
pub use tol::Tolerances;
