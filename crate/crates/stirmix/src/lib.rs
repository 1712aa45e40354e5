//! Boundary-driven stirring of a passive scalar in unsteady Stokes flow on
//! the unit disk.
//!
//! The crate covers the full pipeline:
//! - [`mesh`]: structured disk triangulation with exact boundary frames;
//! - [`quadrature`]: fixed triangle and segment rules;
//! - [`stokes`]: unsteady Stokes solver with a friction-type slip boundary
//!   condition driven by tangential forcing, second-order time stepping, and
//!   a pressure-correction sub-iteration;
//! - [`transport`]: discontinuous-Galerkin advection of a scalar by the
//!   computed velocity, forward or backward in time;
//! - [`mixnorm`]: the negative-order Sobolev mixing norm, the objective
//!   functional, and a transport duality diagnostic;
//! - [`control`]: tangential boundary control bases, their Gram geometry,
//!   and two gradient evaluations of the objective;
//! - [`optimizer`]: gradient descent with backtracking line search, with
//!   checkpointing and a coarse-to-fine relay;
//! - [`validation`]: manufactured-solution and benchmark harnesses.

pub mod control;
pub mod error;
pub mod mesh;
pub mod mixnorm;
pub mod optimizer;
pub mod quadrature;
pub mod shape;
pub mod sparse;
pub mod stokes;
pub mod transport;
pub mod validation;

pub use error::{Error, Result};
