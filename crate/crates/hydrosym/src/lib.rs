//! Symbolic-numeric toolkit for diagonal hydrodynamic-type systems:
//! geometric integrability tests (Tsarev conditions, curvature), hydrodynamic
//! and higher symmetries, reduced recursion operators, and generation plus
//! independent verification of exact solutions through (generalized)
//! hodograph transformations.
//!
//! The crate is organized around the workflow
//!
//! 1. define a diagonal system `u^i_t = v_i(u) u^i_x` ([`system`]),
//! 2. check its geometry ([`geometry`]),
//! 3. build symmetry coefficient vectors and recursion chains ([`symmetry`],
//!    [`gasdyn`], [`separable`]),
//! 4. turn them into implicit solution systems, solve on grids, and verify
//!    the PDE residual independently ([`hodograph`]).
//!
//! Runnable walkthroughs live in `examples/`; the `hydrosym` binary exposes
//! the same pipeline for batch configs.

pub mod cli;
pub mod expr;
pub mod gasdyn;
pub mod geometry;
pub mod hodograph;
pub mod numeric;
pub mod separable;
pub mod symmetry;
pub mod system;

pub use system::{CoefficientVector, Dependence, DiagonalSystem, JetPoint, ScalarField};
