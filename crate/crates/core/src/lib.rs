//! Expectation-value variational method for the soft-constraint O(N)
//! nonlinear sigma model.
//!
//! The ground state is characterised entirely through the two-point
//! expectation kernels `A(k,k')` and `B(k,k')` of a Fock state. The modules
//! build up from momentum grids to the constrained solver:
//!
//! - [`lattice`]: uniform momentum grids and the free dispersion.
//! - [`kernel`]: hermitian kernel algebra and the `1 + A ⪰ √(1 + B²)` test.
//! - [`fock`]: truncated Fock-space oracle (kernel measurement, kernel to
//!   state construction, brute-force constrained ground states).
//! - [`solver`]: augmented-Lagrangian solver on a grid.
//! - [`gap`]: continuum gap equation, critical radius and phase sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod fock;
pub mod gap;
pub mod kernel;
pub mod lattice;
pub mod numerics;
pub mod solver;

pub use fock::{FockBasis, FockState, Species};
pub use gap::{GapModel, GapSolution, Phase};
pub use kernel::{HermitianKernel, PsdCheck};
pub use lattice::{build_grid, dispersion, Dispersion, MomentumGrid};
pub use nalgebra::DMatrix;
pub use num_complex::Complex64;
pub use solver::{SolverOptions, VariationalProblem, VariationalSolution};
