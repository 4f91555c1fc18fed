//! Minimum-KL ("I-projection") of a discrete reference distribution onto sets
//! defined by families of moment inequalities.
//!
//! The moment families may be uncountable (first-order stochastic dominance
//! over an interval, conditional dominance with hypercube instruments, a
//! marginal order against a given CDF). The projection is computed through
//! its exponential dual: the family is partitioned into cells of small
//! `L1(Q)` diameter, one representative is kept per cell, and the resulting
//! finite convex program over the nonnegative orthant is solved. Refining the
//! partition along a decreasing accuracy schedule drives the finite-program
//! value to the dual optimum.
//!
//! Module map:
//!
//! - [`measure`]: discrete measures, densities, integrals, KL divergence.
//! - [`moments`]: moment-function families and their index grids.
//! - [`partition`]: accuracy-certified partitions and representative selection.
//! - [`dualsolver`]: the finite exponential program and its solver.
//! - [`driver`]: the refinement schedule, assumption diagnostics, verification.
//! - [`oracle`]: independent reference solvers (Bregman-Dykstra, PAVA, cyclic descent).
//! - [`io`]: CSV/JSON formats shared by the CLI and bindings.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod driver;
pub mod dualsolver;
pub mod error;
pub mod io;
pub mod measure;
pub mod moments;
pub mod numeric;
pub mod oracle;
pub mod partition;
pub mod synth;

pub use driver::{
    check_assumptions, coercivity_bound_check, project, verify_constraints, AssumptionReport,
    ProjectOptions, ProjectionResult, StageRecord,
};
pub use dualsolver::{
    density_from_dual, duality_gap, gradient, objective, solve_finite_program, DualSolution,
    SolverConfig, SolverStatus,
};
pub use error::{Error, Result};
pub use measure::{integrate, kl_divergence, l1_distance, DensityVector, DiscreteMeasure};
pub use moments::{Cdf, CubeIndex, FamilyKind, Gamma, MomentFamily, MomentIndex, StepCdf, TailConfig};
pub use partition::{Cell, Partition};
