//! Constrained Stein variational trajectory optimization.
//!
//! A set of trajectory particles is moved by a Stein variational update
//! restricted to the tangent space of the (slack-augmented) constraint
//! manifold, plus a Gauss-Newton step back toward feasibility. A receding
//! horizon driver warm-starts, shifts, and resamples the particle set.

pub mod benchmarks;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod kernel;
pub mod mpc;
pub mod mppi;
pub mod problem;
pub mod solver;

pub use error::{Error, Result};
pub use problem::{
    AugmentedParticle, Bounds, ConstraintBundle, Constraint, Cost, Dynamics, GaussianControlPrior,
    HessianFallback, LocalHessian, ProblemDef, TrajectoryLayout, TrajectoryParticle,
};
