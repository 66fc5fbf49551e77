//! Shape-constrained convex regression.
//!
//! Fits the least squares max-affine estimator subject to monotonicity,
//! gradient box bounds, or Lipschitz-ball constraints by solving the
//! coupled quadratic program over intercepts and per-point gradients.
//! Three engines are provided: a proximal augmented Lagrangian method with
//! semismooth Newton subproblem solves, a symmetric Gauss-Seidel ADMM
//! baseline, and a constraint generation accelerator for large sample
//! counts. Application drivers cover option pricing oracles and synthetic
//! benchmarks.

pub mod la;
pub mod problem;
pub mod proxalm;
pub mod scalar;
pub mod shape;
pub mod ssn;
pub mod testing;
pub mod trace;

pub use problem::{
    linear_index, pair_from_index, standardize, ActiveSet, Dataset, NormKind, ProblemError,
    ProblemInstance, RowSet, ShapeConstraint, StandardizationRecord,
};
pub use scalar::Real;
pub use shape::{conjugate, jacobian_element, project, project_simplex, prox_p, JacobianElement};

/// Default working scalar for the pipeline-facing API.
pub type Scalar = f64;
