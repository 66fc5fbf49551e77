//! Calculus of the gradient constraint sets: support functions, Euclidean
//! projections, and one computable generalized Jacobian per set, plus the
//! stacked proximal map over all n gradient blocks.
//!
//! Boundary tie-breaking picks the largest admissible Jacobian element:
//! mask entries are 1 exactly on the boundary, and the l2 sphere uses the
//! identity. This keeps Newton systems as well conditioned as possible.

use crate::problem::{NormKind, ShapeConstraint};
use crate::scalar::{cast, Real};

/// View of the constraint set acting on a single gradient block.
#[derive(Debug, Clone, Copy)]
pub enum BlockConstraint<'a, F> {
    Free,
    Monotone {
        increasing: &'a [usize],
        decreasing: &'a [usize],
    },
    Box {
        lower: &'a [F],
        upper: &'a [F],
    },
    Ball {
        q: NormKind,
        radius: F,
    },
}

impl<F: Real> ShapeConstraint<F> {
    /// The constraint set seen by gradient block i.
    pub fn block(&self, i: usize) -> BlockConstraint<'_, F> {
        match self {
            ShapeConstraint::NoShape => BlockConstraint::Free,
            ShapeConstraint::Monotone {
                increasing,
                decreasing,
            } => BlockConstraint::Monotone {
                increasing,
                decreasing,
            },
            ShapeConstraint::Box { lower, upper } => BlockConstraint::Box { lower, upper },
            ShapeConstraint::LipschitzBall { q, radius } => BlockConstraint::Ball {
                q: *q,
                radius: *radius,
            },
            ShapeConstraint::PerPointBall { q, radii } => BlockConstraint::Ball {
                q: *q,
                radius: radii[i],
            },
        }
    }
}

/// Support function `sup_{g in D} <x, g>`; may be infinite.
pub fn conjugate<F: Real>(block: &BlockConstraint<'_, F>, x: &[F]) -> F {
    match block {
        BlockConstraint::Free => {
            // Indicator of {0}.
            if x.iter().all(|&v| v == F::zero()) {
                F::zero()
            } else {
                F::infinity()
            }
        }
        BlockConstraint::Monotone {
            increasing,
            decreasing,
        } => {
            // Polar cone indicator: x must be <= 0 on increasing coords,
            // >= 0 on decreasing ones, and 0 on the rest.
            let mut class = vec![0i8; x.len()];
            for &t in *increasing {
                class[t] = 1;
            }
            for &t in *decreasing {
                class[t] = -1;
            }
            for (t, &v) in x.iter().enumerate() {
                let ok = match class[t] {
                    1 => v <= F::zero(),
                    -1 => v >= F::zero(),
                    _ => v == F::zero(),
                };
                if !ok {
                    return F::infinity();
                }
            }
            F::zero()
        }
        BlockConstraint::Box { lower, upper } => {
            let mut acc = F::zero();
            for (t, &v) in x.iter().enumerate() {
                if v > F::zero() {
                    if upper[t] == F::infinity() {
                        return F::infinity();
                    }
                    acc += upper[t] * v;
                } else if v < F::zero() {
                    if lower[t] == F::neg_infinity() {
                        return F::infinity();
                    }
                    acc += lower[t] * v;
                }
            }
            acc
        }
        BlockConstraint::Ball { q, radius } => *radius * q.conjugate().eval(x),
    }
}

/// Euclidean projection onto the block constraint set.
pub fn project<F: Real>(block: &BlockConstraint<'_, F>, x: &[F]) -> Vec<F> {
    match block {
        BlockConstraint::Free => x.to_vec(),
        BlockConstraint::Monotone {
            increasing,
            decreasing,
        } => {
            let mut y = x.to_vec();
            for &t in *increasing {
                if y[t] < F::zero() {
                    y[t] = F::zero();
                }
            }
            for &t in *decreasing {
                if y[t] > F::zero() {
                    y[t] = F::zero();
                }
            }
            y
        }
        BlockConstraint::Box { lower, upper } => x
            .iter()
            .enumerate()
            .map(|(t, &v)| v.max(lower[t]).min(upper[t]))
            .collect(),
        BlockConstraint::Ball { q, radius } => match q {
            NormKind::Inf => x
                .iter()
                .map(|&v| v.max(-*radius).min(*radius))
                .collect(),
            NormKind::Two => {
                let norm = crate::la::nrm2(x);
                if norm <= *radius {
                    x.to_vec()
                } else {
                    let s = *radius / norm;
                    x.iter().map(|&v| v * s).collect()
                }
            }
            NormKind::One => {
                let norm1: F = x.iter().map(|v| v.abs()).sum();
                if norm1 <= *radius {
                    x.to_vec()
                } else {
                    let folded: Vec<F> = x.iter().map(|v| v.abs() / *radius).collect();
                    let simplex = project_simplex(&folded);
                    x.iter()
                        .zip(&simplex)
                        .map(|(&v, &s)| sign(v) * s * *radius)
                        .collect()
                }
            }
        },
    }
}

/// Projection onto the unit simplex via sort-and-threshold, O(d log d).
pub fn project_simplex<F: Real>(x: &[F]) -> Vec<F> {
    let d = x.len();
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("non-finite simplex input"));
    let mut cumsum = F::zero();
    let mut tau = F::zero();
    let mut rho = 0;
    for (k, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let candidate = (cumsum - F::one()) / cast::<F>((k + 1) as f64);
        if v - candidate > F::zero() {
            rho = k + 1;
            tau = candidate;
        }
    }
    debug_assert!(rho > 0, "simplex projection needs at least one active coordinate");
    (0..d).map(|t| (x[t] - tau).max(F::zero())).collect()
}

/// One element of the Clarke generalized Jacobian of a block projection.
///
/// Every variant is a symmetric matrix with eigenvalues in [0, 1] and an
/// O(d) matrix-vector product.
#[derive(Debug, Clone, PartialEq)]
pub enum JacobianElement<F> {
    Identity,
    /// Diagonal 0/1 mask (monotone, box, and sup-norm ball cases).
    Diag(Vec<F>),
    /// `scale * I - coef * v v^T` (exterior of the l2 ball).
    Ball2 {
        scale: F,
        vec: Vec<F>,
        coef: F,
    },
    /// `P (Diag(r) - r r^T / nnz(r)) P` with `P = Diag(sign)` (exterior of
    /// the l1 ball).
    Ball1 {
        sign: Vec<F>,
        active: Vec<bool>,
    },
}

impl<F: Real> JacobianElement<F> {
    /// out = J * h
    pub fn matvec(&self, h: &[F], out: &mut [F]) {
        match self {
            JacobianElement::Identity => out.copy_from_slice(h),
            JacobianElement::Diag(u) => {
                for t in 0..h.len() {
                    out[t] = u[t] * h[t];
                }
            }
            JacobianElement::Ball2 { scale, vec, coef } => {
                let vh = crate::la::dot(vec, h);
                for t in 0..h.len() {
                    out[t] = *scale * h[t] - *coef * vec[t] * vh;
                }
            }
            JacobianElement::Ball1 { sign, active } => {
                let nnz = active.iter().filter(|&&a| a).count();
                debug_assert!(nnz > 0, "HS-Jacobian with empty active set");
                let nnz_f = cast::<F>(nnz as f64);
                let mut inner = F::zero();
                for t in 0..h.len() {
                    if active[t] {
                        inner += sign[t] * h[t];
                    }
                }
                let avg = inner / nnz_f;
                for t in 0..h.len() {
                    out[t] = if active[t] {
                        sign[t] * (sign[t] * h[t] - avg)
                    } else {
                        F::zero()
                    };
                }
            }
        }
    }

    /// J's diagonal entry t, used for preconditioning.
    pub fn diag_entry(&self, t: usize) -> F {
        match self {
            JacobianElement::Identity => F::one(),
            JacobianElement::Diag(u) => u[t],
            JacobianElement::Ball2 { scale, vec, coef } => *scale - *coef * vec[t] * vec[t],
            JacobianElement::Ball1 { active, .. } => {
                if active[t] {
                    let nnz = active.iter().filter(|&&a| a).count();
                    F::one() - F::one() / cast::<F>(nnz as f64)
                } else {
                    F::zero()
                }
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, JacobianElement::Identity)
    }

    /// Dense d x d materialization (test and small-system use).
    pub fn dense(&self, d: usize) -> Vec<F> {
        let mut m = vec![F::zero(); d * d];
        let mut e = vec![F::zero(); d];
        let mut col = vec![F::zero(); d];
        for c in 0..d {
            e[c] = F::one();
            self.matvec(&e, &mut col);
            for r in 0..d {
                m[r * d + c] = col[r];
            }
            e[c] = F::zero();
        }
        m
    }
}

/// Selects the generalized Jacobian element of `project` at `x` under the
/// boundary conventions documented at module level.
pub fn jacobian_element<F: Real>(block: &BlockConstraint<'_, F>, x: &[F]) -> JacobianElement<F> {
    match block {
        BlockConstraint::Free => JacobianElement::Identity,
        BlockConstraint::Monotone {
            increasing,
            decreasing,
        } => {
            let mut u = vec![F::one(); x.len()];
            for &t in *increasing {
                if x[t] < F::zero() {
                    u[t] = F::zero();
                }
            }
            for &t in *decreasing {
                if x[t] > F::zero() {
                    u[t] = F::zero();
                }
            }
            JacobianElement::Diag(u)
        }
        BlockConstraint::Box { lower, upper } => {
            let u = x
                .iter()
                .enumerate()
                .map(|(t, &v)| {
                    if v < lower[t] || v > upper[t] {
                        F::zero()
                    } else {
                        F::one()
                    }
                })
                .collect();
            JacobianElement::Diag(u)
        }
        BlockConstraint::Ball { q, radius } => match q {
            NormKind::Inf => {
                let u = x
                    .iter()
                    .map(|&v| if v.abs() > *radius { F::zero() } else { F::one() })
                    .collect();
                JacobianElement::Diag(u)
            }
            NormKind::Two => {
                let norm = crate::la::nrm2(x);
                if norm <= *radius {
                    JacobianElement::Identity
                } else {
                    let scale = *radius / norm;
                    let coef = *radius / (norm * norm * norm);
                    JacobianElement::Ball2 {
                        scale,
                        vec: x.to_vec(),
                        coef,
                    }
                }
            }
            NormKind::One => {
                let norm1: F = x.iter().map(|v| v.abs()).sum();
                if norm1 <= *radius {
                    JacobianElement::Identity
                } else {
                    let folded: Vec<F> = x.iter().map(|v| v.abs() / *radius).collect();
                    let simplex = project_simplex(&folded);
                    let active: Vec<bool> = simplex.iter().map(|&s| s != F::zero()).collect();
                    let sign: Vec<F> = x.iter().map(|&v| sign(v)).collect();
                    JacobianElement::Ball1 { sign, active }
                }
            }
        },
    }
}

/// Stacked proximal map of `p(xi) = sum_i indicator(xi_i in D_i)`: projects
/// every gradient block and returns the block Jacobians alongside.
pub fn prox_p<F: Real>(
    shape: &ShapeConstraint<F>,
    xi: &[F],
    n: usize,
    d: usize,
) -> (Vec<F>, Vec<JacobianElement<F>>) {
    debug_assert_eq!(xi.len(), n * d);
    let mut out = Vec::with_capacity(n * d);
    let mut jacs = Vec::with_capacity(n);
    for i in 0..n {
        let block = shape.block(i);
        let xi_i = &xi[i * d..(i + 1) * d];
        out.extend(project(&block, xi_i));
        jacs.push(jacobian_element(&block, xi_i));
    }
    (out, jacs)
}

/// Projects every gradient block without forming Jacobians.
pub fn project_blocks<F: Real>(shape: &ShapeConstraint<F>, xi: &[F], n: usize, d: usize) -> Vec<F> {
    debug_assert_eq!(xi.len(), n * d);
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        out.extend(project(&shape.block(i), &xi[i * d..(i + 1) * d]));
    }
    out
}

/// Squared distance of each block to its constraint set, summed.
pub fn dist2_blocks<F: Real>(shape: &ShapeConstraint<F>, xi: &[F], n: usize, d: usize) -> F {
    let mut acc = F::zero();
    for i in 0..n {
        let xi_i = &xi[i * d..(i + 1) * d];
        let p = project(&shape.block(i), xi_i);
        for t in 0..d {
            let r = xi_i[t] - p[t];
            acc += r * r;
        }
    }
    acc
}

#[inline]
fn sign<F: Real>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}
