//! Small dense vector kernels and a Jacobi-preconditioned conjugate gradient
//! solver shared by the Newton and ADMM subproblem solves.

use crate::scalar::{cast, Real};

#[inline]
pub fn dot<F: Real>(x: &[F], y: &[F]) -> F {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(&a, &b)| a * b).sum()
}

#[inline]
pub fn nrm2<F: Real>(x: &[F]) -> F {
    dot(x, x).sqrt()
}

#[inline]
pub fn axpy<F: Real>(a: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn scale<F: Real>(a: F, x: &mut [F]) {
    for xi in x.iter_mut() {
        *xi *= a;
    }
}

/// z = x - y
#[inline]
pub fn sub<F: Real>(x: &[F], y: &[F], z: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    debug_assert_eq!(x.len(), z.len());
    for ((zi, &xi), &yi) in z.iter_mut().zip(x).zip(y) {
        *zi = xi - yi;
    }
}

#[inline]
pub fn dist2<F: Real>(x: &[F], y: &[F]) -> F {
    debug_assert_eq!(x.len(), y.len());
    x.iter()
        .zip(y)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<F>()
        .sqrt()
}

/// Outcome of a conjugate gradient solve.
pub struct CgResult<F> {
    pub iterations: usize,
    pub residual_norm: F,
    pub converged: bool,
}

/// Jacobi-preconditioned CG for a symmetric positive definite operator.
///
/// `apply` computes `out = H * x`; `diag` is the operator diagonal. The
/// iteration stops when the true-residual norm drops below `tol` (absolute)
/// or `max_iters` is reached; `x` holds the best iterate either way.
pub fn pcg<F: Real>(
    apply: impl Fn(&[F], &mut [F]),
    diag: &[F],
    rhs: &[F],
    x: &mut [F],
    tol: F,
    max_iters: usize,
) -> CgResult<F> {
    let m = rhs.len();
    let mut r = vec![F::zero(); m];
    let mut hx = vec![F::zero(); m];
    apply(x, &mut hx);
    for i in 0..m {
        r[i] = rhs[i] - hx[i];
    }
    let inv_diag: Vec<F> = diag
        .iter()
        .map(|&d| if d > F::zero() { F::one() / d } else { F::one() })
        .collect();

    let mut z: Vec<F> = r.iter().zip(&inv_diag).map(|(&ri, &mi)| ri * mi).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut res = nrm2(&r);
    if res <= tol {
        return CgResult {
            iterations: 0,
            residual_norm: res,
            converged: true,
        };
    }

    let mut hp = vec![F::zero(); m];
    for it in 1..=max_iters {
        apply(&p, &mut hp);
        let php = dot(&p, &hp);
        if php <= F::zero() {
            // Indefinite curvature should not happen for our regularized
            // operators; bail out with the current iterate.
            return CgResult {
                iterations: it,
                residual_norm: res,
                converged: false,
            };
        }
        let alpha = rz / php;
        axpy(alpha, &p, x);
        axpy(-alpha, &hp, &mut r);
        res = nrm2(&r);
        if res <= tol {
            return CgResult {
                iterations: it,
                residual_norm: res,
                converged: true,
            };
        }
        for i in 0..m {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..m {
            p[i] = z[i] + beta * p[i];
        }
    }
    CgResult {
        iterations: max_iters,
        residual_norm: res,
        converged: false,
    }
}

/// Solves `H x = rhs` for dense symmetric positive definite `H` (row-major,
/// `m x m`) via Cholesky in f64.
pub fn solve_spd_dense<F: Real>(h: &[F], rhs: &[F], m: usize) -> Option<Vec<F>> {
    debug_assert_eq!(h.len(), m * m);
    debug_assert_eq!(rhs.len(), m);
    let a = nalgebra::DMatrix::<f64>::from_fn(m, m, |r, c| h[r * m + c].to_f64().unwrap());
    let b = nalgebra::DVector::<f64>::from_fn(m, |r, _| rhs[r].to_f64().unwrap());
    let chol = nalgebra::Cholesky::new(a)?;
    let x = chol.solve(&b);
    Some(x.iter().map(|&v| cast(v)).collect())
}
