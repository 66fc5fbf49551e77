//! Semismooth Newton solver for the augmented Lagrangian subproblems.
//!
//! The subproblem objective couples the least squares term, two Moreau
//! envelopes (one over the constraint rows, one over the gradient blocks),
//! and proximal terms around the outer-iteration center. Its generalized
//! Hessian inherits a 0-1 active-row mask: only rows whose shifted slack
//! is negative contribute, which collapses the n^2-row quadratic term into
//! per-block products of size d. Newton systems are solved directly when
//! small and by Jacobi-preconditioned CG otherwise.

use thiserror::Error;

use crate::la;
use crate::problem::{ActiveSet, ProblemInstance};
use crate::scalar::{cast, Real};
use crate::shape::{prox_p, JacobianElement};

#[derive(Debug, Error)]
pub enum SsnError {
    #[error("line search failed after {tried} backtracks (gradient/Hessian inconsistency)")]
    LineSearchFailed { tried: usize },
    #[error("semismooth Newton iteration cap {cap} reached (last gradient norm {grad_norm})")]
    IterationCap { cap: usize, grad_norm: f64 },
}

/// Tunables of the inner Newton solver. The line-search and residual
/// constants are fixed choices within the admissible ranges.
#[derive(Debug, Clone)]
pub struct SsnConfig {
    /// Residual cap `gamma_bar` for the Newton system.
    pub gamma_bar: f64,
    /// Residual exponent: `||R|| <= min(gamma_bar, ||grad||^(1+tau))`.
    pub tau: f64,
    /// Armijo slope fraction.
    pub armijo_mu: f64,
    /// Backtracking factor.
    pub armijo_delta: f64,
    /// Maximum backtracks before declaring failure.
    pub max_backtracks: usize,
    /// Newton iteration cap.
    pub max_iterations: usize,
    /// Systems up to this many unknowns are solved by dense factorization.
    pub direct_threshold: usize,
}

impl Default for SsnConfig {
    fn default() -> Self {
        Self {
            gamma_bar: 0.1,
            tau: 0.2,
            armijo_mu: 0.2,
            armijo_delta: 0.5,
            max_backtracks: 50,
            max_iterations: 100,
            direct_threshold: 2000,
        }
    }
}

/// Everything one subproblem needs: the instance, the active rows, the
/// proximal center, the multiplier estimates, and the penalty parameters.
///
/// `u_tilde` is indexed by row id when the active set is full, and by
/// position within the row set otherwise.
pub struct SubproblemContext<'a, F> {
    pub instance: &'a ProblemInstance<F>,
    pub active: &'a ActiveSet,
    pub theta_center: &'a [F],
    pub xi_center: &'a [F],
    pub u_tilde: &'a [F],
    pub v_tilde: &'a [F],
    pub sigma: F,
    pub h1: F,
    pub h2: F,
}

/// Complement mask of the row projection's Jacobian: the rows whose
/// shifted slack is strictly negative, grouped per block.
#[derive(Debug, Clone)]
pub struct ActiveMask {
    pub viol_by_block: Vec<Vec<u32>>,
    pub nnz: usize,
}

/// Result of one subproblem solve.
pub struct SsnOutcome<F> {
    pub theta: Vec<F>,
    pub xi: Vec<F>,
    pub iterations: usize,
    pub grad_norm: F,
    /// Gradient norms observed at each iteration (incl. the accepted point).
    pub grad_trace: Vec<F>,
    /// Set when a Newton system exhausted its CG budget.
    pub degraded: bool,
}

impl<'a, F: Real> SubproblemContext<'a, F> {
    #[inline]
    fn n(&self) -> usize {
        self.instance.len()
    }

    #[inline]
    fn d(&self) -> usize {
        self.instance.dim()
    }

    /// Streams every active row: `f(pos, i, j, z)` with
    /// `z = (A theta + B xi)_row - u_tilde[pos] / sigma`.
    fn for_each_shifted_row(&self, theta: &[F], xi: &[F], mut f: impl FnMut(usize, usize, usize, F)) {
        let n = self.n();
        let d = self.d();
        let inv_sigma = F::one() / self.sigma;
        let data = self.instance.dataset();
        match self.active {
            ActiveSet::Full => {
                for i in 0..n {
                    let xi_i = &xi[i * d..(i + 1) * d];
                    let x_i = data.point(i);
                    let base = la::dot(xi_i, x_i) - theta[i];
                    let row0 = i * n;
                    for j in 0..n {
                        let slack = base + theta[j] - la::dot(xi_i, data.point(j));
                        let pos = row0 + j;
                        f(pos, i, j, slack - self.u_tilde[pos] * inv_sigma);
                    }
                }
            }
            ActiveSet::Reduced(rs) => {
                for i in 0..n {
                    let cols = rs.block(i);
                    if cols.is_empty() {
                        continue;
                    }
                    let xi_i = &xi[i * d..(i + 1) * d];
                    let x_i = data.point(i);
                    let base = la::dot(xi_i, x_i) - theta[i];
                    let mut pos = rs.block_ptr[i];
                    for &jc in cols {
                        let j = jc as usize;
                        let slack = base + theta[j] - la::dot(xi_i, data.point(j));
                        f(pos, i, j, slack - self.u_tilde[pos] * inv_sigma);
                        pos += 1;
                    }
                }
            }
        }
    }

    /// Subproblem objective value.
    pub fn phi(&self, theta: &[F], xi: &[F]) -> F {
        let half = cast::<F>(0.5);
        let y = self.instance.dataset().responses();
        let mut val = half * theta.iter().zip(y).map(|(&t, &yi)| (t - yi) * (t - yi)).sum::<F>();

        let mut row_acc = F::zero();
        self.for_each_shifted_row(theta, xi, |_, _, _, z| {
            if z < F::zero() {
                row_acc += z * z;
            }
        });
        val += half * self.sigma * row_acc;

        let (n, d) = (self.n(), self.d());
        let inv_sigma = F::one() / self.sigma;
        let w: Vec<F> = xi
            .iter()
            .zip(self.v_tilde)
            .map(|(&x, &v)| x - v * inv_sigma)
            .collect();
        val += half * self.sigma * crate::shape::dist2_blocks(self.instance.shape(), &w, n, d);

        let u_sq: F = self.u_tilde.iter().map(|&u| u * u).sum();
        let v_sq: F = self.v_tilde.iter().map(|&v| v * v).sum();
        val -= half * inv_sigma * (u_sq + v_sq);

        let c1 = half * self.h1 * inv_sigma;
        let c2 = half * self.h2 * inv_sigma;
        val += c1
            * theta
                .iter()
                .zip(self.theta_center)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<F>();
        val += c2
            * xi.iter()
                .zip(self.xi_center)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<F>();
        val
    }

    /// Objective and gradient; the gradient is `(theta part, xi part)`
    /// concatenated, length n + d*n.
    pub fn phi_and_grad(&self, theta: &[F], xi: &[F]) -> (F, Vec<F>) {
        let (n, d) = (self.n(), self.d());
        let half = cast::<F>(0.5);
        let inv_sigma = F::one() / self.sigma;
        let sigma = self.sigma;
        let data = self.instance.dataset();
        let y = data.responses();

        let mut grad = vec![F::zero(); n + d * n];
        let mut val = half * theta.iter().zip(y).map(|(&t, &yi)| (t - yi) * (t - yi)).sum::<F>();

        // Row penalty: only rows with negative shifted slack contribute.
        {
            let (gt, gx) = grad.split_at_mut(n);
            let mut row_acc = F::zero();
            self.for_each_shifted_row(theta, xi, |_, i, j, z| {
                if z < F::zero() {
                    row_acc += z * z;
                    let w = sigma * z;
                    gt[j] += w;
                    gt[i] -= w;
                    let x_i = data.point(i);
                    let x_j = data.point(j);
                    let block = &mut gx[i * d..(i + 1) * d];
                    for t in 0..d {
                        block[t] += w * (x_i[t] - x_j[t]);
                    }
                }
            });
            val += half * sigma * row_acc;
        }

        // Gradient-block envelope.
        let w: Vec<F> = xi
            .iter()
            .zip(self.v_tilde)
            .map(|(&x, &v)| x - v * inv_sigma)
            .collect();
        let proj = crate::shape::project_blocks(self.instance.shape(), &w, n, d);
        let mut prox_acc = F::zero();
        for t in 0..d * n {
            let r = w[t] - proj[t];
            prox_acc += r * r;
            grad[n + t] += sigma * r;
        }
        val += half * sigma * prox_acc;

        let u_sq: F = self.u_tilde.iter().map(|&u| u * u).sum();
        let v_sq: F = self.v_tilde.iter().map(|&v| v * v).sum();
        val -= half * inv_sigma * (u_sq + v_sq);

        // Least squares and proximal-center terms.
        let c1 = self.h1 * inv_sigma;
        let c2 = self.h2 * inv_sigma;
        for t in 0..n {
            grad[t] += theta[t] - y[t] + c1 * (theta[t] - self.theta_center[t]);
            let dc = theta[t] - self.theta_center[t];
            val += half * c1 * dc * dc;
        }
        for t in 0..d * n {
            grad[n + t] += c2 * (xi[t] - self.xi_center[t]);
            let dc = xi[t] - self.xi_center[t];
            val += half * c2 * dc * dc;
        }
        (val, grad)
    }

    /// Rows with negative shifted slack (the boundary `z = 0` carries mask
    /// value 0, matching the `>= 0` convention of the row projection's
    /// Jacobian element). Diagonal rows are excluded: their operator row
    /// is identically zero.
    pub fn active_mask(&self, theta: &[F], xi: &[F]) -> ActiveMask {
        let n = self.n();
        let mut viol_by_block: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut nnz = 0usize;
        self.for_each_shifted_row(theta, xi, |_, i, j, z| {
            if z < F::zero() && i != j {
                viol_by_block[i].push(j as u32);
                nnz += 1;
            }
        });
        ActiveMask { viol_by_block, nnz }
    }

    /// Jacobian blocks of the gradient-block proximal map at the current
    /// point.
    pub fn prox_jacobians(&self, xi: &[F]) -> Vec<JacobianElement<F>> {
        let (n, d) = (self.n(), self.d());
        let inv_sigma = F::one() / self.sigma;
        let w: Vec<F> = xi
            .iter()
            .zip(self.v_tilde)
            .map(|(&x, &v)| x - v * inv_sigma)
            .collect();
        prox_p(self.instance.shape(), &w, n, d).1
    }

    /// Generalized-Hessian action: `out = H dir` with
    /// `H = sigma [A;B]^T Diag(mask) [A B] + Diag(I + H1/sigma, sigma (I - Q) + H2/sigma)`.
    ///
    /// Cost O(nnz(mask) * d + n * d); no n^2 intermediates.
    pub fn hessian_matvec(
        &self,
        mask: &ActiveMask,
        jacs: &[JacobianElement<F>],
        dir: &[F],
        out: &mut [F],
    ) {
        let (n, d) = (self.n(), self.d());
        debug_assert_eq!(dir.len(), n + d * n);
        debug_assert_eq!(out.len(), n + d * n);
        let sigma = self.sigma;
        let inv_sigma = F::one() / sigma;
        let data = self.instance.dataset();

        for o in out.iter_mut() {
            *o = F::zero();
        }
        let (dt, dx) = dir.split_at(n);
        {
            let (ot, ox) = out.split_at_mut(n);
            for i in 0..n {
                let cols = &mask.viol_by_block[i];
                if cols.is_empty() {
                    continue;
                }
                let dx_i = &dx[i * d..(i + 1) * d];
                let x_i = data.point(i);
                let base = la::dot(dx_i, x_i) - dt[i];
                for &jc in cols {
                    let j = jc as usize;
                    let x_j = data.point(j);
                    // Row value of [A B] applied to dir.
                    let t_val = base + dt[j] - la::dot(dx_i, x_j);
                    let w = sigma * t_val;
                    ot[j] += w;
                    ot[i] -= w;
                    let block = &mut ox[i * d..(i + 1) * d];
                    for t in 0..d {
                        block[t] += w * (x_i[t] - x_j[t]);
                    }
                }
            }
        }

        // Diagonal second summand.
        let c1 = F::one() + self.h1 * inv_sigma;
        for t in 0..n {
            out[t] += c1 * dt[t];
        }
        let c2 = self.h2 * inv_sigma;
        let mut qd = vec![F::zero(); d];
        for i in 0..n {
            let dx_i = &dx[i * d..(i + 1) * d];
            let block = &mut out[n + i * d..n + (i + 1) * d];
            if jacs[i].is_identity() {
                for t in 0..d {
                    block[t] += c2 * dx_i[t];
                }
            } else {
                jacs[i].matvec(dx_i, &mut qd);
                for t in 0..d {
                    block[t] += sigma * (dx_i[t] - qd[t]) + c2 * dx_i[t];
                }
            }
        }
    }

    /// Diagonal of the generalized Hessian, for Jacobi preconditioning.
    pub fn hessian_diag(&self, mask: &ActiveMask, jacs: &[JacobianElement<F>]) -> Vec<F> {
        let (n, d) = (self.n(), self.d());
        let sigma = self.sigma;
        let inv_sigma = F::one() / sigma;
        let data = self.instance.dataset();
        let mut diag = vec![F::zero(); n + d * n];
        for i in 0..n {
            let x_i = data.point(i);
            for &jc in &mask.viol_by_block[i] {
                let j = jc as usize;
                diag[j] += sigma;
                diag[i] += sigma;
                let x_j = data.point(j);
                let block = &mut diag[n + i * d..n + (i + 1) * d];
                for t in 0..d {
                    let dxt = x_i[t] - x_j[t];
                    block[t] += sigma * dxt * dxt;
                }
            }
        }
        let c1 = F::one() + self.h1 * inv_sigma;
        for t in 0..n {
            diag[t] += c1;
        }
        let c2 = self.h2 * inv_sigma;
        for i in 0..n {
            let block = &mut diag[n + i * d..n + (i + 1) * d];
            for t in 0..d {
                block[t] += sigma * (F::one() - jacs[i].diag_entry(t)) + c2;
            }
        }
        diag
    }

    /// Dense row-major materialization of the generalized Hessian, built
    /// from the per-block formulas (direct-solve path and tests).
    pub fn assemble_dense(&self, mask: &ActiveMask, jacs: &[JacobianElement<F>]) -> Vec<F> {
        let (n, d) = (self.n(), self.d());
        let m = n + d * n;
        let sigma = self.sigma;
        let inv_sigma = F::one() / sigma;
        let data = self.instance.dataset();
        let mut h = vec![F::zero(); m * m];

        let mut diff = vec![F::zero(); d];
        for i in 0..n {
            let x_i = data.point(i);
            for &jc in &mask.viol_by_block[i] {
                let j = jc as usize;
                let x_j = data.point(j);
                for t in 0..d {
                    diff[t] = x_i[t] - x_j[t];
                }
                // Rank-one term sigma * v v^T with v supported on
                // theta_j (+1), theta_i (-1) and xi block i (diff).
                h[j * m + j] += sigma;
                h[i * m + i] += sigma;
                h[j * m + i] -= sigma;
                h[i * m + j] -= sigma;
                for t in 0..d {
                    let c = n + i * d + t;
                    let w = sigma * diff[t];
                    h[j * m + c] += w;
                    h[c * m + j] += w;
                    h[i * m + c] -= w;
                    h[c * m + i] -= w;
                    for s in 0..d {
                        h[c * m + n + i * d + s] += sigma * diff[t] * diff[s];
                    }
                }
            }
        }

        let c1 = F::one() + self.h1 * inv_sigma;
        for t in 0..n {
            h[t * m + t] += c1;
        }
        let c2 = self.h2 * inv_sigma;
        for i in 0..n {
            let q = jacs[i].dense(d);
            for t in 0..d {
                for s in 0..d {
                    let r = n + i * d + t;
                    let c = n + i * d + s;
                    let iq = if t == s { F::one() } else { F::zero() };
                    h[r * m + c] += sigma * (iq - q[t * d + s]);
                }
            }
            for t in 0..d {
                let r = n + i * d + t;
                h[r * m + r] += c2;
            }
        }
        h
    }

    /// Inexact Newton direction with the residual contract
    /// `||H delta + grad|| <= min(gamma_bar, ||grad||^(1+tau))`.
    ///
    /// Returns `(direction, residual_norm, degraded)`.
    pub fn newton_direction(
        &self,
        grad: &[F],
        mask: &ActiveMask,
        jacs: &[JacobianElement<F>],
        cfg: &SsnConfig,
    ) -> (Vec<F>, F, bool) {
        let m = grad.len();
        let gnorm = la::nrm2(grad);
        let tol = cast::<F>(cfg.gamma_bar).min(gnorm.powf(F::one() + cast(cfg.tau)));
        let rhs: Vec<F> = grad.iter().map(|&g| -g).collect();

        if m <= cfg.direct_threshold {
            let h = self.assemble_dense(mask, jacs);
            if let Some(delta) = la::solve_spd_dense(&h, &rhs, m) {
                let mut r = vec![F::zero(); m];
                self.hessian_matvec(mask, jacs, &delta, &mut r);
                for t in 0..m {
                    r[t] += grad[t];
                }
                let res = la::nrm2(&r);
                return (delta, res, false);
            }
            // Factorization failure falls through to CG.
        }

        let mut delta = vec![F::zero(); m];
        let diag = self.hessian_diag(mask, jacs);
        let out = la::pcg(
            |v: &[F], out: &mut [F]| self.hessian_matvec(mask, jacs, v, out),
            &diag,
            &rhs,
            &mut delta,
            tol,
            10 * m,
        );
        (delta, out.residual_norm, !out.converged)
    }

    /// Backtracking line search: the smallest `m` with
    /// `Phi(x + delta^m D) <= Phi(x) + mu delta^m <grad, D>`.
    pub fn armijo_linesearch(
        &self,
        theta: &[F],
        xi: &[F],
        phi0: F,
        grad: &[F],
        dir: &[F],
        cfg: &SsnConfig,
    ) -> Result<F, SsnError> {
        let n = self.n();
        let gdotd = la::dot(grad, dir);
        let mu = cast::<F>(cfg.armijo_mu);
        let delta = cast::<F>(cfg.armijo_delta);
        // Near the minimizer the predicted decrease falls below the
        // floating-point resolution of the objective; allow that much.
        let noise = cast::<F>(4.0) * F::epsilon() * (F::one() + phi0.abs());
        let mut alpha = F::one();
        let mut theta_trial = vec![F::zero(); n];
        let mut xi_trial = vec![F::zero(); xi.len()];
        for m in 0..=cfg.max_backtracks {
            if m > 0 {
                alpha *= delta;
            }
            for t in 0..n {
                theta_trial[t] = theta[t] + alpha * dir[t];
            }
            for t in 0..xi.len() {
                xi_trial[t] = xi[t] + alpha * dir[n + t];
            }
            if self.phi(&theta_trial, &xi_trial) <= phi0 + mu * alpha * gdotd + noise {
                return Ok(alpha);
            }
        }
        Err(SsnError::LineSearchFailed {
            tried: cfg.max_backtracks,
        })
    }

    /// Runs the Newton iteration from `start` until `stop_rule` accepts the
    /// current point. The rule receives `(theta, xi, grad_norm)`.
    pub fn solve(
        &self,
        start: (&[F], &[F]),
        mut stop_rule: impl FnMut(&[F], &[F], F) -> bool,
        cfg: &SsnConfig,
    ) -> Result<SsnOutcome<F>, SsnError> {
        let n = self.n();
        let mut theta = start.0.to_vec();
        let mut xi = start.1.to_vec();
        let mut degraded = false;
        let mut grad_trace = Vec::new();

        for j in 0..=cfg.max_iterations {
            let (phi0, grad) = self.phi_and_grad(&theta, &xi);
            let gnorm = la::nrm2(&grad);
            grad_trace.push(gnorm);
            if stop_rule(&theta, &xi, gnorm) {
                return Ok(SsnOutcome {
                    theta,
                    xi,
                    iterations: j,
                    grad_norm: gnorm,
                    grad_trace,
                    degraded,
                });
            }
            if j == cfg.max_iterations {
                break;
            }
            let mask = self.active_mask(&theta, &xi);
            let jacs = self.prox_jacobians(&xi);
            let (dir, _res, deg) = self.newton_direction(&grad, &mask, &jacs, cfg);
            degraded |= deg;
            let alpha = self.armijo_linesearch(&theta, &xi, phi0, &grad, &dir, cfg)?;
            for t in 0..n {
                theta[t] += alpha * dir[t];
            }
            for t in 0..xi.len() {
                xi[t] += alpha * dir[n + t];
            }
        }
        let (_, grad) = self.phi_and_grad(&theta, &xi);
        Err(SsnError::IterationCap {
            cap: cfg.max_iterations,
            grad_norm: la::nrm2(&grad).to_f64().unwrap_or(f64::NAN),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{Dataset, ShapeConstraint};
    use crate::testing;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    struct Fixture {
        instance: ProblemInstance<f64>,
        theta_center: Vec<f64>,
        xi_center: Vec<f64>,
        u_tilde: Vec<f64>,
        v_tilde: Vec<f64>,
        sigma: f64,
        h1: f64,
        h2: f64,
    }

    impl Fixture {
        fn random(d: usize, n: usize, shape: ShapeConstraint<f64>, rng: &mut StdRng) -> Self {
            let x: Vec<f64> = (0..d * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let data = Dataset::new(x, y, d).unwrap();
            let instance = ProblemInstance::new(data, shape).unwrap();
            Fixture {
                instance,
                theta_center: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                xi_center: (0..d * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                u_tilde: (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect(),
                v_tilde: (0..d * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                sigma: rng.gen_range(0.5..3.0),
                h1: 1e-3,
                h2: 1e-3,
            }
        }

        fn ctx<'a>(&'a self, active: &'a ActiveSet) -> SubproblemContext<'a, f64> {
            SubproblemContext {
                instance: &self.instance,
                active,
                theta_center: &self.theta_center,
                xi_center: &self.xi_center,
                u_tilde: &self.u_tilde,
                v_tilde: &self.v_tilde,
                sigma: self.sigma,
                h1: self.h1,
                h2: self.h2,
            }
        }
    }

    /// Dense-formula evaluation of the gradient, built from materialized
    /// A and B.
    fn dense_grad(fx: &Fixture, theta: &[f64], xi: &[f64]) -> Vec<f64> {
        let inst = &fx.instance;
        let (n, d) = (inst.len(), inst.dim());
        let (a, b) = testing::dense_operators(inst);
        let slack = testing::dense_row_values(&a, &b, theta, xi);
        let zm: Vec<f64> = slack
            .iter()
            .zip(&fx.u_tilde)
            .map(|(s, u)| (s - u / fx.sigma).min(0.0))
            .collect();
        let mut grad = vec![0.0; n + d * n];
        for r in 0..n * n {
            if zm[r] != 0.0 {
                for c in 0..n {
                    grad[c] += fx.sigma * a[r][c] * zm[r];
                }
                for c in 0..d * n {
                    grad[n + c] += fx.sigma * b[r][c] * zm[r];
                }
            }
        }
        let w: Vec<f64> = xi
            .iter()
            .zip(&fx.v_tilde)
            .map(|(x, v)| x - v / fx.sigma)
            .collect();
        let proj = crate::shape::project_blocks(inst.shape(), &w, n, d);
        for t in 0..d * n {
            grad[n + t] += fx.sigma * (w[t] - proj[t]);
        }
        let y = inst.dataset().responses();
        for t in 0..n {
            grad[t] += theta[t] - y[t] + fx.h1 / fx.sigma * (theta[t] - fx.theta_center[t]);
        }
        for t in 0..d * n {
            grad[n + t] += fx.h2 / fx.sigma * (xi[t] - fx.xi_center[t]);
        }
        grad
    }

    #[test]
    fn gradient_vanishes_on_affine_interpolant() {
        // Affine data: theta = Y interpolates with xi = slope, all slacks 0.
        let data = Dataset::new(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 2.0], 1).unwrap();
        let instance = ProblemInstance::new(data, ShapeConstraint::NoShape).unwrap();
        let theta = vec![0.0, 1.0, 2.0];
        let xi = vec![1.0, 1.0, 1.0];
        let active = ActiveSet::Full;
        let ctx = SubproblemContext {
            instance: &instance,
            active: &active,
            theta_center: &theta,
            xi_center: &xi,
            u_tilde: &vec![0.0; 9],
            v_tilde: &vec![0.0; 3],
            sigma: 1.0,
            h1: 1e-3,
            h2: 1e-3,
        };
        let (_, grad) = ctx.phi_and_grad(&theta, &xi);
        assert!(grad.iter().all(|&g| g == 0.0), "grad = {grad:?}");
    }

    #[test]
    fn gradient_matches_finite_differences_and_dense_formula() {
        let mut rng = StdRng::seed_from_u64(17);
        let shapes: Vec<ShapeConstraint<f64>> = vec![
            ShapeConstraint::NoShape,
            ShapeConstraint::Monotone {
                increasing: vec![0],
                decreasing: vec![1],
            },
            ShapeConstraint::Box {
                lower: vec![0.0, 0.0],
                upper: vec![0.5, 0.5],
            },
            ShapeConstraint::LipschitzBall {
                q: crate::problem::NormKind::One,
                radius: 0.5,
            },
            ShapeConstraint::LipschitzBall {
                q: crate::problem::NormKind::Two,
                radius: 0.5,
            },
            ShapeConstraint::LipschitzBall {
                q: crate::problem::NormKind::Inf,
                radius: 0.5,
            },
        ];
        for shape in shapes {
            let fx = Fixture::random(2, 4, shape, &mut rng);
            let active = ActiveSet::Full;
            let ctx = fx.ctx(&active);
            let (n, d) = (4, 2);
            for _ in 0..20 {
                let theta: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let xi: Vec<f64> = (0..d * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let (_, grad) = ctx.phi_and_grad(&theta, &xi);

                let dense = dense_grad(&fx, &theta, &xi);
                for (a, b) in grad.iter().zip(&dense) {
                    assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
                }

                let point: Vec<f64> = theta.iter().chain(xi.iter()).copied().collect();
                let scale = 1e-6 * (1.0 + crate::la::nrm2(&point));
                let fd = testing::fd_gradient(
                    |p| ctx.phi(&p[..n], &p[n..]),
                    &point,
                    scale,
                );
                let gn = crate::la::nrm2(&grad).max(1.0);
                for (a, b) in grad.iter().zip(&fd) {
                    assert!(
                        (a - b).abs() <= 1e-6 * gn,
                        "FD mismatch: {a} vs {b} (scale {gn})"
                    );
                }
            }
        }
    }

    #[test]
    fn gradient_with_shifted_multipliers_activates_projections() {
        let mut rng = StdRng::seed_from_u64(23);
        let mut fx = Fixture::random(2, 4, ShapeConstraint::NoShape, &mut rng);
        // Push every shifted slack negative.
        for u in fx.u_tilde.iter_mut() {
            *u = 50.0;
        }
        let active = ActiveSet::Full;
        let ctx = fx.ctx(&active);
        let theta: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xi: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask = ctx.active_mask(&theta, &xi);
        assert_eq!(mask.nnz, 4 * 4 - 4); // all off-diagonal rows
        let (_, grad) = ctx.phi_and_grad(&theta, &xi);
        let dense = dense_grad(&fx, &theta, &xi);
        for (a, b) in grad.iter().zip(&dense) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn active_mask_sign_conventions() {
        let mut rng = StdRng::seed_from_u64(29);
        let mut fx = Fixture::random(1, 2, ShapeConstraint::NoShape, &mut rng);
        fx.u_tilde = vec![0.0; 4];
        let active = ActiveSet::Full;
        let ctx = fx.ctx(&active);

        // theta = Y and xi = 0 on the n=2 toy: slacks are (0, dy, -dy, 0).
        let y = fx.instance.dataset().responses().to_vec();
        let xi = vec![0.0, 0.0];
        let mask = ctx.active_mask(&y, &xi);
        let dy = y[1] - y[0];
        let mut expect = vec![Vec::<u32>::new(), Vec::new()];
        if dy < 0.0 {
            expect[0].push(1); // row (1,2) negative
        } else if dy > 0.0 {
            expect[1].push(0);
        }
        assert_eq!(mask.viol_by_block, expect);

        // All shifted arguments negative -> every off-diagonal row masked.
        let mut fx2 = Fixture::random(1, 2, ShapeConstraint::NoShape, &mut rng);
        for u in fx2.u_tilde.iter_mut() {
            *u = 100.0;
        }
        let ctx2 = fx2.ctx(&active);
        let mask = ctx2.active_mask(&y, &xi);
        assert_eq!(mask.nnz, 2);

        // All slacks >= 0 with zero multipliers -> empty mask.
        let data = Dataset::new(vec![0.0, 1.0], vec![0.0, 1.0], 1).unwrap();
        let inst = ProblemInstance::new(data, ShapeConstraint::NoShape).unwrap();
        let u0 = vec![0.0; 4];
        let v0 = vec![0.0; 2];
        let tc = vec![0.0, 1.0];
        let xc = vec![1.0, 1.0];
        let ctx3 = SubproblemContext {
            instance: &inst,
            active: &active,
            theta_center: &tc,
            xi_center: &xc,
            u_tilde: &u0,
            v_tilde: &v0,
            sigma: 1.0,
            h1: 1e-3,
            h2: 1e-3,
        };
        let mask = ctx3.active_mask(&tc, &xc);
        assert_eq!(mask.nnz, 0);
    }

    #[test]
    fn hessian_diagonal_case() {
        // Empty mask and identity prox Jacobians: H dir has the closed
        // diagonal form ((1 + h1/sigma) dtheta, (h2/sigma) dxi).
        let mut rng = StdRng::seed_from_u64(31);
        let fx = Fixture::random(2, 3, ShapeConstraint::NoShape, &mut rng);
        let active = ActiveSet::Full;
        let ctx = fx.ctx(&active);
        let mask = ActiveMask {
            viol_by_block: vec![Vec::new(); 3],
            nnz: 0,
        };
        let jacs = vec![JacobianElement::Identity; 3];
        let dir: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut out = vec![0.0; 9];
        ctx.hessian_matvec(&mask, &jacs, &dir, &mut out);
        for t in 0..3 {
            let want = (1.0 + fx.h1 / fx.sigma) * dir[t];
            assert!((out[t] - want).abs() < 1e-14);
        }
        for t in 3..9 {
            let want = fx.h2 / fx.sigma * dir[t];
            assert!((out[t] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn hessian_reproduces_full_mask_closed_form() {
        // n=2, all off-diagonal rows masked: A^T Diag(1) A = 4I - 2ee^T
        // on the theta block (including zero diagonal rows).
        let data = Dataset::new(vec![0.5, 0.5], vec![0.0, 1.0], 1).unwrap();
        // Identical predictors make B = 0, isolating the theta block.
        let inst = ProblemInstance::new(data, ShapeConstraint::NoShape).unwrap();
        let active = ActiveSet::Full;
        let u0 = vec![0.0; 4];
        let v0 = vec![0.0; 2];
        let tc = vec![0.0; 2];
        let xc = vec![0.0; 2];
        let ctx = SubproblemContext {
            instance: &inst,
            active: &active,
            theta_center: &tc,
            xi_center: &xc,
            u_tilde: &u0,
            v_tilde: &v0,
            sigma: 1.0,
            h1: 1e-3,
            h2: 1e-3,
        };
        let mask = ActiveMask {
            viol_by_block: vec![vec![1], vec![0]],
            nnz: 2,
        };
        let jacs = vec![JacobianElement::Identity; 2];
        // Probe the theta block columns.
        for c in 0..2 {
            let mut dir = vec![0.0; 4];
            dir[c] = 1.0;
            let mut out = vec![0.0; 4];
            ctx.hessian_matvec(&mask, &jacs, &dir, &mut out);
            for r in 0..2 {
                let ata: f64 = if r == c { 4.0 - 2.0 } else { -2.0 };
                let reg: f64 = if r == c { 1.0 + 1e-3 } else { 0.0 };
                // Full mask over off-diagonal rows only: 2I*2 - 2ee^T has
                // diagonal 2, off-diagonal -2.
                let want = ata + reg;
                assert!(
                    (out[r] - want).abs() < 1e-12,
                    "entry ({r},{c}): {} vs {want}",
                    out[r]
                );
            }
        }
    }

    #[test]
    fn hessian_matvec_matches_dense_oracle() {
        let mut rng = StdRng::seed_from_u64(37);
        for _ in 0..40 {
            let n = rng.gen_range(2..=5);
            let d = rng.gen_range(1..=3);
            let shape = ShapeConstraint::LipschitzBall {
                q: crate::problem::NormKind::Two,
                radius: 0.5,
            };
            let fx = Fixture::random(d, n, shape, &mut rng);
            let active = ActiveSet::Full;
            let ctx = fx.ctx(&active);
            let theta: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xi: Vec<f64> = (0..d * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mask = ctx.active_mask(&theta, &xi);
            let jacs = ctx.prox_jacobians(&xi);
            let m = n + d * n;
            let h = ctx.assemble_dense(&mask, &jacs);

            // Dense oracle from materialized operators.
            let (a, b) = testing::dense_operators(&fx.instance);
            let slack = testing::dense_row_values(&a, &b, &theta, &xi);
            let mut h_oracle = vec![0.0; m * m];
            for r in 0..n * n {
                let z = slack[r] - fx.u_tilde[r] / fx.sigma;
                if z < 0.0 && r / n != r % n {
                    let row: Vec<f64> = a[r].iter().chain(b[r].iter()).copied().collect();
                    for p in 0..m {
                        for q in 0..m {
                            h_oracle[p * m + q] += fx.sigma * row[p] * row[q];
                        }
                    }
                }
            }
            for t in 0..n {
                h_oracle[t * m + t] += 1.0 + fx.h1 / fx.sigma;
            }
            for i in 0..n {
                let q = jacs[i].dense(d);
                for t in 0..d {
                    for s in 0..d {
                        let r = n + i * d + t;
                        let c = n + i * d + s;
                        let iq = if t == s { 1.0 } else { 0.0 };
                        h_oracle[r * m + c] += fx.sigma * (iq - q[t * d + s]);
                    }
                    h_oracle[(n + i * d + t) * m + n + i * d + t] += fx.h2 / fx.sigma;
                }
            }
            for (x, y) in h.iter().zip(&h_oracle) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }

            // Matvec agrees with the dense product.
            let dir: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut out = vec![0.0; m];
            ctx.hessian_matvec(&mask, &jacs, &dir, &mut out);
            for r in 0..m {
                let want: f64 = (0..m).map(|c| h_oracle[r * m + c] * dir[c]).sum();
                assert!(
                    (out[r] - want).abs() <= 1e-12 * (1.0 + want.abs()),
                    "matvec row {r}: {} vs {want}",
                    out[r]
                );
            }

            // Symmetry and positive definiteness lower bound.
            let a2: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b2: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut ha = vec![0.0; m];
            let mut hb = vec![0.0; m];
            ctx.hessian_matvec(&mask, &jacs, &a2, &mut ha);
            ctx.hessian_matvec(&mask, &jacs, &b2, &mut hb);
            let lhs = crate::la::dot(&ha, &b2);
            let rhs = crate::la::dot(&a2, &hb);
            assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            let quad = crate::la::dot(&a2, &ha);
            let bound = (fx.h1.min(fx.h2) / fx.sigma) * crate::la::dot(&a2, &a2);
            assert!(quad >= bound - 1e-12);
        }
    }

    #[test]
    fn newton_direction_diagonal_and_dense_agreement() {
        let mut rng = StdRng::seed_from_u64(41);
        let fx = Fixture::random(2, 3, ShapeConstraint::NoShape, &mut rng);
        let active = ActiveSet::Full;
        let ctx = fx.ctx(&active);
        let cfg = SsnConfig::default();

        // Diagonal context: empty mask, identity Jacobians.
        let mask = ActiveMask {
            viol_by_block: vec![Vec::new(); 3],
            nnz: 0,
        };
        let jacs = vec![JacobianElement::Identity; 3];
        let grad: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (dir, res, degraded) = ctx.newton_direction(&grad, &mask, &jacs, &cfg);
        assert!(!degraded);
        for t in 0..3 {
            let want = -grad[t] / (1.0 + fx.h1 / fx.sigma);
            assert!((dir[t] - want).abs() < 1e-10);
        }
        for t in 3..9 {
            let want = -grad[t] / (fx.h2 / fx.sigma);
            assert!((dir[t] - want).abs() < 1e-8);
        }
        let gnorm = crate::la::nrm2(&grad);
        assert!(res <= cfg.gamma_bar.min(gnorm.powf(1.2)) + 1e-9);

        // Random masks: direct path agrees with an independent dense solve,
        // and the CG path agrees with the direct path.
        for _ in 0..10 {
            let theta: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xi: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mask = ctx.active_mask(&theta, &xi);
            let jacs = ctx.prox_jacobians(&xi);
            let (_, grad) = ctx.phi_and_grad(&theta, &xi);
            let (dir, _, _) = ctx.newton_direction(&grad, &mask, &jacs, &cfg);
            let h = ctx.assemble_dense(&mask, &jacs);
            let rhs: Vec<f64> = grad.iter().map(|g| -g).collect();
            let want = crate::la::solve_spd_dense(&h, &rhs, 9).unwrap();
            for (a, b) in dir.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()));
            }

            let mut cg_cfg = cfg.clone();
            cg_cfg.direct_threshold = 0;
            let (dir_cg, res_cg, _) = ctx.newton_direction(&grad, &mask, &jacs, &cg_cfg);
            let gnorm = crate::la::nrm2(&grad);
            assert!(res_cg <= cfg.gamma_bar.min(gnorm.powf(1.2)) + 1e-12);
            let mut hd = vec![0.0; 9];
            ctx.hessian_matvec(&mask, &jacs, &dir_cg, &mut hd);
            for t in 0..9 {
                hd[t] += grad[t];
            }
            assert!(crate::la::nrm2(&hd) <= cfg.gamma_bar.min(gnorm.powf(1.2)) + 1e-12);
        }
    }

    #[test]
    fn armijo_accepts_full_newton_step_on_quadratic() {
        // Keep every shifted slack strictly positive so the objective is
        // exactly quadratic in a neighborhood.
        let data = Dataset::new(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 2.0], 1).unwrap();
        let inst = ProblemInstance::new(data, ShapeConstraint::NoShape).unwrap();
        let active = ActiveSet::Full;
        let u0 = vec![-1.0; 9]; // negative multipliers push z up
        let v0 = vec![0.0; 3];
        let tc = vec![0.0, 1.0, 2.0];
        let xc = vec![1.0, 1.0, 1.0];
        let ctx = SubproblemContext {
            instance: &inst,
            active: &active,
            theta_center: &tc,
            xi_center: &xc,
            u_tilde: &u0,
            v_tilde: &v0,
            sigma: 1.0,
            h1: 1e-3,
            h2: 1e-3,
        };
        let cfg = SsnConfig::default();
        let theta = vec![0.01, 1.0, 2.0];
        let xi = vec![1.0, 1.0, 1.0];
        let (phi0, grad) = ctx.phi_and_grad(&theta, &xi);
        let mask = ctx.active_mask(&theta, &xi);
        assert_eq!(mask.nnz, 0);
        let jacs = ctx.prox_jacobians(&xi);
        let (dir, _, _) = ctx.newton_direction(&grad, &mask, &jacs, &cfg);
        let alpha = ctx
            .armijo_linesearch(&theta, &xi, phi0, &grad, &dir, &cfg)
            .unwrap();
        assert_eq!(alpha, 1.0);

        // Steepest descent with a tiny gradient also takes the full step.
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        let alpha = ctx
            .armijo_linesearch(&theta, &xi, phi0, &grad, &neg, &cfg)
            .unwrap();
        assert_eq!(alpha, 1.0);

        // Doubling the exact Newton step forces exactly one backtrack.
        let doubled: Vec<f64> = dir.iter().map(|v| 2.0 * v).collect();
        let alpha = ctx
            .armijo_linesearch(&theta, &xi, phi0, &grad, &doubled, &cfg)
            .unwrap();
        assert_eq!(alpha, 0.5);
    }

    #[test]
    fn ssn_solve_zero_iterations_at_minimizer() {
        let data = Dataset::new(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 2.0], 1).unwrap();
        let inst = ProblemInstance::new(data, ShapeConstraint::NoShape).unwrap();
        let active = ActiveSet::Full;
        let theta = vec![0.0, 1.0, 2.0];
        let xi = vec![1.0, 1.0, 1.0];
        let u0 = vec![0.0; 9];
        let v0 = vec![0.0; 3];
        let ctx = SubproblemContext {
            instance: &inst,
            active: &active,
            theta_center: &theta,
            xi_center: &xi,
            u_tilde: &u0,
            v_tilde: &v0,
            sigma: 1.0,
            h1: 1e-3,
            h2: 1e-3,
        };
        let out = ctx
            .solve((&theta, &xi), |_, _, g| g <= 1e-12, &SsnConfig::default())
            .unwrap();
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn ssn_solve_matches_dense_newton_oracle() {
        let mut rng = StdRng::seed_from_u64(53);
        for trial in 0..8 {
            let n = 5;
            let d = 2;
            let shape = if trial % 2 == 0 {
                ShapeConstraint::NoShape
            } else {
                ShapeConstraint::LipschitzBall {
                    q: crate::problem::NormKind::Two,
                    radius: 0.8,
                }
            };
            let mut fx = Fixture::random(d, n, shape, &mut rng);
            // Stronger proximal weights keep the minimum curvature around
            // 0.1 so a 1e-10 gradient pins the minimizer to ~1e-9.
            fx.h1 = 0.1;
            fx.h2 = 0.1;
            fx.sigma = 1.0;
            let active = ActiveSet::Full;
            let ctx = fx.ctx(&active);
            let theta0 = fx.instance.dataset().responses().to_vec();
            let xi0 = vec![0.0; d * n];
            let out = ctx
                .solve((&theta0, &xi0), |_, _, g| g <= 1e-10, &SsnConfig::default())
                .unwrap();
            assert!(out.grad_norm <= 1e-10);

            // Independent dense-matrix Newton iteration from a different
            // start must land on the same strongly convex minimizer.
            let mut theta = vec![0.0; n];
            let mut xi = vec![0.1; d * n];
            for _ in 0..60 {
                let (phi0, grad) = ctx.phi_and_grad(&theta, &xi);
                if crate::la::nrm2(&grad) <= 1e-10 {
                    break;
                }
                let mask = ctx.active_mask(&theta, &xi);
                let jacs = ctx.prox_jacobians(&xi);
                let h = ctx.assemble_dense(&mask, &jacs);
                let rhs: Vec<f64> = grad.iter().map(|g| -g).collect();
                let dir = crate::la::solve_spd_dense(&h, &rhs, n + d * n).unwrap();
                let alpha = ctx
                    .armijo_linesearch(&theta, &xi, phi0, &grad, &dir, &SsnConfig::default())
                    .unwrap();
                for t in 0..n {
                    theta[t] += alpha * dir[t];
                }
                for t in 0..d * n {
                    xi[t] += alpha * dir[n + t];
                }
            }
            for (a, b) in out.theta.iter().zip(&theta) {
                assert!((a - b).abs() <= 1e-8, "theta mismatch {a} vs {b}");
            }
            for (a, b) in out.xi.iter().zip(&xi) {
                assert!((a - b).abs() <= 1e-8, "xi mismatch {a} vs {b}");
            }

            // The gradient norm may jump when the active mask changes, but
            // once the iterate settles in a single quadratic region the
            // trace decreases strictly to the tolerance.
            let trace = &out.grad_trace;
            let last_rise = (1..trace.len())
                .rev()
                .find(|&k| trace[k] > trace[k - 1])
                .unwrap_or(0);
            for w in trace[last_rise..].windows(2) {
                assert!(
                    w[1] < w[0],
                    "grad trace tail not strictly decreasing: {trace:?}"
                );
            }
            assert!(last_rise + 1 < trace.len(), "no decreasing tail: {trace:?}");
        }
    }
}
