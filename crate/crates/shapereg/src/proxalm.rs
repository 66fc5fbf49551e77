//! Proximal augmented Lagrangian outer loop.
//!
//! Each outer iteration minimizes the augmented Lagrangian plus proximal
//! terms around the current point (solved by the semismooth Newton
//! module), updates the multipliers from the same projection residuals,
//! and grows the penalty parameter geometrically. Termination is measured
//! by the relative KKT residual, evaluated blockwise so that nothing of
//! size n^2 is ever allocated for the scan.

use rayon::prelude::*;
use std::time::Instant;
use thiserror::Error;

use crate::la;
use crate::problem::{ActiveSet, ProblemInstance};
use crate::scalar::{cast, Real};
use crate::shape::{conjugate, project_blocks};
use crate::ssn::{SsnConfig, SsnError, SubproblemContext};
use crate::trace::{TraceRecord, TraceSink};

#[derive(Debug, Error)]
pub enum SolveError<F: Real> {
    #[error("outer iteration cap {cap} reached with R_KKT = {r_kkt}")]
    OuterIterationCap {
        cap: usize,
        r_kkt: f64,
        best: Box<(SolverState<F>, KKTReport<F>)>,
    },
    #[error("subproblem solver failed: {source}")]
    Subproblem {
        #[source]
        source: SsnError,
        best: Box<(SolverState<F>, KKTReport<F>)>,
    },
}

/// Outer-loop tunables. The penalty schedule and initial point are fixed
/// defaults; the proximal weights follow the reference configuration.
#[derive(Debug, Clone)]
pub struct ProxAlmConfig {
    pub sigma0: f64,
    /// Geometric growth factor for sigma.
    pub sigma_growth: f64,
    pub sigma_max: f64,
    /// Diagonal proximal weights (H1 = h1 I, H2 = h2 I).
    pub h1: f64,
    pub h2: f64,
    pub kkt_tol: f64,
    pub max_outer: usize,
    /// Blockwise scan count for the n^2-row KKT terms.
    pub block_count: usize,
    pub ssn: SsnConfig,
}

impl Default for ProxAlmConfig {
    fn default() -> Self {
        Self {
            sigma0: 1.0,
            sigma_growth: 1.6,
            sigma_max: 1e6,
            h1: 1e-3,
            h2: 1e-3,
            kkt_tol: 1e-6,
            max_outer: 100,
            block_count: 10,
            ssn: SsnConfig::default(),
        }
    }
}

/// Primal pair and multipliers. `u` is indexed by row id when the active
/// set is full, by row-set position otherwise; `u >= 0` after every
/// multiplier update.
#[derive(Debug, Clone)]
pub struct SolverState<F> {
    pub theta: Vec<F>,
    pub xi: Vec<F>,
    pub u: Vec<F>,
    pub v: Vec<F>,
    pub sigma: F,
    pub outer_iters: usize,
    pub inner_iters: usize,
}

impl<F: Real> SolverState<F> {
    /// Cold start: theta = Y (unconstrained loss minimizer), everything
    /// else zero.
    pub fn cold(instance: &ProblemInstance<F>, active: &ActiveSet, sigma0: F) -> Self {
        let n = instance.len();
        let d = instance.dim();
        Self {
            theta: instance.dataset().responses().to_vec(),
            xi: vec![F::zero(); d * n],
            u: vec![F::zero(); active.len(n)],
            v: vec![F::zero(); d * n],
            sigma: sigma0,
            outer_iters: 0,
            inner_iters: 0,
        }
    }
}

/// Relative KKT residual and objective report.
#[derive(Debug, Clone)]
pub struct KKTReport<F> {
    /// max of the four component residuals.
    pub r_kkt: F,
    /// (dual-theta, dual-xi, prox feasibility, row complementarity).
    pub components: [F; 4],
    pub pobj: F,
    pub dobj: F,
    pub r_rel: F,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub time_seconds: f64,
}

/// Four-term relative KKT residual of `(theta, xi, u, v)`.
///
/// `u` lives on `u_set`. With `measure_full`, the complementarity term
/// runs over all n^2 rows (u is zero off its support); otherwise it runs
/// over `u_set` only, which is the reduced residual used by constraint
/// generation.
pub fn kkt_residual<F: Real>(
    instance: &ProblemInstance<F>,
    theta: &[F],
    xi: &[F],
    u_set: &ActiveSet,
    u: &[F],
    v: &[F],
    measure_full: bool,
    block_count: usize,
) -> KKTReport<F> {
    let n = instance.len();
    let d = instance.dim();
    let y = instance.dataset().responses();
    let one = F::one();

    // A^T u and B^T u over the support of u.
    let mut at_u = vec![F::zero(); n];
    let mut bt_u = vec![F::zero(); d * n];
    match u_set {
        ActiveSet::Full => instance.adjoint_scatter(
            (0..n * n).map(|r| (r / n, r % n, u[r])),
            &mut at_u,
            &mut bt_u,
        ),
        ActiveSet::Reduced(rs) => {
            let rows = (0..n).flat_map(|i| {
                rs.block(i)
                    .iter()
                    .enumerate()
                    .map(move |(t, &j)| (i, j as usize, rs.block_ptr[i] + t))
            });
            instance.adjoint_scatter(rows.map(|(i, j, pos)| (i, j, u[pos])), &mut at_u, &mut bt_u)
        }
    }
    let u_norm = la::nrm2(u);
    let v_norm = la::nrm2(v);

    // Component 1: theta - Y - A^T u.
    let mut r1 = F::zero();
    for t in 0..n {
        let e = theta[t] - y[t] - at_u[t];
        r1 += e * e;
    }
    let r1 = r1.sqrt() / (one + la::nrm2(y) + la::nrm2(theta) + u_norm);

    // Component 2: B^T u + v.
    let mut r2 = F::zero();
    for t in 0..d * n {
        let e = bt_u[t] + v[t];
        r2 += e * e;
    }
    let r2 = r2.sqrt() / (one + u_norm + v_norm);

    // Component 3: xi - Prox_p(xi - v).
    let w: Vec<F> = xi.iter().zip(v).map(|(&x, &vi)| x - vi).collect();
    let proj = project_blocks(instance.shape(), &w, n, d);
    let mut r3 = F::zero();
    for t in 0..d * n {
        let e = xi[t] - proj[t];
        r3 += e * e;
    }
    let r3 = r3.sqrt() / (one + la::nrm2(xi) + v_norm);

    // Component 4: row complementarity, scanned blockwise.
    let (num4, a_norm_sq, b_norm_sq) = scan_complementarity(
        instance,
        theta,
        xi,
        u_set,
        u,
        measure_full,
        block_count,
    );
    let r4 = num4.sqrt() / (one + a_norm_sq.sqrt() + b_norm_sq.sqrt() + u_norm);

    let r_kkt = r1.max(r2).max(r3).max(r4);

    let half = cast::<F>(0.5);
    let pobj = half
        * theta
            .iter()
            .zip(y)
            .map(|(&t, &yi)| (t - yi) * (t - yi))
            .sum::<F>();
    // Dual objective: -1/2 ||A^T u||^2 - <Y, A^T u> - p*(-v), with u >= 0.
    let mut dobj = -half * la::dot(&at_u, &at_u) - la::dot(y, &at_u);
    let mut conj_sum = F::zero();
    for i in 0..n {
        let blk = instance.shape().block(i);
        let neg_v: Vec<F> = v[i * d..(i + 1) * d].iter().map(|&x| -x).collect();
        let c = conjugate(&blk, &neg_v);
        if c == F::infinity() {
            conj_sum = F::infinity();
            break;
        }
        conj_sum += c;
    }
    dobj = dobj - conj_sum;
    let r_rel = if dobj.is_finite() {
        (pobj - dobj).abs() / (one + pobj.abs() + dobj.abs())
    } else {
        F::one()
    };

    KKTReport {
        r_kkt,
        components: [r1, r2, r3, r4],
        pobj,
        dobj,
        r_rel,
        outer_iters: 0,
        inner_iters: 0,
        time_seconds: 0.0,
    }
}

/// Sum of squared complementarity residuals plus the row norms entering
/// its denominator, accumulated over fixed per-block chunks (parallel,
/// order-fixed merge).
fn scan_complementarity<F: Real>(
    instance: &ProblemInstance<F>,
    theta: &[F],
    xi: &[F],
    u_set: &ActiveSet,
    u: &[F],
    measure_full: bool,
    block_count: usize,
) -> (F, F, F) {
    let n = instance.len();
    let d = instance.dim();
    let data = instance.dataset();
    let chunk = n.div_ceil(block_count.max(1));
    let ranges: Vec<(usize, usize)> = (0..n)
        .step_by(chunk.max(1))
        .map(|s| (s, (s + chunk).min(n)))
        .collect();

    let partials: Vec<(F, F, F)> = ranges
        .par_iter()
        .map(|&(start, end)| {
            let mut num = F::zero();
            let mut a_sq = F::zero();
            let mut b_sq = F::zero();
            for i in start..end {
                let xi_i = &xi[i * d..(i + 1) * d];
                let x_i = data.point(i);
                let base = la::dot(xi_i, x_i) - theta[i];
                let mut handle = |j: usize, u_row: F| {
                    let a_val = theta[j] - theta[i];
                    let b_val = base + theta[i] - la::dot(xi_i, data.point(j));
                    let slack = a_val + b_val;
                    a_sq += a_val * a_val;
                    b_sq += b_val * b_val;
                    // slack - max(slack - u, 0)
                    let e = slack - (slack - u_row).max(F::zero());
                    num += e * e;
                };
                match (measure_full, u_set) {
                    (true, ActiveSet::Full) => {
                        for j in 0..n {
                            handle(j, u[i * n + j]);
                        }
                    }
                    (true, ActiveSet::Reduced(rs)) => {
                        let cols = rs.block(i);
                        let base_pos = rs.block_ptr[i];
                        let mut cursor = 0usize;
                        for j in 0..n {
                            let u_row = if cursor < cols.len() && cols[cursor] as usize == j {
                                let val = u[base_pos + cursor];
                                cursor += 1;
                                val
                            } else {
                                F::zero()
                            };
                            handle(j, u_row);
                        }
                    }
                    (false, ActiveSet::Full) => {
                        for j in 0..n {
                            handle(j, u[i * n + j]);
                        }
                    }
                    (false, ActiveSet::Reduced(rs)) => {
                        let cols = rs.block(i);
                        let base_pos = rs.block_ptr[i];
                        for (t, &jc) in cols.iter().enumerate() {
                            handle(jc as usize, u[base_pos + t]);
                        }
                    }
                }
            }
            (num, a_sq, b_sq)
        })
        .collect();

    let mut num = F::zero();
    let mut a_sq = F::zero();
    let mut b_sq = F::zero();
    for (p, q, r) in partials {
        num += p;
        a_sq += q;
        b_sq += r;
    }
    (num, a_sq, b_sq)
}

/// Multiplier step: `u+ = -sigma (z - proj_+(z))` on the active rows with
/// `z = A theta + B xi - u/sigma`, and `v+ = -sigma (w - Prox_p(w))` with
/// `w = xi - v/sigma`. The returned `u+` is nonnegative by construction.
pub fn multiplier_update<F: Real>(
    instance: &ProblemInstance<F>,
    active: &ActiveSet,
    theta: &[F],
    xi: &[F],
    u: &[F],
    v: &[F],
    sigma: F,
) -> (Vec<F>, Vec<F>) {
    let n = instance.len();
    let d = instance.dim();
    let inv_sigma = F::one() / sigma;
    let mut u_next = vec![F::zero(); u.len()];
    instance.for_each_slack_block(theta, xi, active, |i, cols, vals| {
        let base_pos = match active {
            ActiveSet::Full => i * n,
            ActiveSet::Reduced(rs) => rs.block_ptr[i],
        };
        for (t, v_slack) in vals.iter().enumerate() {
            let pos = base_pos + t;
            let z = *v_slack - u[pos] * inv_sigma;
            if z < F::zero() {
                u_next[pos] = -sigma * z;
            }
        }
        let _ = cols;
    });

    let w: Vec<F> = xi
        .iter()
        .zip(v)
        .map(|(&x, &vi)| x - vi * inv_sigma)
        .collect();
    let proj = project_blocks(instance.shape(), &w, n, d);
    let v_next: Vec<F> = w
        .iter()
        .zip(&proj)
        .map(|(&wi, &pi)| -sigma * (wi - pi))
        .collect();
    (u_next, v_next)
}

/// Outcome of the stopping-criteria evaluation for one trial point.
#[derive(Debug, Clone, Copy)]
pub struct StoppingChecks {
    pub criterion_a: bool,
    pub criterion_b: bool,
}

/// Criterion (A): `grad_norm <= sqrt(lambda_min)/sigma * eps_k` with
/// `eps_k = 0.5^k`; criterion (B): `grad_norm <= delta_k
/// sqrt(lambda_min)/sigma * state_diff` with the damped practical
/// `delta_k` rule (outer index k is 1-based).
pub fn stopping_checks<F: Real>(
    grad_norm: F,
    state_diff_sigma_norm: F,
    sigma: F,
    k: usize,
    h1: F,
    h2: F,
) -> StoppingChecks {
    let lambda_min = h1.min(h2).min(F::one());
    let sqrt_lmin = lambda_min.sqrt();
    let eps_k = cast::<F>(0.5).powi(k as i32);
    let a_threshold = sqrt_lmin / sigma * eps_k;

    let damp = cast::<F>((k.div_ceil(20) as f64).powi(2).max(1.0));
    // delta_k = max(0.1, 1e-6 / ||diff||) / damp, applied to the diff.
    let b_threshold =
        (cast::<F>(0.1) * state_diff_sigma_norm).max(cast::<F>(1e-6)) * sqrt_lmin / (sigma * damp);

    StoppingChecks {
        criterion_a: grad_norm <= a_threshold,
        criterion_b: grad_norm <= b_threshold,
    }
}

pub struct SolveOutcome<F> {
    pub state: SolverState<F>,
    pub report: KKTReport<F>,
}

/// Runs the outer loop until `R_KKT <= kkt_tol` (reduced residual when a
/// working set is supplied). Warm starts continue from `start`.
pub fn solve<F: Real>(
    instance: &ProblemInstance<F>,
    config: &ProxAlmConfig,
    active: &ActiveSet,
    start: Option<SolverState<F>>,
    trace: &mut TraceSink<'_>,
) -> Result<SolveOutcome<F>, SolveError<F>> {
    let t0 = Instant::now();
    let n = instance.len();
    let d = instance.dim();
    let h1 = cast::<F>(config.h1);
    let h2 = cast::<F>(config.h2);
    let measure_full = active.is_full();

    let mut state = start.unwrap_or_else(|| SolverState::cold(instance, active, cast(config.sigma0)));
    debug_assert_eq!(state.u.len(), active.len(n));

    // Already optimal (e.g. warm start after a no-op working-set round).
    let mut report = kkt_residual(
        instance,
        &state.theta,
        &state.xi,
        active,
        &state.u,
        &state.v,
        measure_full,
        config.block_count,
    );
    if report.r_kkt <= cast(config.kkt_tol) {
        report.outer_iters = state.outer_iters;
        report.inner_iters = state.inner_iters;
        report.time_seconds = t0.elapsed().as_secs_f64();
        return Ok(SolveOutcome { state, report });
    }

    for k in 1..=config.max_outer {
        let sigma = state.sigma;
        let ctx = SubproblemContext {
            instance,
            active,
            theta_center: &state.theta,
            xi_center: &state.xi,
            u_tilde: &state.u,
            v_tilde: &state.v,
            sigma,
            h1,
            h2,
        };

        // Stopping rule (B) with (A) as safeguard. The candidate
        // multipliers are recomputed at each trial point; only their
        // norms are needed, so nothing of multiplier size is stored.
        let theta_prev = state.theta.clone();
        let xi_prev = state.xi.clone();
        let u_prev = &state.u;
        let v_prev = &state.v;
        let inv_sigma = F::one() / sigma;
        let stop_rule = |theta_t: &[F], xi_t: &[F], gnorm: F| -> bool {
            let mut du2 = F::zero();
            {
                let mut pos_iter_base = 0usize;
                instance.for_each_slack_block(theta_t, xi_t, active, |i, _cols, vals| {
                    let base_pos = match active {
                        ActiveSet::Full => i * n,
                        ActiveSet::Reduced(rs) => rs.block_ptr[i],
                    };
                    for (t, slack) in vals.iter().enumerate() {
                        let pos = base_pos + t;
                        let z = *slack - u_prev[pos] * inv_sigma;
                        let u_new = if z < F::zero() { -sigma * z } else { F::zero() };
                        let e = u_new - u_prev[pos];
                        du2 += e * e;
                    }
                    pos_iter_base += vals.len();
                });
            }
            let mut dv2 = F::zero();
            {
                let w: Vec<F> = xi_t
                    .iter()
                    .zip(v_prev)
                    .map(|(&x, &vi)| x - vi * inv_sigma)
                    .collect();
                let proj = project_blocks(instance.shape(), &w, n, d);
                for t in 0..d * n {
                    let v_new = -sigma * (w[t] - proj[t]);
                    let e = v_new - v_prev[t];
                    dv2 += e * e;
                }
            }
            let mut diff = du2 + dv2;
            for t in 0..n {
                let e = theta_t[t] - theta_prev[t];
                diff += h1 * e * e;
            }
            for t in 0..d * n {
                let e = xi_t[t] - xi_prev[t];
                diff += h2 * e * e;
            }
            let checks = stopping_checks(gnorm, diff.sqrt(), sigma, k, h1, h2);
            checks.criterion_a || checks.criterion_b
        };

        let outcome = match ctx.solve((&state.theta, &state.xi), stop_rule, &config.ssn) {
            Ok(o) => o,
            Err(e) => {
                report.outer_iters = state.outer_iters;
                report.inner_iters = state.inner_iters;
                report.time_seconds = t0.elapsed().as_secs_f64();
                return Err(SolveError::Subproblem {
                    source: e,
                    best: Box::new((state, report)),
                });
            }
        };

        let (u_next, v_next) = multiplier_update(
            instance,
            active,
            &outcome.theta,
            &outcome.xi,
            &state.u,
            &state.v,
            sigma,
        );
        state.theta = outcome.theta;
        state.xi = outcome.xi;
        state.u = u_next;
        state.v = v_next;
        state.outer_iters += 1;
        state.inner_iters += outcome.iterations;

        report = kkt_residual(
            instance,
            &state.theta,
            &state.xi,
            active,
            &state.u,
            &state.v,
            measure_full,
            config.block_count,
        );
        trace.emit(TraceRecord {
            k,
            sigma: sigma.to_f64().unwrap_or(f64::NAN),
            inner_iters: outcome.iterations,
            grad_norm: outcome.grad_norm.to_f64().unwrap_or(f64::NAN),
            r_kkt: report.r_kkt.to_f64().unwrap_or(f64::NAN),
            pobj: report.pobj.to_f64().unwrap_or(f64::NAN),
            dobj: report.dobj.to_f64().unwrap_or(f64::NAN),
        });

        if report.r_kkt <= cast(config.kkt_tol) {
            report.outer_iters = state.outer_iters;
            report.inner_iters = state.inner_iters;
            report.time_seconds = t0.elapsed().as_secs_f64();
            return Ok(SolveOutcome { state, report });
        }
        state.sigma = (sigma * cast(config.sigma_growth)).min(cast(config.sigma_max));
    }

    report.outer_iters = state.outer_iters;
    report.inner_iters = state.inner_iters;
    report.time_seconds = t0.elapsed().as_secs_f64();
    let r_kkt = report.r_kkt.to_f64().unwrap_or(f64::NAN);
    Err(SolveError::OuterIterationCap {
        cap: config.max_outer,
        r_kkt,
        best: Box::new((state, report)),
    })
}
