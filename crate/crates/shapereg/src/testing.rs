//! Test support: dense materializations of the implicit operators,
//! brute-force projection oracles, and finite-difference helpers.
//!
//! Everything here is deliberately independent of the production code
//! paths it is used to check: the dense operators are built entry by
//! entry from their definitions, and the projection oracles enumerate
//! active sets instead of sorting.

use rand::Rng;

use crate::problem::{Dataset, ProblemInstance, ShapeConstraint};

/// Uniform random instance with predictors in [-1, 1]^d and responses in
/// [-1, 1], no shape constraint.
pub fn random_instance<R: Rng>(d: usize, n: usize, rng: &mut R) -> ProblemInstance<f64> {
    let x: Vec<f64> = (0..d * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let data = Dataset::new(x, y, d).unwrap();
    ProblemInstance::new(data, ShapeConstraint::NoShape).unwrap()
}

/// Densely materialized `A` (n^2 x n) and `B` (n^2 x dn), row r = i*n + j.
///
/// Row (i, j) of A is `e_j - e_i`; row (i, j) of B has `(X_i - X_j)^T` in
/// block i and zeros elsewhere.
pub fn dense_operators(inst: &ProblemInstance<f64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = inst.len();
    let d = inst.dim();
    let mut a = vec![vec![0.0; n]; n * n];
    let mut b = vec![vec![0.0; d * n]; n * n];
    for i in 0..n {
        for j in 0..n {
            let r = i * n + j;
            a[r][j] += 1.0;
            a[r][i] -= 1.0;
            let x_i = inst.dataset().point(i);
            let x_j = inst.dataset().point(j);
            for t in 0..d {
                b[r][i * d + t] = x_i[t] - x_j[t];
            }
        }
    }
    (a, b)
}

/// `A theta + B xi` from the dense matrices.
pub fn dense_row_values(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    theta: &[f64],
    xi: &[f64],
) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(ar, br)| {
            ar.iter().zip(theta).map(|(c, t)| c * t).sum::<f64>()
                + br.iter().zip(xi).map(|(c, t)| c * t).sum::<f64>()
        })
        .collect()
}

/// Brute-force Euclidean projection onto the simplex by enumerating
/// active sets (d <= ~20).
pub fn simplex_projection_oracle(x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << d) {
        let support: Vec<usize> = (0..d).filter(|t| mask >> t & 1 == 1).collect();
        let m = support.len() as f64;
        let sum: f64 = support.iter().map(|&t| x[t]).sum();
        let tau = (sum - 1.0) / m;
        let mut y = vec![0.0; d];
        let mut feasible = true;
        for &t in &support {
            y[t] = x[t] - tau;
            if y[t] < -1e-12 {
                feasible = false;
                break;
            }
        }
        if !feasible {
            continue;
        }
        // KKT: inactive coordinates must not want to enter.
        if (0..d).any(|t| !support.contains(&t) && x[t] - tau > 1e-12) {
            continue;
        }
        let dist: f64 = (0..d).map(|t| (y[t] - x[t]).powi(2)).sum();
        if best.as_ref().map_or(true, |(bd, _)| dist < *bd) {
            best = Some((dist, y));
        }
    }
    best.expect("simplex projection oracle found no feasible active set").1
}

/// Brute-force Euclidean projection onto the l1 ball of radius `l` by
/// enumerating active sets over the sign-folded coordinates.
pub fn l1_projection_oracle(x: &[f64], l: f64) -> Vec<f64> {
    let norm1: f64 = x.iter().map(|v| v.abs()).sum();
    if norm1 <= l {
        return x.to_vec();
    }
    let d = x.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << d) {
        let support: Vec<usize> = (0..d).filter(|t| mask >> t & 1 == 1).collect();
        let m = support.len() as f64;
        let sum: f64 = support.iter().map(|&t| x[t].abs()).sum();
        let shrink = (sum - l) / m;
        if shrink < -1e-12 {
            continue;
        }
        let mut y = vec![0.0; d];
        let mut feasible = true;
        for &t in &support {
            let mag = x[t].abs() - shrink;
            if mag < -1e-12 {
                feasible = false;
                break;
            }
            y[t] = x[t].signum() * mag.max(0.0);
        }
        if !feasible {
            continue;
        }
        if (0..d).any(|t| !support.contains(&t) && x[t].abs() > shrink + 1e-12) {
            continue;
        }
        let dist: f64 = (0..d).map(|t| (y[t] - x[t]).powi(2)).sum();
        if best.as_ref().map_or(true, |(bd, _)| dist < *bd) {
            best = Some((dist, y));
        }
    }
    best.expect("l1 projection oracle found no feasible active set").1
}

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for t in 0..x.len() {
        let orig = xp[t];
        xp[t] = orig + h;
        let fp = f(&xp);
        xp[t] = orig - h;
        let fm = f(&xp);
        xp[t] = orig;
        g[t] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Central finite-difference directional derivative of a vector map.
pub fn fd_directional(
    f: impl Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
    dir: &[f64],
    h: f64,
) -> Vec<f64> {
    let xp: Vec<f64> = x.iter().zip(dir).map(|(a, b)| a + h * b).collect();
    let xm: Vec<f64> = x.iter().zip(dir).map(|(a, b)| a - h * b).collect();
    let fp = f(&xp);
    let fm = f(&xm);
    fp.iter().zip(&fm).map(|(p, m)| (p - m) / (2.0 * h)).collect()
}
