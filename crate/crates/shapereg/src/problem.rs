//! Problem data and the implicit linear operators of the constrained QP.
//!
//! The fit couples intercepts `theta` (length n) and per-point gradients
//! `xi` (length d*n, block i is the gradient at X_i) through n^2 linear
//! rows: row (i, j) requires `theta_j - theta_i + <xi_i, X_i - X_j> >= 0`.
//! The operators A (rows over theta) and B (rows over xi) are never stored;
//! every routine here streams rows on demand in O(rows * d).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{cast, Real};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("predictor matrix and response length mismatch: X has {x_cols} columns, Y has {y_len} entries")]
    DimensionMismatch { x_cols: usize, y_len: usize },
    #[error("dataset must contain at least one observation")]
    Empty,
    #[error("non-finite value in {place}")]
    NonFinite { place: &'static str },
    #[error("constraint row index out of range: ({i}, {j}) for n = {n}")]
    RowOutOfRange { i: usize, j: usize, n: usize },
    #[error("linear constraint index {k} out of range for n = {n}")]
    IndexOutOfRange { k: usize, n: usize },
    #[error("zero-variance predictor row {row}: standardization undefined")]
    ZeroVarianceRow { row: usize },
    #[error("zero-variance response: standardization undefined")]
    ZeroVarianceResponse,
    #[error("standardization requires at least two observations")]
    TooFewObservations,
    #[error("shape constraint dimension {shape_dim} does not match predictor dimension {d}")]
    ShapeDimensionMismatch { shape_dim: usize, d: usize },
    #[error("invalid shape constraint: {0}")]
    InvalidShape(String),
}

/// Observed predictors and responses.
///
/// `x` is stored column-major: column i (= observation i) occupies
/// `x[i*d..(i+1)*d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F> {
    x: Vec<F>,
    y: Vec<F>,
    d: usize,
    n: usize,
}

impl<F: Real> Dataset<F> {
    pub fn new(x: Vec<F>, y: Vec<F>, d: usize) -> Result<Self, ProblemError> {
        if d == 0 || y.is_empty() {
            return Err(ProblemError::Empty);
        }
        let n = y.len();
        if x.len() != d * n {
            return Err(ProblemError::DimensionMismatch {
                x_cols: x.len() / d,
                y_len: n,
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ProblemError::NonFinite { place: "X" });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(ProblemError::NonFinite { place: "Y" });
        }
        Ok(Self { x, y, d, n })
    }

    /// Builds a dataset from observation rows (each of length d).
    pub fn from_rows(rows: &[Vec<F>], y: Vec<F>) -> Result<Self, ProblemError> {
        if rows.is_empty() {
            return Err(ProblemError::Empty);
        }
        let d = rows[0].len();
        let mut x = Vec::with_capacity(d * rows.len());
        for r in rows {
            if r.len() != d {
                return Err(ProblemError::DimensionMismatch {
                    x_cols: r.len(),
                    y_len: y.len(),
                });
            }
            x.extend_from_slice(r);
        }
        Self::new(x, y, d)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Predictor column i.
    #[inline]
    pub fn point(&self, i: usize) -> &[F] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    pub fn responses(&self) -> &[F] {
        &self.y
    }

    #[inline]
    pub fn predictors(&self) -> &[F] {
        &self.x
    }
}

/// Record of the mean-center + unit-norm transform, sufficient to undo it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationRecord<F> {
    pub row_means: Vec<F>,
    pub row_norms: Vec<F>,
    pub y_mean: F,
    pub y_norm: F,
}

/// Mean-centers each predictor row and the response, then scales each to
/// unit Euclidean norm. Zero-variance rows are rejected.
pub fn standardize<F: Real>(
    dataset: &Dataset<F>,
) -> Result<(Dataset<F>, StandardizationRecord<F>), ProblemError> {
    let (d, n) = (dataset.d, dataset.n);
    if n < 2 {
        return Err(ProblemError::TooFewObservations);
    }
    let nf = cast::<F>(n as f64);
    let mut row_means = vec![F::zero(); d];
    let mut row_norms = vec![F::zero(); d];
    for i in 0..n {
        for (t, &v) in dataset.point(i).iter().enumerate() {
            row_means[t] += v;
        }
    }
    for m in row_means.iter_mut() {
        *m /= nf;
    }
    for i in 0..n {
        for (t, &v) in dataset.point(i).iter().enumerate() {
            let c = v - row_means[t];
            row_norms[t] += c * c;
        }
    }
    for (t, s) in row_norms.iter_mut().enumerate() {
        *s = s.sqrt();
        if *s == F::zero() {
            return Err(ProblemError::ZeroVarianceRow { row: t + 1 });
        }
    }
    let y_mean = dataset.y.iter().copied().sum::<F>() / nf;
    let y_norm = dataset
        .y
        .iter()
        .map(|&v| (v - y_mean) * (v - y_mean))
        .sum::<F>()
        .sqrt();
    if y_norm == F::zero() {
        return Err(ProblemError::ZeroVarianceResponse);
    }

    let mut x = Vec::with_capacity(d * n);
    for i in 0..n {
        for (t, &v) in dataset.point(i).iter().enumerate() {
            x.push((v - row_means[t]) / row_norms[t]);
        }
    }
    let y = dataset.y.iter().map(|&v| (v - y_mean) / y_norm).collect();
    let standardized = Dataset { x, y, d, n };
    Ok((
        standardized,
        StandardizationRecord {
            row_means,
            row_norms,
            y_mean,
            y_norm,
        },
    ))
}

/// Which norm bounds the gradient ball; the conjugate pairing is
/// `One <-> Inf` and `Two <-> Two`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    One,
    Two,
    Inf,
}

impl NormKind {
    /// The Holder-conjugate norm.
    pub fn conjugate(self) -> NormKind {
        match self {
            NormKind::One => NormKind::Inf,
            NormKind::Two => NormKind::Two,
            NormKind::Inf => NormKind::One,
        }
    }

    pub fn eval<F: Real>(self, x: &[F]) -> F {
        match self {
            NormKind::One => x.iter().map(|v| v.abs()).sum(),
            NormKind::Two => crate::la::nrm2(x),
            NormKind::Inf => x.iter().map(|v| v.abs()).fold(F::zero(), F::max),
        }
    }
}

/// The admissible gradient set imposed on every fitted subgradient.
///
/// Coordinate index sets (`increasing` / `decreasing`) are 0-based.
#[derive(Debug, Clone, PartialEq)]
pub enum ShapeConstraint<F> {
    /// No restriction: gradients range over all of R^d.
    NoShape,
    /// Non-decreasing in `increasing` coordinates, non-increasing in
    /// `decreasing` ones; the two sets must be disjoint.
    Monotone {
        increasing: Vec<usize>,
        decreasing: Vec<usize>,
    },
    /// Componentwise bounds `lower <= g <= upper`; entries may be infinite.
    Box { lower: Vec<F>, upper: Vec<F> },
    /// Uniform norm ball `||g||_q <= radius`.
    LipschitzBall { q: NormKind, radius: F },
    /// Per-observation norm balls `||g_i||_q <= radii[i]`.
    PerPointBall { q: NormKind, radii: Vec<F> },
}

impl<F: Real> ShapeConstraint<F> {
    /// Validates internal consistency against predictor dimension `d` and
    /// sample count `n`.
    pub fn validate(&self, d: usize, n: usize) -> Result<(), ProblemError> {
        match self {
            ShapeConstraint::NoShape => Ok(()),
            ShapeConstraint::Monotone {
                increasing,
                decreasing,
            } => {
                for &t in increasing.iter().chain(decreasing) {
                    if t >= d {
                        return Err(ProblemError::ShapeDimensionMismatch { shape_dim: t + 1, d });
                    }
                }
                if increasing.iter().any(|t| decreasing.contains(t)) {
                    return Err(ProblemError::InvalidShape(
                        "monotone index sets overlap".into(),
                    ));
                }
                Ok(())
            }
            ShapeConstraint::Box { lower, upper } => {
                if lower.len() != d || upper.len() != d {
                    return Err(ProblemError::ShapeDimensionMismatch {
                        shape_dim: lower.len().max(upper.len()),
                        d,
                    });
                }
                for (l, u) in lower.iter().zip(upper) {
                    if l.is_nan() || u.is_nan() || *l > *u {
                        return Err(ProblemError::InvalidShape(
                            "box bounds must satisfy L <= U".into(),
                        ));
                    }
                }
                Ok(())
            }
            ShapeConstraint::LipschitzBall { radius, .. } => {
                if !(*radius > F::zero()) || !radius.is_finite() {
                    return Err(ProblemError::InvalidShape(
                        "Lipschitz radius must be finite and positive".into(),
                    ));
                }
                Ok(())
            }
            ShapeConstraint::PerPointBall { radii, .. } => {
                if radii.len() != n {
                    return Err(ProblemError::InvalidShape(format!(
                        "per-point radii count {} does not match n = {}",
                        radii.len(),
                        n
                    )));
                }
                if radii.iter().any(|r| !(*r > F::zero()) || !r.is_finite()) {
                    return Err(ProblemError::InvalidShape(
                        "per-point radii must be finite and positive".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// 1-based bijection between a constraint row pair and its linear index:
/// `k = (i - 1) * n + j`. This ordering is the frozen wire format for
/// reports and traces; internal loops use 0-based rows `r = i0 * n + j0`.
pub fn linear_index(i: usize, j: usize, n: usize) -> Result<usize, ProblemError> {
    if i == 0 || j == 0 || i > n || j > n {
        return Err(ProblemError::RowOutOfRange { i, j, n });
    }
    Ok((i - 1) * n + j)
}

/// Inverse of [`linear_index`].
pub fn pair_from_index(k: usize, n: usize) -> Result<(usize, usize), ProblemError> {
    if k == 0 || k > n * n {
        return Err(ProblemError::IndexOutOfRange { k, n });
    }
    let r = k - 1;
    Ok((r / n + 1, r % n + 1))
}

/// Which constraint rows participate in a solve: everything, or a sorted
/// working subset (stored per block to keep row streams cache-friendly).
#[derive(Debug, Clone)]
pub enum ActiveSet {
    Full,
    Reduced(RowSet),
}

impl ActiveSet {
    pub fn len(&self, n: usize) -> usize {
        match self {
            ActiveSet::Full => n * n,
            ActiveSet::Reduced(rs) => rs.len(),
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self, ActiveSet::Full)
    }
}

/// Sorted set of 0-based constraint rows grouped by block (= constraint
/// source point i). `cols[block_ptr[i]..block_ptr[i+1]]` lists the j's of
/// block i in increasing order.
#[derive(Debug, Clone, Default)]
pub struct RowSet {
    pub cols: Vec<u32>,
    pub block_ptr: Vec<usize>,
}

impl RowSet {
    /// Builds from 0-based row ids `r = i*n + j`; sorts and deduplicates.
    pub fn from_rows(mut rows: Vec<usize>, n: usize) -> Self {
        rows.sort_unstable();
        rows.dedup();
        let mut cols = Vec::with_capacity(rows.len());
        let mut block_ptr = vec![0usize; n + 1];
        for r in rows {
            let i = r / n;
            debug_assert!(i < n);
            block_ptr[i + 1] += 1;
            cols.push((r % n) as u32);
        }
        for i in 0..n {
            block_ptr[i + 1] += block_ptr[i];
        }
        Self { cols, block_ptr }
    }

    pub fn len(&self) -> usize {
        self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }

    pub fn n_blocks(&self) -> usize {
        self.block_ptr.len().saturating_sub(1)
    }

    /// Column indices of block i.
    #[inline]
    pub fn block(&self, i: usize) -> &[u32] {
        &self.cols[self.block_ptr[i]..self.block_ptr[i + 1]]
    }

    /// 0-based row ids in increasing order.
    pub fn iter_rows(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_blocks()).flat_map(move |i| self.block(i).iter().map(move |&j| i * n + j as usize))
    }

    /// Merges another sorted row set into this one (union).
    pub fn union_with(&self, other: &RowSet) -> RowSet {
        let n = self.n_blocks();
        debug_assert_eq!(n, other.n_blocks());
        let mut cols = Vec::with_capacity(self.len() + other.len());
        let mut block_ptr = vec![0usize; n + 1];
        for i in 0..n {
            let (a, b) = (self.block(i), other.block(i));
            let (mut p, mut q) = (0, 0);
            while p < a.len() || q < b.len() {
                let next = match (a.get(p), b.get(q)) {
                    (Some(&x), Some(&y)) => {
                        if x < y {
                            p += 1;
                            x
                        } else if y < x {
                            q += 1;
                            y
                        } else {
                            p += 1;
                            q += 1;
                            x
                        }
                    }
                    (Some(&x), None) => {
                        p += 1;
                        x
                    }
                    (None, Some(&y)) => {
                        q += 1;
                        y
                    }
                    (None, None) => unreachable!(),
                };
                cols.push(next);
            }
            block_ptr[i + 1] = cols.len();
        }
        RowSet { cols, block_ptr }
    }
}

/// A dataset paired with its shape constraint; immutable once built and
/// freely shareable across threads.
#[derive(Debug, Clone)]
pub struct ProblemInstance<F> {
    dataset: Dataset<F>,
    shape: ShapeConstraint<F>,
    standardization: Option<StandardizationRecord<F>>,
}

impl<F: Real> ProblemInstance<F> {
    pub fn new(dataset: Dataset<F>, shape: ShapeConstraint<F>) -> Result<Self, ProblemError> {
        shape.validate(dataset.dim(), dataset.len())?;
        Ok(Self {
            dataset,
            shape,
            standardization: None,
        })
    }

    /// Standardizes the data first (mean-center, unit norm) and keeps the
    /// record for later de-standardization.
    pub fn new_standardized(
        dataset: Dataset<F>,
        shape: ShapeConstraint<F>,
    ) -> Result<Self, ProblemError> {
        shape.validate(dataset.dim(), dataset.len())?;
        let (std_data, record) = standardize(&dataset)?;
        Ok(Self {
            dataset: std_data,
            shape,
            standardization: Some(record),
        })
    }

    #[inline]
    pub fn dataset(&self) -> &Dataset<F> {
        &self.dataset
    }

    #[inline]
    pub fn shape(&self) -> &ShapeConstraint<F> {
        &self.shape
    }

    #[inline]
    pub fn standardization(&self) -> Option<&StandardizationRecord<F>> {
        self.standardization.as_ref()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dataset.dim()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    /// Slack of row (i0, j0), 0-based: `theta_j - theta_i + <xi_i, X_i - X_j>`.
    #[inline]
    pub fn row_value(&self, theta: &[F], xi: &[F], i0: usize, j0: usize) -> F {
        let d = self.dim();
        let xi_i = &xi[i0 * d..(i0 + 1) * d];
        let x_i = self.dataset.point(i0);
        let x_j = self.dataset.point(j0);
        let mut acc = theta[j0] - theta[i0];
        for t in 0..d {
            acc += xi_i[t] * (x_i[t] - x_j[t]);
        }
        acc
    }

    /// Evaluates `(A theta + B xi)` on an explicit sorted list of 0-based
    /// rows. Cost O(|rows| * d).
    pub fn constraint_values(
        &self,
        theta: &[F],
        xi: &[F],
        rows: &[usize],
    ) -> Result<Vec<F>, ProblemError> {
        let n = self.len();
        let mut out = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= n * n {
                return Err(ProblemError::IndexOutOfRange { k: r + 1, n });
            }
            out.push(self.row_value(theta, xi, r / n, r % n));
        }
        Ok(out)
    }

    /// Streams slack values for every row of the active set, block by
    /// block, without materializing an n^2 vector. The callback receives
    /// `(block, cols, values)` where `values[t]` is the slack of row
    /// `(block, cols[t])`.
    pub fn for_each_slack_block(
        &self,
        theta: &[F],
        xi: &[F],
        active: &ActiveSet,
        mut f: impl FnMut(usize, &[u32], &[F]),
    ) {
        let n = self.len();
        let d = self.dim();
        let mut vals = vec![F::zero(); n];
        let mut all_cols: Vec<u32> = Vec::new();
        if active.is_full() {
            all_cols = (0..n as u32).collect();
        }
        for i in 0..n {
            let cols: &[u32] = match active {
                ActiveSet::Full => &all_cols,
                ActiveSet::Reduced(rs) => rs.block(i),
            };
            if cols.is_empty() {
                continue;
            }
            let xi_i = &xi[i * d..(i + 1) * d];
            let x_i = self.dataset.point(i);
            let base = dot_point(xi_i, x_i) - theta[i];
            for (t, &jc) in cols.iter().enumerate() {
                let j = jc as usize;
                vals[t] = base + theta[j] - dot_point(xi_i, self.dataset.point(j));
            }
            f(i, cols, &vals[..cols.len()]);
        }
    }

    /// Adjoint scatter: accumulates `A^T u` into `at_u` (length n) and
    /// `B^T u` into `bt_u` (length d*n) for `u` supported on `rows`.
    ///
    /// Row (i, j) contributes `+u` to `at_u[j]`, `-u` to `at_u[i]`, and
    /// `u * (X_i - X_j)` to block i of `bt_u`.
    pub fn adjoint_scatter(
        &self,
        rows: impl Iterator<Item = (usize, usize, F)>,
        at_u: &mut [F],
        bt_u: &mut [F],
    ) {
        let d = self.dim();
        debug_assert_eq!(at_u.len(), self.len());
        debug_assert_eq!(bt_u.len(), d * self.len());
        for (i, j, u) in rows {
            if u == F::zero() {
                continue;
            }
            at_u[j] += u;
            at_u[i] -= u;
            let x_i = self.dataset.point(i);
            let x_j = self.dataset.point(j);
            let block = &mut bt_u[i * d..(i + 1) * d];
            for t in 0..d {
                block[t] += u * (x_i[t] - x_j[t]);
            }
        }
    }
}

#[inline]
fn dot_point<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for t in 0..a.len() {
        acc += a[t] * b[t];
    }
    acc
}
