//! Spline bases shared by the exposure and outcome models.
//!
//! Three families are provided:
//!
//! * plain B-splines evaluated with the Cox–de Boor recursion, boundary knots
//!   repeated `degree + 1` times;
//! * natural cubic splines with the intercept removed and every column
//!   centered over a construction grid (used for smooth time trends);
//! * I-splines, the running sums of B-splines, which are non-decreasing and
//!   take values in `[0, 1]` (used for the exposure-response curve).

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("degenerate knots: all values are identical ({0})")]
    DegenerateKnots(f64),
    #[error("invalid knots: {0}")]
    InvalidKnots(String),
    #[error("x = {x} lies outside the basis domain [{lower}, {upper}]")]
    OutOfDomain { x: f64, lower: f64, upper: f64 },
    #[error("basis configuration error: {0}")]
    Config(String),
}

/// Boundary and interior knots of a spline basis.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotSet {
    lower: f64,
    upper: f64,
    interior: Vec<f64>,
}

impl KnotSet {
    pub fn new(lower: f64, upper: f64, interior: Vec<f64>) -> Result<Self, SplineError> {
        if !(lower.is_finite() && upper.is_finite()) {
            return Err(SplineError::InvalidKnots("boundary knots must be finite".into()));
        }
        if lower >= upper {
            return Err(SplineError::InvalidKnots(format!(
                "lower boundary {lower} must be below upper boundary {upper}"
            )));
        }
        for w in interior.windows(2) {
            if w[0] >= w[1] {
                return Err(SplineError::InvalidKnots(format!(
                    "interior knots must be strictly increasing ({} >= {})",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&k) = interior.iter().find(|&&k| !(k > lower && k < upper)) {
            return Err(SplineError::InvalidKnots(format!(
                "interior knot {k} is not strictly inside ({lower}, {upper})"
            )));
        }
        Ok(Self { lower, upper, interior })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn interior(&self) -> &[f64] {
        &self.interior
    }

    /// Knot vector with each boundary knot repeated `order` times.
    fn extended(&self, order: usize) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.interior.len() + 2 * order);
        t.extend(std::iter::repeat_n(self.lower, order));
        t.extend_from_slice(&self.interior);
        t.extend(std::iter::repeat_n(self.upper, order));
        t
    }

    fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    BSpline,
    NaturalCubicCentered,
    ISpline,
}

/// Dense row-major basis evaluation.
#[derive(Debug, Clone)]
pub struct BasisMatrix {
    values: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
    knots: KnotSet,
    kind: BasisKind,
    /// Polynomial order (degree + 1) of the basis pieces.
    order: usize,
}

impl BasisMatrix {
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &KnotSet {
        &self.knots
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_cols + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_cols.max(1)).take(self.n_rows)
    }
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Boundary at the data range, interior knots at equally spaced quantiles.
pub fn quantile_knots(values: &[f64], n_interior: usize) -> Result<KnotSet, SplineError> {
    if values.is_empty() {
        return Err(SplineError::InvalidKnots("no values to place knots".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SplineError::InvalidKnots("non-finite value".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lower, upper) = (sorted[0], sorted[sorted.len() - 1]);
    if lower == upper {
        return Err(SplineError::DegenerateKnots(lower));
    }
    let mut interior: Vec<f64> = (1..=n_interior)
        .map(|k| quantile_sorted(&sorted, k as f64 / (n_interior + 1) as f64))
        .filter(|&q| q > lower && q < upper)
        .collect();
    interior.dedup();
    KnotSet::new(lower, upper, interior)
}

/// Index `i` of the non-empty knot interval `[t_i, t_{i+1})` containing `x`.
/// The right end of the domain belongs to the last non-empty interval.
fn find_span(t: &[f64], x: f64) -> usize {
    let last = t.len() - 1;
    let mut span = 0;
    for i in 0..last {
        if t[i] < t[i + 1] {
            if x >= t[i] {
                span = i;
            }
            if x < t[i + 1] {
                break;
            }
        }
    }
    span
}

/// All `t.len() - order` B-spline values of the given order at `x`.
fn bspline_values(t: &[f64], order: usize, x: f64) -> Vec<f64> {
    let m = t.len();
    let mut b = vec![0.0; m - 1];
    b[find_span(t, x)] = 1.0;
    for k in 2..=order {
        for i in 0..m - k {
            let mut v = 0.0;
            let d1 = t[i + k - 1] - t[i];
            if d1 > 0.0 {
                v += (x - t[i]) / d1 * b[i];
            }
            let d2 = t[i + k] - t[i + 1];
            if d2 > 0.0 {
                v += (t[i + k] - x) / d2 * b[i + 1];
            }
            b[i] = v;
        }
    }
    b.truncate(m - order);
    b
}

/// `nderiv`-th derivative of every B-spline of the given order at `x`.
fn bspline_derivs(t: &[f64], order: usize, x: f64, nderiv: usize) -> Vec<f64> {
    if nderiv == 0 {
        return bspline_values(t, order, x);
    }
    if order == 1 {
        return vec![0.0; t.len() - 1];
    }
    let lower = bspline_derivs(t, order - 1, x, nderiv - 1);
    let k = order;
    let n = t.len() - order;
    let scale = (k - 1) as f64;
    (0..n)
        .map(|i| {
            let mut d = 0.0;
            let d1 = t[i + k - 1] - t[i];
            if d1 > 0.0 {
                d += lower[i] / d1;
            }
            let d2 = t[i + k] - t[i + 1];
            if d2 > 0.0 {
                d -= lower[i + 1] / d2;
            }
            scale * d
        })
        .collect()
}

/// B-spline basis of the given degree. Points outside the boundary are rejected.
pub fn bspline_basis(x: &[f64], degree: usize, knots: &KnotSet) -> Result<BasisMatrix, SplineError> {
    let order = degree + 1;
    let t = knots.extended(order);
    let n_cols = t.len() - order;
    let mut values = Vec::with_capacity(x.len() * n_cols);
    for &xi in x {
        if !knots.contains(xi) {
            return Err(SplineError::OutOfDomain { x: xi, lower: knots.lower, upper: knots.upper });
        }
        values.extend(bspline_values(&t, order, xi));
    }
    Ok(BasisMatrix {
        values,
        n_rows: x.len(),
        n_cols,
        knots: knots.clone(),
        kind: BasisKind::BSpline,
        order,
    })
}

/// Natural cubic spline basis without intercept, columns centered over the
/// grid given at construction. Linear beyond the boundary knots.
#[derive(Debug, Clone)]
pub struct NaturalCubicBasis {
    knots: KnotSet,
    ext: Vec<f64>,
    /// `p x df` projection onto the natural-constraint null space, row-major.
    projection: Vec<f64>,
    df: usize,
    centers: Vec<f64>,
    lower_value: Vec<f64>,
    lower_slope: Vec<f64>,
    upper_value: Vec<f64>,
    upper_slope: Vec<f64>,
}

impl NaturalCubicBasis {
    /// `knots` must carry exactly `df - 1` interior knots.
    pub fn new(grid: &[f64], df: usize, knots: &KnotSet) -> Result<Self, SplineError> {
        if df == 0 {
            return Err(SplineError::Config("natural spline df must be at least 1".into()));
        }
        if knots.interior.len() + 1 != df {
            return Err(SplineError::Config(format!(
                "natural spline with df = {df} needs {} interior knots, got {}",
                df - 1,
                knots.interior.len()
            )));
        }
        if grid.is_empty() {
            return Err(SplineError::Config("empty centering grid".into()));
        }
        let ext = knots.extended(4);
        // Intercept removed: the first cubic B-spline is dropped.
        let p = ext.len() - 4 - 1;
        let c_lo = bspline_derivs(&ext, 4, knots.lower, 2)[1..].to_vec();
        let c_hi = bspline_derivs(&ext, 4, knots.upper, 2)[1..].to_vec();
        let null = null_space_complement(&[c_lo, c_hi], p);
        debug_assert_eq!(null.len(), df);
        let mut projection = vec![0.0; p * df];
        for (j, v) in null.iter().enumerate() {
            for i in 0..p {
                projection[i * df + j] = v[i];
            }
        }
        let mut basis = Self {
            knots: knots.clone(),
            ext,
            projection,
            df,
            centers: vec![0.0; df],
            lower_value: Vec::new(),
            lower_slope: Vec::new(),
            upper_value: Vec::new(),
            upper_slope: Vec::new(),
        };
        basis.lower_value = basis.project(&bspline_values(&basis.ext, 4, knots.lower));
        basis.lower_slope = basis.project(&bspline_derivs(&basis.ext, 4, knots.lower, 1));
        basis.upper_value = basis.project(&bspline_values(&basis.ext, 4, knots.upper));
        basis.upper_slope = basis.project(&bspline_derivs(&basis.ext, 4, knots.upper, 1));

        let mut centers = vec![0.0; df];
        for &g in grid {
            for (c, v) in centers.iter_mut().zip(basis.raw_row(g)) {
                *c += v;
            }
        }
        centers.iter_mut().for_each(|c| *c /= grid.len() as f64);
        basis.centers = centers;
        Ok(basis)
    }

    pub fn df(&self) -> usize {
        self.df
    }

    pub fn knots(&self) -> &KnotSet {
        &self.knots
    }

    fn project(&self, full: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.df];
        for (i, &b) in full[1..].iter().enumerate() {
            if b != 0.0 {
                let row = &self.projection[i * self.df..(i + 1) * self.df];
                for (o, &z) in out.iter_mut().zip(row) {
                    *o += b * z;
                }
            }
        }
        out
    }

    fn raw_row(&self, x: f64) -> Vec<f64> {
        if x < self.knots.lower {
            let dx = x - self.knots.lower;
            self.lower_value.iter().zip(&self.lower_slope).map(|(v, s)| v + dx * s).collect()
        } else if x > self.knots.upper {
            let dx = x - self.knots.upper;
            self.upper_value.iter().zip(&self.upper_slope).map(|(v, s)| v + dx * s).collect()
        } else {
            self.project(&bspline_values(&self.ext, 4, x))
        }
    }

    /// Centered basis row at `x`.
    pub fn row(&self, x: f64) -> Vec<f64> {
        let mut r = self.raw_row(x);
        r.iter_mut().zip(&self.centers).for_each(|(v, c)| *v -= c);
        r
    }

    pub fn evaluate(&self, x: &[f64]) -> BasisMatrix {
        let mut values = Vec::with_capacity(x.len() * self.df);
        for &xi in x {
            values.extend(self.row(xi));
        }
        BasisMatrix {
            values,
            n_rows: x.len(),
            n_cols: self.df,
            knots: self.knots.clone(),
            kind: BasisKind::NaturalCubicCentered,
            order: 4,
        }
    }
}

/// Orthonormal basis of the complement of `span(constraints)` in R^p.
fn null_space_complement(constraints: &[Vec<f64>], p: usize) -> Vec<Vec<f64>> {
    fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
        for _ in 0..2 {
            for b in basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
    }
    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    let mut ortho: Vec<Vec<f64>> = Vec::new();
    for c in constraints {
        let mut v = c.clone();
        orthogonalize(&mut v, &ortho);
        let n = norm(&v);
        if n > 1e-10 {
            v.iter_mut().for_each(|x| *x /= n);
            ortho.push(v);
        }
    }
    let n_constraints = ortho.len();
    for e in 0..p {
        if ortho.len() == p {
            break;
        }
        let mut v = vec![0.0; p];
        v[e] = 1.0;
        orthogonalize(&mut v, &ortho);
        let n = norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            ortho.push(v);
        }
    }
    ortho.split_off(n_constraints)
}

/// Convenience wrapper: construct on `x` and evaluate on the same points.
pub fn natural_cubic_centered(x: &[f64], df: usize, knots: &KnotSet) -> Result<BasisMatrix, SplineError> {
    Ok(NaturalCubicBasis::new(x, df, knots)?.evaluate(x))
}

/// Monotone I-spline basis.
///
/// `order` is the polynomial order of the I-spline pieces; each function is
/// the integral of a normalized M-spline of order `order - 1`. There are
/// `n_interior + order - 1` functions. Outside the boundary knots rows are
/// clamped to all zeros (below) or all ones (above).
#[derive(Debug, Clone)]
pub struct ISplineBasis {
    knots: KnotSet,
    ext: Vec<f64>,
    order: usize,
    n_basis: usize,
}

impl ISplineBasis {
    pub fn new(order: usize, knots: &KnotSet) -> Result<Self, SplineError> {
        if order == 0 {
            return Err(SplineError::Config("I-spline order must be at least 1".into()));
        }
        let ext = knots.extended(order);
        let n_basis = ext.len() - order - 1;
        Ok(Self { knots: knots.clone(), ext, order, n_basis })
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &KnotSet {
        &self.knots
    }

    pub fn row_into(&self, x: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_basis);
        if x <= self.knots.lower {
            out.fill(0.0);
            return;
        }
        if x >= self.knots.upper {
            out.fill(1.0);
            return;
        }
        let span = find_span(&self.ext, x);
        let b = bspline_values(&self.ext, self.order, x);
        // Only b[span + 1 - order..=span] is non-zero; outside that window the
        // running sum is exactly 0 or 1.
        let first = span + 1 - self.order;
        let mut acc = 0.0;
        for j in (0..self.n_basis).rev() {
            out[j] = if j + 1 > span {
                0.0
            } else if j < first {
                1.0
            } else {
                acc += b[j + 1];
                acc.clamp(0.0, 1.0)
            };
        }
    }

    pub fn row(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_basis];
        self.row_into(x, &mut out);
        out
    }

    pub fn evaluate(&self, x: &[f64]) -> BasisMatrix {
        let mut values = vec![0.0; x.len() * self.n_basis];
        if self.n_basis > 0 {
            for (xi, out) in x.iter().zip(values.chunks_mut(self.n_basis)) {
                self.row_into(*xi, out);
            }
        }
        BasisMatrix {
            values,
            n_rows: x.len(),
            n_cols: self.n_basis,
            knots: self.knots.clone(),
            kind: BasisKind::ISpline,
            order: self.order,
        }
    }
}

pub fn ispline_basis(x: &[f64], order: usize, knots: &KnotSet) -> Result<BasisMatrix, SplineError> {
    Ok(ISplineBasis::new(order, knots)?.evaluate(x))
}
