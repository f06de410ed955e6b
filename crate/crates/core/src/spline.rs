//! Bessel cubic-spline operators on a time-to-maturity grid.
//!
//! Every quantity the dynamics needs from an interpolated curve (slopes at
//! the nodes, the polynomial coefficients of each piece, integrals from zero
//! to a node) is a linear function of the node values. This module builds
//! those linear maps once per grid as explicit matrices:
//!
//! * `M`  : first derivative at each node (the Bessel slopes `b_i`),
//! * `M'` : quadratic coefficient `c_h` of each piece,
//! * `M''`: cubic coefficient `d_h` of each piece,
//! * `P`  : integral from `0` to each node, with the curve held flat on `[0, s_1]`.
//!
//! Piece `h` covers `[s_h, s_{h+1}]` and reads
//! `g(x) = a_h + b_h (x - s_h) + c_h (x - s_h)^2 + d_h (x - s_h)^3` with `a_h = g(s_h)`.
//! The first and last pieces are the parabolas through the three end nodes,
//! interior pieces are the Hermite cubics matching the Bessel slopes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when comparing abscissae against grid nodes.
const NODE_TOL: f64 = 1e-12;

/// Strictly increasing, strictly positive time-to-maturity buckets (year fractions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BucketGrid {
    s: Vec<f64>,
}

impl BucketGrid {
    pub fn new(s: Vec<f64>) -> Result<Self> {
        if s.len() < 3 {
            return Err(Error::InvalidGrid(format!(
                "spline needs at least 3 buckets, got {}",
                s.len()
            )));
        }
        if let Some(bad) = s.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(Error::InvalidGrid(format!(
                "buckets must be finite and > 0, found {bad}"
            )));
        }
        if let Some(w) = s.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(format!(
                "buckets must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self { s })
    }

    /// Builds a grid from tenor labels such as `1m`, `1y6m` or `30y`.
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        let s = labels
            .iter()
            .map(|l| crate::curve::tenor_to_years(l.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(s)
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.s
    }

    pub fn first(&self) -> f64 {
        self.s[0]
    }

    pub fn last(&self) -> f64 {
        self.s[self.s.len() - 1]
    }

    /// Index of the node equal to `x` (within `1e-12`), if any.
    pub fn position(&self, x: f64) -> Option<usize> {
        self.s
            .iter()
            .position(|v| (v - x).abs() <= NODE_TOL * v.abs().max(1.0))
    }

    /// Index `h` of the polynomial piece `[s_h, s_{h+1}]` containing `x`,
    /// for `s_1 <= x <= s_K`.
    fn piece(&self, x: f64) -> usize {
        let k = self.s.len();
        match self.s.iter().position(|v| *v > x) {
            Some(0) => 0,
            Some(i) => (i - 1).min(k - 2),
            None => k - 2,
        }
    }
}

impl TryFrom<Vec<f64>> for BucketGrid {
    type Error = Error;

    fn try_from(s: Vec<f64>) -> Result<Self> {
        Self::new(s)
    }
}

impl From<BucketGrid> for Vec<f64> {
    fn from(g: BucketGrid) -> Self {
        g.s
    }
}

/// Polynomial coefficients of the spline through a vector of node values.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineCoefficients {
    pub a: DVector<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub d: DVector<f64>,
}

/// The grid-dependent operator matrices `M`, `M'`, `M''` and `P`.
///
/// Immutable once built; they depend only on the buckets.
#[derive(Debug, Clone)]
pub struct SplineOperators {
    grid: BucketGrid,
    m: DMatrix<f64>,
    mp: DMatrix<f64>,
    mpp: DMatrix<f64>,
    p: DMatrix<f64>,
}

impl SplineOperators {
    pub fn new(grid: &BucketGrid) -> Self {
        let m = build_derivative_matrix(grid);
        let (mp, mpp) = coefficient_matrices(grid, &m);
        let p = integral_rows(grid, &m, &mp, &mpp, grid.as_slice())
            .expect("grid nodes always lie inside the grid");
        Self {
            grid: grid.clone(),
            m,
            mp,
            mpp,
            p,
        }
    }

    pub fn grid(&self) -> &BucketGrid {
        &self.grid
    }

    /// First-derivative operator `M`.
    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// Quadratic-coefficient operator `M'`.
    pub fn mp(&self) -> &DMatrix<f64> {
        &self.mp
    }

    /// Cubic-coefficient operator `M''`.
    pub fn mpp(&self) -> &DMatrix<f64> {
        &self.mpp
    }

    /// Integral operator `P`.
    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn coefficients(&self, g: &DVector<f64>) -> Result<SplineCoefficients> {
        self.check_len(g.len())?;
        Ok(SplineCoefficients {
            a: g.clone(),
            b: &self.m * g,
            c: &self.mp * g,
            d: &self.mpp * g,
        })
    }

    /// Row `r` such that the spline value at `x` equals `r · g`.
    ///
    /// Flat below `s_1`; no extrapolation past `s_K`.
    pub fn evaluation_row(&self, x: f64) -> Result<DVector<f64>> {
        let s = self.grid.as_slice();
        let k = s.len();
        check_abscissa(&self.grid, x)?;
        if x <= s[0] {
            let mut r = DVector::zeros(k);
            r[0] = 1.0;
            return Ok(r);
        }
        let h = self.grid.piece(x);
        let t = x - s[h];
        let mut r: DVector<f64> = self.m.row(h).transpose() * t
            + self.mp.row(h).transpose() * (t * t)
            + self.mpp.row(h).transpose() * (t * t * t);
        r[h] += 1.0;
        Ok(r)
    }

    /// Row `r` such that `∫_0^x g_spline(u) du = r · g`.
    pub fn integral_row(&self, x: f64) -> Result<DVector<f64>> {
        let rows = integral_rows(&self.grid, &self.m, &self.mp, &self.mpp, &[x])?;
        Ok(rows.row(0).transpose())
    }

    pub fn evaluate(&self, g: &DVector<f64>, x: f64) -> Result<f64> {
        self.check_len(g.len())?;
        Ok(self.evaluation_row(x)?.dot(g))
    }

    /// Integral rows against this grid up to every bucket of `other`.
    pub fn cross_integral(&self, other: &BucketGrid) -> Result<DMatrix<f64>> {
        integral_rows(&self.grid, &self.m, &self.mp, &self.mpp, other.as_slice())
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.grid.len() {
            return Err(Error::dim("spline operator", self.grid.len(), n));
        }
        Ok(())
    }
}

/// First-derivative matrix `M`: `(M g)_i` is the Bessel slope `b_i` at `s_i`.
///
/// Rows 1 and K use the one-sided three-point formulas on
/// `(s_1, s_2, s_3)` and `(s_{K-2}, s_{K-1}, s_K)`; interior rows are tridiagonal.
pub fn build_derivative_matrix(grid: &BucketGrid) -> DMatrix<f64> {
    let s = grid.as_slice();
    let k = s.len();
    let mut m = DMatrix::zeros(k, k);

    let (s1, s2, s3) = (s[0], s[1], s[2]);
    m[(0, 0)] = (2.0 * s1 - s3 - s2) / ((s2 - s1) * (s3 - s1));
    m[(0, 1)] = (s3 - s1) / ((s3 - s2) * (s2 - s1));
    m[(0, 2)] = (s1 - s2) / ((s3 - s2) * (s3 - s1));

    for i in 1..k - 1 {
        let (lo, mid, hi) = (s[i - 1], s[i], s[i + 1]);
        m[(i, i - 1)] = (mid - hi) / ((mid - lo) * (hi - lo));
        m[(i, i)] = (lo - 2.0 * mid + hi) / ((mid - lo) * (hi - mid));
        m[(i, i + 1)] = (mid - lo) / ((hi - mid) * (hi - lo));
    }

    let (a, b, c) = (s[k - 3], s[k - 2], s[k - 1]);
    m[(k - 1, k - 3)] = (c - b) / ((b - a) * (c - a));
    m[(k - 1, k - 2)] = (a - c) / ((b - a) * (c - b));
    m[(k - 1, k - 1)] = (2.0 * c - b - a) / ((c - b) * (c - a));
    m
}

/// The coefficient matrices `(M', M'')` for `c_h` and `d_h`, `h = 1..K-1`.
///
/// Row `K` of both is zero (there are only `K-1` pieces); rows 1 and `K-1`
/// of `M''` are zero because the end pieces are parabolas.
pub fn build_c_d_matrices(grid: &BucketGrid) -> (DMatrix<f64>, DMatrix<f64>) {
    coefficient_matrices(grid, &build_derivative_matrix(grid))
}

/// Integral matrix `P`: `(P g)_i = ∫_0^{s_i} g_spline(u) du`.
pub fn build_integral_matrix(grid: &BucketGrid) -> DMatrix<f64> {
    SplineOperators::new(grid).p
}

/// `K_Δ × K` matrix integrating the spline built on `grid_f` from zero up to
/// each bucket of `grid_d`. Buckets of `grid_d` must not exceed the last
/// bucket of `grid_f`.
pub fn build_cross_integral_matrix(
    grid_f: &BucketGrid,
    grid_d: &BucketGrid,
) -> Result<DMatrix<f64>> {
    SplineOperators::new(grid_f).cross_integral(grid_d)
}

fn second_divided_difference_row(s: &[f64], i: usize, j: usize, l: usize, k: usize) -> DVector<f64> {
    let mut r = DVector::zeros(k);
    r[i] = 1.0 / ((s[i] - s[j]) * (s[i] - s[l]));
    r[j] = 1.0 / ((s[j] - s[i]) * (s[j] - s[l]));
    r[l] = 1.0 / ((s[l] - s[i]) * (s[l] - s[j]));
    r
}

fn coefficient_matrices(grid: &BucketGrid, m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let s = grid.as_slice();
    let k = s.len();
    let mut mp = DMatrix::zeros(k, k);
    let mut mpp = DMatrix::zeros(k, k);

    // End pieces: parabolas through the three end nodes, so d = 0 and c is the
    // second divided difference.
    mp.set_row(0, &second_divided_difference_row(s, 0, 1, 2, k).transpose());
    mp.set_row(k - 2, &second_divided_difference_row(s, k - 3, k - 2, k - 1, k).transpose());

    for h in 1..k.saturating_sub(2) {
        let width = s[h + 1] - s[h];
        let mut secant = DVector::zeros(k);
        secant[h] = -1.0 / width;
        secant[h + 1] = 1.0 / width;
        let b_lo = m.row(h).transpose();
        let b_hi = m.row(h + 1).transpose();
        let c = (&secant * 3.0 - &b_lo * 2.0 - &b_hi) / width;
        let d = (&b_lo + &b_hi - &secant * 2.0) / (width * width);
        mp.set_row(h, &c.transpose());
        mpp.set_row(h, &d.transpose());
    }
    (mp, mpp)
}

fn check_abscissa(grid: &BucketGrid, x: f64) -> Result<()> {
    let last = grid.last();
    if !x.is_finite() || x < 0.0 || x > last * (1.0 + NODE_TOL) {
        return Err(Error::InvalidGrid(format!(
            "abscissa {x} outside [0, {last}] (no extrapolation past the last bucket)"
        )));
    }
    Ok(())
}

fn integral_rows(
    grid: &BucketGrid,
    m: &DMatrix<f64>,
    mp: &DMatrix<f64>,
    mpp: &DMatrix<f64>,
    upper: &[f64],
) -> Result<DMatrix<f64>> {
    let s = grid.as_slice();
    let k = s.len();
    let mut out = DMatrix::zeros(upper.len(), k);

    // Integral of each full piece, accumulated once.
    let piece_integral = |h: usize, t: f64| -> DVector<f64> {
        let mut r: DVector<f64> = m.row(h).transpose() * (t * t / 2.0)
            + mp.row(h).transpose() * (t.powi(3) / 3.0)
            + mpp.row(h).transpose() * (t.powi(4) / 4.0);
        r[h] += t;
        r
    };
    let mut cumulative = Vec::with_capacity(k);
    let mut acc = DVector::zeros(k);
    acc[0] = s[0];
    cumulative.push(acc.clone());
    for h in 0..k - 1 {
        acc += piece_integral(h, s[h + 1] - s[h]);
        cumulative.push(acc.clone());
    }

    for (row, &x) in upper.iter().enumerate() {
        check_abscissa(grid, x)?;
        let r = if x <= s[0] {
            let mut r = DVector::zeros(k);
            r[0] = x;
            r
        } else if let Some(node) = grid.position(x) {
            cumulative[node].clone()
        } else {
            let h = grid.piece(x);
            &cumulative[h] + piece_integral(h, x - s[h])
        };
        out.set_row(row, &r.transpose());
    }
    Ok(out)
}
