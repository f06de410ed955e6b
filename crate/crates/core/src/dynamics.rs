//! Discrete VAR(1) form of the joint forward/FRA dynamics.
//!
//! The state stacks the discount forwards `f` (K buckets) and one FRA vector
//! per tenor curve (`K_Δ` buckets each), `D = K + Σ K_Δ` in total. One step is
//! `x' = A x + μ dt + Σ ε √dt` with `A = I + M dt` block by block.

use chrono::NaiveDate;
use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spline::{BucketGrid, SplineOperators};

/// Above this spectral radius the transition is flagged as explosive.
pub const SPECTRAL_RADIUS_WARN: f64 = 1.05;

/// Eigenvalue floor used when a correlation matrix has to be repaired.
pub const CORRELATION_EIGEN_FLOOR: f64 = 1e-10;

/// A tenor curve of the system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TenorSpec {
    pub curve_id: String,
    /// Accrual length Δ in years.
    pub tenor: f64,
    pub grid: BucketGrid,
}

/// Block of the state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Discount,
    Tenor(usize),
}

/// Grids, operators and transition matrices of a discount curve plus tenor curves.
#[derive(Debug, Clone)]
pub struct CurveSystem {
    discount_id: String,
    dt: f64,
    grids: Vec<BucketGrid>,
    tenors: Vec<TenorSpec>,
    ops: Vec<SplineOperators>,
    cross_p: Vec<DMatrix<f64>>,
    transitions: Vec<DMatrix<f64>>,
    offsets: Vec<usize>,
    stacked_p: DMatrix<f64>,
    spectral_radius: Vec<f64>,
}

impl CurveSystem {
    pub fn new(
        discount_id: impl Into<String>,
        discount_grid: BucketGrid,
        tenors: Vec<TenorSpec>,
        dt: f64,
    ) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
        }
        let discount_ops = SplineOperators::new(&discount_grid);
        let mut grids = vec![discount_grid.clone()];
        let mut ops = vec![discount_ops.clone()];
        let mut cross_p = Vec::with_capacity(tenors.len());
        for t in &tenors {
            if !(t.tenor > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "tenor of curve {} must be > 0",
                    t.curve_id
                )));
            }
            if t.grid.first() < t.tenor * (1.0 - 1e-12) {
                return Err(Error::InvalidGrid(format!(
                    "curve {}: bucket {} shorter than its tenor {}",
                    t.curve_id,
                    t.grid.first(),
                    t.tenor
                )));
            }
            cross_p.push(discount_ops.cross_integral(&t.grid)?);
            grids.push(t.grid.clone());
            ops.push(SplineOperators::new(&t.grid));
        }

        let mut offsets = vec![0];
        for g in &grids {
            offsets.push(offsets.last().unwrap() + g.len());
        }
        let d = *offsets.last().unwrap();
        let k = discount_grid.len();

        let mut stacked_p = DMatrix::zeros(d, d);
        stacked_p.view_mut((0, 0), (k, k)).copy_from(discount_ops.p());
        for (j, cp) in cross_p.iter().enumerate() {
            stacked_p
                .view_mut((offsets[j + 1], 0), (cp.nrows(), k))
                .copy_from(cp);
        }

        let transitions: Vec<DMatrix<f64>> = ops
            .iter()
            .map(|o| DMatrix::identity(o.len(), o.len()) + o.m() * dt)
            .collect();
        let spectral_radius: Vec<f64> = transitions.iter().map(spectral_radius).collect();
        for (i, r) in spectral_radius.iter().enumerate() {
            debug!("transition block {i}: spectral radius {r:.9}");
            if *r > SPECTRAL_RADIUS_WARN {
                warn!("transition block {i} has spectral radius {r:.6} > {SPECTRAL_RADIUS_WARN}");
            }
        }

        Ok(Self {
            discount_id: discount_id.into(),
            dt,
            grids,
            tenors,
            ops,
            cross_p,
            transitions,
            offsets,
            stacked_p,
            spectral_radius,
        })
    }

    pub fn discount_id(&self) -> &str {
        &self.discount_id
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Total state dimension `D`.
    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Number of discount buckets `K`.
    pub fn k(&self) -> usize {
        self.grids[0].len()
    }

    pub fn n_blocks(&self) -> usize {
        self.grids.len()
    }

    pub fn tenors(&self) -> &[TenorSpec] {
        &self.tenors
    }

    pub fn discount_grid(&self) -> &BucketGrid {
        &self.grids[0]
    }

    fn index(&self, block: Block) -> Result<usize> {
        match block {
            Block::Discount => Ok(0),
            Block::Tenor(j) if j < self.tenors.len() => Ok(j + 1),
            Block::Tenor(j) => Err(Error::InvalidParameter(format!(
                "unknown tenor block {j} (system has {})",
                self.tenors.len()
            ))),
        }
    }

    pub fn block_at(&self, i: usize) -> Block {
        if i == 0 {
            Block::Discount
        } else {
            Block::Tenor(i - 1)
        }
    }

    pub fn grid(&self, block: Block) -> Result<&BucketGrid> {
        Ok(&self.grids[self.index(block)?])
    }

    pub fn ops(&self, block: Block) -> Result<&SplineOperators> {
        Ok(&self.ops[self.index(block)?])
    }

    /// Index range of a block inside the stacked state.
    pub fn range(&self, block: Block) -> Result<std::ops::Range<usize>> {
        let i = self.index(block)?;
        Ok(self.offsets[i]..self.offsets[i + 1])
    }

    /// `I + M dt` for one block.
    pub fn transition_matrix(&self, block: Block) -> Result<&DMatrix<f64>> {
        Ok(&self.transitions[self.index(block)?])
    }

    /// Largest eigenvalue modulus of a block's transition.
    pub fn spectral_radius(&self, block: Block) -> Result<f64> {
        Ok(self.spectral_radius[self.index(block)?])
    }

    /// Block-diagonal `D × D` transition.
    pub fn full_transition(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut a = DMatrix::zeros(d, d);
        for (i, t) in self.transitions.iter().enumerate() {
            let o = self.offsets[i];
            a.view_mut((o, o), t.shape()).copy_from(t);
        }
        a
    }

    /// `K_Δ × K` integral matrix of the discount spline up to the tenor buckets.
    pub fn cross_integral(&self, tenor: usize) -> Result<&DMatrix<f64>> {
        self.cross_p.get(tenor).ok_or_else(|| {
            Error::InvalidParameter(format!("unknown tenor block {tenor}"))
        })
    }

    /// Stacked `D × D` integral matrix; tenor rows integrate the discount
    /// spline, columns past `K` are zero.
    pub fn stacked_p(&self) -> &DMatrix<f64> {
        &self.stacked_p
    }

    /// `A x` computed block by block.
    pub fn propagate(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(x.len());
        for (i, t) in self.transitions.iter().enumerate() {
            let r = self.offsets[i]..self.offsets[i + 1];
            let v = t * x.rows(r.start, r.len());
            out.rows_mut(r.start, r.len()).copy_from(&v);
        }
        out
    }

    fn check_dim(&self, context: &'static str, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::dim(context, self.dim(), n));
        }
        Ok(())
    }
}

fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if let Some(schur) = a.clone().try_schur(1e-14, 10_000) {
        return schur
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
    }
    // Gelfand estimate ‖A^(2^J)‖^(2^-J) by normalised repeated squaring.
    let mut b = a.clone();
    let mut log_norm = 0.0;
    const SQUARINGS: i32 = 12;
    for _ in 0..SQUARINGS {
        let n = b.norm();
        if n == 0.0 {
            return 0.0;
        }
        b /= n;
        log_norm = 2.0 * (log_norm + n.ln());
        b = &b * &b;
    }
    ((log_norm + b.norm().ln()) / 2f64.powi(SQUARINGS)).exp()
}

/// Assignment of the D risk-premium components to step-wise constant blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaBlocks {
    names: Vec<String>,
    assignment: Vec<usize>,
}

impl LambdaBlocks {
    /// `λ_s` on the `k_short` shortest discount buckets, `λ_l` on the rest of the
    /// discount curve, one component per tenor curve.
    pub fn standard(sys: &CurveSystem, k_short: usize) -> Result<Self> {
        let k = sys.k();
        if k_short == 0 || k_short >= k {
            return Err(Error::InvalidParameter(format!(
                "short block size must lie in 1..{k}, got {k_short}"
            )));
        }
        let mut names = vec!["lambda_s".to_string(), "lambda_l".to_string()];
        let mut assignment: Vec<usize> = (0..k).map(|i| usize::from(i >= k_short)).collect();
        for (j, t) in sys.tenors().iter().enumerate() {
            names.push(format!("lambda_{}", t.curve_id));
            assignment.extend(std::iter::repeat_n(j + 2, t.grid.len()));
        }
        Ok(Self { names, assignment })
    }

    /// Arbitrary assignment; every block index in `0..names.len()` must be used.
    pub fn new(names: Vec<String>, assignment: Vec<usize>) -> Result<Self> {
        for b in 0..names.len() {
            if !assignment.contains(&b) {
                return Err(Error::InvalidParameter(format!("lambda block {b} is empty")));
            }
        }
        if let Some(b) = assignment.iter().find(|b| **b >= names.len()) {
            return Err(Error::InvalidParameter(format!("lambda block {b} has no name")));
        }
        Ok(Self { names, assignment })
    }

    pub fn n_blocks(&self) -> usize {
        self.names.len()
    }

    pub fn dim(&self) -> usize {
        self.assignment.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn members(&self, block: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter(move |(_, b)| **b == block)
            .map(|(i, _)| i)
    }

    /// Block values to a D-vector.
    pub fn expand(&self, values: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.assignment.iter().map(|b| values[*b]))
    }

    /// Least-squares projection of a D-vector onto the block structure
    /// (block means).
    pub fn project(&self, full: &DVector<f64>) -> DVector<f64> {
        let mut sum = DVector::zeros(self.n_blocks());
        let mut count = vec![0usize; self.n_blocks()];
        for (i, b) in self.assignment.iter().enumerate() {
            sum[*b] += full[i];
            count[*b] += 1;
        }
        for (b, c) in count.iter().enumerate() {
            sum[b] /= *c as f64;
        }
        sum
    }
}

/// Symmetrises a correlation matrix and, if it is not positive definite,
/// clips its eigenvalues at [`CORRELATION_EIGEN_FLOOR`] and rescales to unit diagonal.
pub fn repair_correlation(gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !gamma.is_square() {
        return Err(Error::dim("correlation", gamma.nrows(), gamma.ncols()));
    }
    if gamma.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("correlation matrix has non-finite entries".into()));
    }
    let mut g = (gamma + gamma.transpose()) * 0.5;
    for i in 0..g.nrows() {
        g[(i, i)] = 1.0;
    }
    if g.clone().cholesky().is_some() {
        return Ok(g);
    }
    let eig = g.symmetric_eigen();
    let clipped = eig.eigenvalues.map(|v| v.max(CORRELATION_EIGEN_FLOOR));
    let mut r = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let d: Vec<f64> = (0..r.nrows()).map(|i| r[(i, i)].sqrt()).collect();
    for i in 0..r.nrows() {
        for j in 0..r.ncols() {
            r[(i, j)] /= d[i] * d[j];
        }
    }
    r = (&r + r.transpose()) * 0.5;
    Ok(r)
}

/// Volatilities, correlation and block risk premia.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub omega: DVector<f64>,
    gamma: DMatrix<f64>,
    r: DMatrix<f64>,
    pub lambda: DVector<f64>,
    pub blocks: LambdaBlocks,
}

impl ModelParams {
    /// `lambda` holds one value per block. `gamma` is repaired when needed.
    pub fn new(
        omega: DVector<f64>,
        gamma: DMatrix<f64>,
        lambda: DVector<f64>,
        blocks: LambdaBlocks,
    ) -> Result<Self> {
        let d = omega.len();
        if gamma.nrows() != d || gamma.ncols() != d {
            return Err(Error::dim("correlation", d, gamma.nrows()));
        }
        if blocks.dim() != d {
            return Err(Error::dim("lambda blocks", d, blocks.dim()));
        }
        if lambda.len() != blocks.n_blocks() {
            return Err(Error::dim("lambda", blocks.n_blocks(), lambda.len()));
        }
        if let Some(w) = omega.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter(format!("volatility must be >= 0, got {w}")));
        }
        let gamma = repair_correlation(&gamma)?;
        let r = gamma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("correlation not positive definite after repair".into()))?
            .unpack();
        Ok(Self {
            omega,
            gamma,
            r,
            lambda,
            blocks,
        })
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    /// Lower Cholesky factor of Γ.
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// `Σ = diag(ω) R`.
    pub fn sigma(&self) -> DMatrix<f64> {
        let mut s = self.r.clone();
        for (i, w) in self.omega.iter().enumerate() {
            s.row_mut(i).scale_mut(*w);
        }
        s
    }

    /// `Ω Γ Ω`, the annualised covariance of the increments.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mut c = self.gamma.clone();
        for i in 0..c.nrows() {
            for j in 0..c.ncols() {
                c[(i, j)] *= self.omega[i] * self.omega[j];
            }
        }
        c
    }

    /// Risk premia expanded to a D-vector.
    pub fn lambda_full(&self) -> DVector<f64> {
        self.blocks.expand(&self.lambda)
    }

    pub fn with_omega(&self, omega: DVector<f64>) -> Self {
        Self {
            omega,
            ..self.clone()
        }
    }

    pub fn with_lambda(&self, lambda: DVector<f64>) -> Self {
        Self {
            lambda,
            ..self.clone()
        }
    }
}

/// Stacked state `[f; FRA_1; …]` at one date.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub date: Option<NaiveDate>,
    pub values: DVector<f64>,
}

impl StateVector {
    pub fn new(date: Option<NaiveDate>, values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("state has non-finite entries".into()));
        }
        Ok(Self { date, values })
    }

    pub fn block<'a>(&'a self, sys: &CurveSystem, block: Block) -> Result<nalgebra::DVectorView<'a, f64>> {
        let r = sys.range(block)?;
        Ok(self.values.rows(r.start, r.len()))
    }
}

/// `μ = ω ∘ (P ∘ Γ) ω − ω ∘ (R λ)`.
pub fn drift_from_params(sys: &CurveSystem, params: &ModelParams) -> Result<DVector<f64>> {
    sys.check_dim("drift", params.dim())?;
    let pg = sys.stacked_p().component_mul(params.gamma());
    let w = &params.omega;
    let convexity = (&pg * w).component_mul(w);
    let premium = (params.r() * params.lambda_full()).component_mul(w);
    Ok(convexity - premium)
}

/// `y = next − A prev`.
pub fn compute_y(sys: &CurveSystem, prev: &StateVector, next: &StateVector) -> Result<DVector<f64>> {
    sys.check_dim("previous state", prev.values.len())?;
    sys.check_dim("next state", next.values.len())?;
    if let (Some(a), Some(b)) = (prev.date, next.date) {
        if b <= a {
            return Err(Error::Input(format!("state dates out of order ({a} then {b})")));
        }
    }
    Ok(&next.values - sys.propagate(&prev.values))
}

/// Increments of a whole state series as an `(n-1) × D` matrix.
pub fn compute_y_series(sys: &CurveSystem, states: &[StateVector]) -> Result<DMatrix<f64>> {
    let d = sys.dim();
    let l = states.len().saturating_sub(1);
    let mut y = DMatrix::zeros(l, d);
    for k in 0..l {
        let row = compute_y(sys, &states[k], &states[k + 1])?;
        y.set_row(k, &row.transpose());
    }
    Ok(y)
}

/// One Euler step `x' = A x + μ dt + Σ ε √dt`.
pub fn step(
    sys: &CurveSystem,
    params: &ModelParams,
    state: &StateVector,
    eps: &DVector<f64>,
) -> Result<StateVector> {
    sys.check_dim("state", state.values.len())?;
    sys.check_dim("shock", eps.len())?;
    let mu = drift_from_params(sys, params)?;
    let sigma = params.sigma();
    Ok(StateVector {
        date: None,
        values: step_raw(sys, &mu, &sigma, &state.values, eps),
    })
}

/// Step with precomputed drift and a `D × F` volatility loading.
pub fn step_raw(
    sys: &CurveSystem,
    mu: &DVector<f64>,
    vol: &DMatrix<f64>,
    x: &DVector<f64>,
    eps: &DVector<f64>,
) -> DVector<f64> {
    let dt = sys.dt();
    sys.propagate(x) + mu * dt + vol * eps * dt.sqrt()
}
