//! Coordinate-wise maximum likelihood for `(λ, ω, Γ)` and residual-bootstrap
//! standard errors.
//!
//! Increments are modelled as `y(t_k) = μ dt + ω ∘ η(t_k) √dt` with
//! `η ~ N(0, Γ)` i.i.d. The objective is the negative log-likelihood
//!
//! `ℒ = LD/2 ln 2π + L/2 ln det Γ + L Σ ln ω_i + ½ Σ_k η_kᵀ Γ⁻¹ η_k`
//!
//! (the constant `LD/2 ln dt` is dropped). Each sweep minimises ℒ along every
//! λ block and then every ω_i, always using the most recent values, with Γ
//! held fixed; Γ is then refreshed from the standardised residuals.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{repair_correlation, CurveSystem, LambdaBlocks, ModelParams};
use crate::error::{Error, Result};
use crate::optimize::minimize_bounded;

pub const OMEGA_BOUNDS: (f64, f64) = (1e-8, 10.0);
pub const LAMBDA_BOUNDS: (f64, f64) = (-50.0, 50.0);
/// Below this magnitude the convergence test on a parameter is absolute.
const ABS_TEST_FLOOR: f64 = 1e-12;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A window of observed increments.
#[derive(Debug, Clone)]
pub struct EstimationWindow {
    y: DMatrix<f64>,
    dt: f64,
    p: DMatrix<f64>,
    sum: DVector<f64>,
    cross: DMatrix<f64>,
}

impl EstimationWindow {
    /// `y` is `L × D`, one row per increment.
    pub fn new(sys: &CurveSystem, y: DMatrix<f64>) -> Result<Self> {
        Self::from_parts(y, sys.dt(), sys.stacked_p().clone())
    }

    /// Builds a window from the increments, the step and the stacked integral matrix.
    pub fn from_parts(y: DMatrix<f64>, dt: f64, p: DMatrix<f64>) -> Result<Self> {
        let (l, d) = y.shape();
        if p.nrows() != d || p.ncols() != d {
            return Err(Error::dim("integral matrix", d, p.nrows()));
        }
        if l == 0 {
            return Err(Error::Input("empty estimation window".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("estimation window has non-finite increments".into()));
        }
        if l < d + 1 {
            warn!("estimation window has {l} observations for dimension {d}");
        }
        let sum = DVector::from_iterator(d, y.column_iter().map(|c| c.sum()));
        let cross = y.transpose() * &y;
        Ok(Self { y, dt, p, sum, cross })
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.y.ncols()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Same window with different increments.
    fn with_y(&self, y: DMatrix<f64>) -> Result<Self> {
        Self::from_parts(y, self.dt, self.p.clone())
    }

    fn drift(&self, params: &ModelParams) -> DVector<f64> {
        let pg = self.p.component_mul(params.gamma());
        let w = &params.omega;
        (&pg * w).component_mul(w) - (params.r() * params.lambda_full()).component_mul(w)
    }
}

/// Standardised residuals `η_kj = (y_kj − μ_j dt) / (ω_j √dt)`.
pub fn residuals(window: &EstimationWindow, params: &ModelParams) -> Result<DMatrix<f64>> {
    check_dim(window, params)?;
    if params.omega.iter().any(|w| *w <= 0.0) {
        return Err(Error::InvalidParameter("zero volatility in residuals".into()));
    }
    let mu = window.drift(params);
    let dt = window.dt;
    let mut eta = window.y.clone();
    for j in 0..eta.ncols() {
        let shift = mu[j] * dt;
        let scale = 1.0 / (params.omega[j] * dt.sqrt());
        for v in eta.column_mut(j).iter_mut() {
            *v = (*v - shift) * scale;
        }
    }
    Ok(eta)
}

/// ℒ evaluated directly from the residual matrix.
pub fn neg_log_likelihood(window: &EstimationWindow, params: &ModelParams) -> Result<f64> {
    let eta = residuals(window, params)?;
    let chol = params
        .gamma()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("correlation matrix is singular".into()))?;
    let (l, d) = eta.shape();
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let solved = chol.solve(&eta.transpose());
    let quad: f64 = solved.component_mul(&eta.transpose()).sum();
    let lf = l as f64;
    let value = lf * d as f64 / 2.0 * LN_2PI
        + lf / 2.0 * log_det
        + lf * params.omega.iter().map(|w| w.ln()).sum::<f64>()
        + 0.5 * quad;
    if !value.is_finite() {
        return Err(Error::Numerical("non-finite likelihood".into()));
    }
    Ok(value)
}

fn check_dim(window: &EstimationWindow, params: &ModelParams) -> Result<()> {
    if params.dim() != window.dim() {
        return Err(Error::dim("parameters vs window", window.dim(), params.dim()));
    }
    Ok(())
}

/// ℒ at fixed Γ from the sufficient statistics `Σ y yᵀ` and `Σ y`.
///
/// With `z = 1/ω` and `ν = z ∘ μ` the quadratic form is
/// `[zᵀ(G∘S)z − 2 dt (z∘s)ᵀ G ν + L dt² νᵀ G ν] / dt`, `G = Γ⁻¹`,
/// so each evaluation costs a few `D × D` products whatever the window length.
struct FixedGammaObjective<'a> {
    window: &'a EstimationWindow,
    /// `P ∘ Γ`.
    pg: DMatrix<f64>,
    /// `Σ_{j ∈ b} R_ij` per block.
    rb: DMatrix<f64>,
    inv: DMatrix<f64>,
    /// `Γ⁻¹ ∘ Σ y yᵀ`.
    inv_cross: DMatrix<f64>,
    constant: f64,
}

impl<'a> FixedGammaObjective<'a> {
    fn new(window: &'a EstimationWindow, gamma: &DMatrix<f64>, blocks: &LambdaBlocks) -> Result<Self> {
        let d = window.dim();
        let chol = gamma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("correlation matrix is singular".into()))?;
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let r = chol.l();
        let inv = chol.inverse();
        let mut rb = DMatrix::zeros(d, blocks.n_blocks());
        for (j, b) in blocks.assignment().iter().enumerate() {
            for i in 0..d {
                rb[(i, *b)] += r[(i, j)];
            }
        }
        let l = window.len() as f64;
        Ok(Self {
            window,
            pg: window.p.component_mul(gamma),
            rb,
            inv_cross: inv.component_mul(&window.cross),
            inv,
            constant: l * d as f64 / 2.0 * LN_2PI + l / 2.0 * log_det,
        })
    }

    fn drift(&self, omega: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64> {
        (&self.pg * omega - &self.rb * lambda).component_mul(omega)
    }

    fn value(&self, omega: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
        let w = self.window;
        let dt = w.dt;
        let l = w.len() as f64;
        let z = omega.map(|v| 1.0 / v);
        // ν = z ∘ μ = PΓω − R_b λ
        let nu = &self.pg * omega - &self.rb * lambda;
        let zs = z.component_mul(&w.sum);
        let g_nu = &self.inv * &nu;
        let quad = z.dot(&(&self.inv_cross * &z)) - 2.0 * dt * zs.dot(&g_nu)
            + l * dt * dt * nu.dot(&g_nu);
        let log_omega: f64 = omega.iter().map(|v| v.ln()).sum();
        self.constant + l * log_omega + 0.5 * quad / dt
    }
}

/// Tuning of [`fit`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    /// Relative-change tolerance γ.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iters: 500,
        }
    }
}

/// Per-parameter bootstrap spread and bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamErrors {
    pub lambda: Vec<f64>,
    pub omega: Vec<f64>,
}

/// Output of [`fit`], optionally completed by [`bootstrap_errors`].
#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub params: ModelParams,
    /// `θ = (λ blocks, ω)` after each sweep, starting with the initial point.
    pub theta_path: Vec<DVector<f64>>,
    pub n_iters: usize,
    pub converged: bool,
    pub neg_log_lik: f64,
    pub std_errors: Option<ParamErrors>,
    pub bias: Option<ParamErrors>,
    pub n_boot: usize,
    pub failed_replicas: usize,
}

impl EstimationResult {
    pub fn theta(&self) -> DVector<f64> {
        theta_from(&self.params.lambda, &self.params.omega)
    }

    /// `θ` names: λ block names then `omega_<i>`.
    pub fn theta_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.params.blocks.names().to_vec();
        names.extend((0..self.params.dim()).map(|i| format!("omega_{}", i + 1)));
        names
    }
}

fn within_tolerance(prev: f64, cur: f64, tol: f64) -> bool {
    if prev.abs() < ABS_TEST_FLOOR {
        (cur - prev).abs() < tol
    } else {
        ((cur - prev) / prev).abs() < tol
    }
}

/// Sample standard deviations of `y_i / √dt` and sample correlation of `y`.
pub fn pearson_start(window: &EstimationWindow) -> (DVector<f64>, DMatrix<f64>) {
    let (l, d) = window.y.shape();
    let mean = &window.sum / l as f64;
    let denom = (l.max(2) - 1) as f64;
    let mut cov = &window.cross - &mean * mean.transpose() * l as f64;
    cov /= denom;
    let sd: Vec<f64> = (0..d).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    let omega = DVector::from_iterator(
        d,
        sd.iter()
            .map(|s| (s / window.dt.sqrt()).clamp(OMEGA_BOUNDS.0, OMEGA_BOUNDS.1)),
    );
    let mut corr = DMatrix::identity(d, d);
    for i in 0..d {
        for j in 0..d {
            if i != j && sd[i] > 0.0 && sd[j] > 0.0 {
                corr[(i, j)] = (cov[(i, j)] / (sd[i] * sd[j])).clamp(-1.0, 1.0);
            }
        }
    }
    (omega, corr)
}

/// `ρ_ij = Q_ij / √(Q_ii Q_jj)` with `Q = ηᵀη / L`.
fn correlation_from_residuals(
    window: &EstimationWindow,
    omega: &DVector<f64>,
    mu: &DVector<f64>,
) -> DMatrix<f64> {
    let d = window.dim();
    let l = window.len() as f64;
    let dt = window.dt;
    let mut q = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let m = window.cross[(i, j)] - dt * (window.sum[i] * mu[j] + mu[i] * window.sum[j])
                + l * dt * dt * mu[i] * mu[j];
            q[(i, j)] = m / (omega[i] * omega[j] * dt * l);
        }
    }
    let mut rho = DMatrix::identity(d, d);
    for i in 0..d {
        for j in 0..d {
            let n = (q[(i, i)] * q[(j, j)]).sqrt();
            if i != j && n > 0.0 {
                rho[(i, j)] = (q[(i, j)] / n).clamp(-1.0, 1.0);
            }
        }
    }
    rho
}

/// Starting point of [`fit`]: λ = 0, Pearson ω and Γ.
pub fn initial_params(window: &EstimationWindow, blocks: &LambdaBlocks) -> Result<ModelParams> {
    if blocks.dim() != window.dim() {
        return Err(Error::dim("lambda blocks", window.dim(), blocks.dim()));
    }
    let (omega, corr) = pearson_start(window);
    ModelParams::new(omega, corr, DVector::zeros(blocks.n_blocks()), blocks.clone())
}

/// Coordinate-wise minimisation of ℒ from the Pearson starting point.
pub fn fit(window: &EstimationWindow, blocks: &LambdaBlocks, opts: &FitOptions) -> Result<EstimationResult> {
    let start = initial_params(window, blocks)?;
    fit_from(window, start, opts)
}

/// Coordinate-wise minimisation of ℒ from a given starting point.
pub fn fit_from(window: &EstimationWindow, start: ModelParams, opts: &FitOptions) -> Result<EstimationResult> {
    check_dim(window, &start)?;
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance must be > 0, got {}", opts.tol)));
    }
    let blocks = start.blocks.clone();
    let nb = blocks.n_blocks();
    let d = window.dim();
    let mut omega = start.omega.map(|w| w.clamp(OMEGA_BOUNDS.0, OMEGA_BOUNDS.1));
    let mut lambda = start.lambda.map(|v| v.clamp(LAMBDA_BOUNDS.0, LAMBDA_BOUNDS.1));
    let mut gamma = start.gamma().clone();
    let mut theta_path = vec![theta_from(&lambda, &omega)];
    let mut converged = false;
    let mut n_iters = 0;
    let (ln_lo, ln_hi) = (OMEGA_BOUNDS.0.ln(), OMEGA_BOUNDS.1.ln());

    while n_iters < opts.max_iters {
        n_iters += 1;
        let obj = FixedGammaObjective::new(window, &gamma, &blocks)?;
        let prev_theta = theta_from(&lambda, &omega);

        for b in 0..nb {
            let x0 = lambda[b];
            let mut trial = lambda.clone();
            let m = minimize_bounded(
                |x| {
                    trial[b] = x;
                    obj.value(&omega, &trial)
                },
                x0,
                LAMBDA_BOUNDS.0,
                LAMBDA_BOUNDS.1,
                0.1 + 0.1 * x0.abs(),
                1e-10,
            );
            lambda[b] = m.x;
        }
        for i in 0..d {
            let u0 = omega[i].ln();
            let mut trial = omega.clone();
            let m = minimize_bounded(
                |u| {
                    trial[i] = u.exp();
                    obj.value(&trial, &lambda)
                },
                u0,
                ln_lo,
                ln_hi,
                0.05,
                1e-10,
            );
            omega[i] = m.x.exp();
        }
        let value = obj.value(&omega, &lambda);
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite likelihood at sweep {n_iters}")));
        }

        let mu = obj.drift(&omega, &lambda);
        let rho = correlation_from_residuals(window, &omega, &mu);
        let new_gamma = repair_correlation(&rho)?;
        let theta = theta_from(&lambda, &omega);
        let theta_ok = prev_theta
            .iter()
            .zip(theta.iter())
            .all(|(p, c)| within_tolerance(*p, *c, opts.tol));
        let rho_ok = gamma
            .iter()
            .zip(new_gamma.iter())
            .all(|(p, c)| within_tolerance(*p, *c, opts.tol));
        debug!("sweep {n_iters}: nll {value:.6}");
        gamma = new_gamma;
        theta_path.push(theta);
        if theta_ok && rho_ok {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("coordinate search stopped after {n_iters} sweeps without meeting tolerance {}", opts.tol);
    }
    let params = ModelParams::new(omega, gamma, lambda, blocks)?;
    let neg_log_lik = neg_log_likelihood(window, &params)?;
    Ok(EstimationResult {
        params,
        theta_path,
        n_iters,
        converged,
        neg_log_lik,
        std_errors: None,
        bias: None,
        n_boot: 0,
        failed_replicas: 0,
    })
}

fn theta_from(lambda: &DVector<f64>, omega: &DVector<f64>) -> DVector<f64> {
    let nb = lambda.len();
    let mut t = DVector::zeros(nb + omega.len());
    t.rows_mut(0, nb).copy_from(lambda);
    t.rows_mut(nb, omega.len()).copy_from(omega);
    t
}

/// Options for [`bootstrap_errors`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub n_boot: usize,
    pub seed: u64,
    /// Start each replica from the point estimate instead of the Pearson point.
    pub warm_start: bool,
    /// Largest tolerated fraction of failed replica fits.
    pub max_failure_rate: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            n_boot: 500,
            seed: 0,
            warm_start: true,
            max_failure_rate: 0.05,
        }
    }
}

/// Fitted θ of every bootstrap replica (`None` when the replica fit failed).
pub fn bootstrap_replicas(
    window: &EstimationWindow,
    result: &EstimationResult,
    fit_opts: &FitOptions,
    boot: &BootstrapOptions,
) -> Result<Vec<Option<DVector<f64>>>> {
    let params = &result.params;
    let eta = residuals(window, params)?;
    let (l, d) = eta.shape();
    let mu = window.drift(params);
    let dt = window.dt;
    let sq = dt.sqrt();

    Ok((0..boot.n_boot)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(boot.seed);
            rng.set_stream(rep as u64 + 1);
            let mut y = DMatrix::zeros(l, d);
            for k in 0..l {
                let src = rng.gen_range(0..l);
                for j in 0..d {
                    y[(k, j)] = mu[j] * dt + params.omega[j] * eta[(src, j)] * sq;
                }
            }
            let replica = window.with_y(y).ok()?;
            let fitted = if boot.warm_start {
                fit_from(&replica, params.clone(), fit_opts)
            } else {
                fit(&replica, &params.blocks, fit_opts)
            };
            match fitted {
                Ok(r) => Some(r.theta()),
                Err(e) => {
                    debug!("bootstrap replica {rep} failed: {e}");
                    None
                }
            }
        })
        .collect())
}

/// Residual bootstrap: resample rows of η̂, rebuild `y* = μ̂ dt + ω̂ ∘ η* √dt`,
/// refit, and report the spread of the replica estimates.
pub fn bootstrap_errors(
    window: &EstimationWindow,
    result: &EstimationResult,
    fit_opts: &FitOptions,
    boot: &BootstrapOptions,
) -> Result<EstimationResult> {
    if boot.n_boot < 2 {
        return Err(Error::InvalidParameter("bootstrap needs at least 2 replicas".into()));
    }
    if !result.converged {
        warn!("bootstrapping a fit that did not converge");
    }
    let replicas = bootstrap_replicas(window, result, fit_opts, boot)?;
    let ok: Vec<&DVector<f64>> = replicas.iter().flatten().collect();
    let failed = replicas.len() - ok.len();
    if failed as f64 > boot.max_failure_rate * boot.n_boot as f64 {
        return Err(Error::Numerical(format!(
            "{failed} of {} bootstrap replicas failed to fit",
            boot.n_boot
        )));
    }
    if ok.len() < 2 {
        return Err(Error::Numerical("fewer than 2 bootstrap replicas succeeded".into()));
    }
    let theta = result.theta();
    let n = ok.len() as f64;
    let mean = ok.iter().fold(DVector::zeros(theta.len()), |acc, t| acc + *t) / n;
    let var = ok
        .iter()
        .fold(DVector::zeros(theta.len()), |acc, t| acc + (*t - &mean).map(|v| v * v))
        / (n - 1.0);
    let se = var.map(f64::sqrt);
    let bias = &mean - &theta;
    let names = result.theta_names();
    for i in 0..theta.len() {
        if bias[i].abs() > se[i] && se[i] > 0.0 {
            warn!("bootstrap bias of {} ({:.3e}) exceeds its standard error ({:.3e})", names[i], bias[i], se[i]);
        }
    }
    let nb = result.params.lambda.len();
    let split = |v: &DVector<f64>| ParamErrors {
        lambda: v.rows(0, nb).iter().copied().collect(),
        omega: v.rows(nb, v.len() - nb).iter().copied().collect(),
    };
    Ok(EstimationResult {
        std_errors: Some(split(&se)),
        bias: Some(split(&bias)),
        n_boot: boot.n_boot,
        failed_replicas: failed,
        ..result.clone()
    })
}
