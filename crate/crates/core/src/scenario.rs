//! Forecast distributions at a horizon of `k` steps: closed-form Gaussian
//! moments, Gaussian Monte Carlo and residual-bootstrap path simulation, and
//! the coverage envelopes built from them.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dynamics::{drift_from_params, CurveSystem, ModelParams};
use crate::error::{Error, Result};
use crate::spline::SplineOperators;

/// How the forecast distribution is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForecastMethod {
    GaussianClosedForm,
    GaussianMc,
    Bootstrap,
}

impl ForecastMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            ForecastMethod::GaussianClosedForm => "gaussian-closed-form",
            ForecastMethod::GaussianMc => "gaussian-mc",
            ForecastMethod::Bootstrap => "bootstrap",
        }
    }
}

impl std::str::FromStr for ForecastMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-closed-form" | "gaussian" => Ok(Self::GaussianClosedForm),
            "gaussian-mc" => Ok(Self::GaussianMc),
            "bootstrap" => Ok(Self::Bootstrap),
            _ => Err(Error::Config(format!("unknown forecast method '{s}'"))),
        }
    }
}

/// Drift accumulated over `k` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftMode {
    /// `Σ_{h<k} A^h μ dt`, the exact unrolling of the recursion.
    #[default]
    ExactRecursion,
    /// `k μ dt`, drift added without propagation.
    LinearDrift,
}

impl DriftMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DriftMode::ExactRecursion => "exact-recursion",
            DriftMode::LinearDrift => "linear-drift",
        }
    }
}

impl std::str::FromStr for DriftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact-recursion" | "exact" => Ok(Self::ExactRecursion),
            "linear-drift" | "linear" => Ok(Self::LinearDrift),
            _ => Err(Error::Config(format!("unknown drift mode '{s}'"))),
        }
    }
}

/// One forecast request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSpec {
    /// Horizon in steps.
    pub horizon: usize,
    pub n_paths: usize,
    pub levels: Vec<f64>,
    pub method: ForecastMethod,
    pub drift_mode: DriftMode,
    pub seed: u64,
}

impl ForecastSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be >= 1 step".into()));
        }
        if let Some(p) = self.levels.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::InvalidParameter(format!("coverage level {p} outside (0, 1)")));
        }
        if self.method != ForecastMethod::GaussianClosedForm && self.n_paths < 2 {
            return Err(Error::InvalidParameter("Monte Carlo needs at least 2 paths".into()));
        }
        Ok(())
    }
}

/// Drift, volatility loading and per-bucket volatilities driving the forecasts.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioModel {
    pub mu: DVector<f64>,
    /// `D × F` loading: `Σ = diag(ω) R`, or the PCA functions `W`.
    pub vol: DMatrix<f64>,
    /// Used to rescale bootstrap residuals.
    pub omega: DVector<f64>,
}

impl ScenarioModel {
    pub fn from_params(sys: &CurveSystem, params: &ModelParams) -> Result<Self> {
        Ok(Self {
            mu: drift_from_params(sys, params)?,
            vol: params.sigma(),
            omega: params.omega.clone(),
        })
    }

    /// Same drift with a different volatility loading (e.g. PCA `W`).
    pub fn with_vol(&self, vol: DMatrix<f64>) -> Result<Self> {
        if vol.nrows() != self.mu.len() {
            return Err(Error::dim("volatility loading", self.mu.len(), vol.nrows()));
        }
        Ok(Self {
            vol,
            ..self.clone()
        })
    }

    fn check(&self, sys: &CurveSystem, x: &DVector<f64>) -> Result<()> {
        let d = sys.dim();
        if self.mu.len() != d {
            return Err(Error::dim("drift", d, self.mu.len()));
        }
        if self.vol.nrows() != d {
            return Err(Error::dim("volatility loading", d, self.vol.nrows()));
        }
        if x.len() != d {
            return Err(Error::dim("state", d, x.len()));
        }
        Ok(())
    }
}

/// Mean and covariance of a Gaussian forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Moments {
    /// Marginal moments of a contiguous block.
    pub fn block(&self, range: std::ops::Range<usize>) -> Moments {
        let n = range.len();
        Moments {
            mean: self.mean.rows(range.start, n).into_owned(),
            cov: self.cov.view((range.start, range.start), (n, n)).into_owned(),
        }
    }

    pub fn sd(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// Moments after `k` steps:
/// `cov = dt Σ_{h<k} A^h V Vᵀ (A^h)ᵀ` and the mean per `drift_mode`.
pub fn gaussian_moments(
    sys: &CurveSystem,
    model: &ScenarioModel,
    x: &DVector<f64>,
    k: usize,
    drift_mode: DriftMode,
) -> Result<Moments> {
    model.check(sys, x)?;
    if k == 0 {
        return Err(Error::InvalidParameter("horizon must be >= 1 step".into()));
    }
    let dt = sys.dt();
    let a = sys.full_transition();
    let step_cov = &model.vol * model.vol.transpose() * dt;
    let mut cov = step_cov.clone();
    let mut state = sys.propagate(x);
    let mut drift_sum = &model.mu * dt;
    for _ in 1..k {
        cov = &a * cov * a.transpose() + &step_cov;
        state = sys.propagate(&state);
        drift_sum = sys.propagate(&drift_sum) + &model.mu * dt;
    }
    let mean = match drift_mode {
        DriftMode::ExactRecursion => state + drift_sum,
        DriftMode::LinearDrift => state + &model.mu * (k as f64 * dt),
    };
    Ok(Moments {
        mean,
        cov: (&cov + cov.transpose()) * 0.5,
    })
}

/// Terminal states of simulated paths, one row per path.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub paths: DMatrix<f64>,
}

impl Ensemble {
    pub fn n_paths(&self) -> usize {
        self.paths.nrows()
    }

    pub fn dim(&self) -> usize {
        self.paths.ncols()
    }

    pub fn block(&self, range: std::ops::Range<usize>) -> Ensemble {
        Ensemble {
            paths: self.paths.columns(range.start, range.len()).into_owned(),
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.paths.column_iter().map(|c| c.mean()))
    }

    /// Sample covariance (`n − 1` denominator).
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.n_paths() as f64;
        let mean = self.mean();
        let mut centred = self.paths.clone();
        for (j, mut c) in centred.column_iter_mut().enumerate() {
            c.add_scalar_mut(-mean[j]);
        }
        centred.transpose() * &centred / (n - 1.0)
    }
}

/// Simulates `spec.n_paths` paths of `spec.horizon` steps from `x`.
///
/// Gaussian paths draw `ε ~ N(0, I_F)` each step; bootstrap paths draw whole
/// rows of `residuals` and use `y = μ dt + ω ∘ η √dt`. Path `i` uses its own
/// ChaCha stream derived from `spec.seed`, so results do not depend on the
/// thread count.
pub fn simulate_paths(
    sys: &CurveSystem,
    model: &ScenarioModel,
    x: &DVector<f64>,
    spec: &ForecastSpec,
    residuals: Option<&DMatrix<f64>>,
) -> Result<Ensemble> {
    spec.validate()?;
    model.check(sys, x)?;
    let d = sys.dim();
    let dt = sys.dt();
    let sq = dt.sqrt();
    let drift = &model.mu * dt;
    let pool = match spec.method {
        ForecastMethod::Bootstrap => {
            let pool = residuals
                .ok_or_else(|| Error::InvalidParameter("bootstrap needs a residual pool".into()))?;
            if pool.nrows() == 0 {
                return Err(Error::InvalidParameter("empty residual pool".into()));
            }
            if pool.ncols() != d {
                return Err(Error::dim("residual pool", d, pool.ncols()));
            }
            // Pre-scale rows to ω ∘ η √dt.
            let mut scaled = pool.clone();
            for j in 0..d {
                scaled.column_mut(j).scale_mut(model.omega[j] * sq);
            }
            Some(scaled.transpose())
        }
        _ => None,
    };
    let vol = &model.vol * sq;
    let f = vol.ncols();

    let rows: Vec<DVector<f64>> = (0..spec.n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(path as u64);
            let mut state = x.clone();
            let mut eps = DVector::zeros(f);
            for _ in 0..spec.horizon {
                let mut next = sys.propagate(&state) + &drift;
                match &pool {
                    Some(p) => {
                        let r = rng.gen_range(0..p.ncols());
                        next += p.column(r);
                    }
                    None => {
                        for e in eps.iter_mut() {
                            *e = StandardNormal.sample(&mut rng);
                        }
                        next.gemv(1.0, &vol, &eps, 1.0);
                    }
                }
                state = next;
            }
            state
        })
        .collect();
    let mut paths = DMatrix::zeros(spec.n_paths, d);
    for (i, r) in rows.iter().enumerate() {
        paths.set_row(i, &r.transpose());
    }
    Ok(Ensemble { paths })
}

/// Per-bucket interval forecast at one coverage level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastEnvelope {
    pub level: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub method: ForecastMethod,
}

impl ForecastEnvelope {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Plot band `mean ± 2 sd`.
    pub fn two_sd_band(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = self.mean.iter().zip(&self.sd).map(|(m, s)| m - 2.0 * s).collect();
        let hi = self.mean.iter().zip(&self.sd).map(|(m, s)| m + 2.0 * s).collect();
        (lo, hi)
    }
}

fn check_level(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!("coverage level {p} outside (0, 1)")));
    }
    Ok(())
}

/// Standard normal quantile.
pub fn normal_quantile(q: f64) -> f64 {
    Normal::standard().inverse_cdf(q)
}

/// Sample quantile with linear interpolation between order statistics
/// (`h = (n − 1) q`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `mean ± z_{(1+p)/2} sd`.
pub fn envelope_from_moments(m: &Moments, p: f64) -> Result<ForecastEnvelope> {
    check_level(p)?;
    let z = normal_quantile(0.5 * (1.0 + p));
    let sd = m.sd();
    Ok(ForecastEnvelope {
        level: p,
        lower: m.mean.iter().zip(sd.iter()).map(|(a, s)| a - z * s).collect(),
        upper: m.mean.iter().zip(sd.iter()).map(|(a, s)| a + z * s).collect(),
        mean: m.mean.iter().copied().collect(),
        sd: sd.iter().copied().collect(),
        method: ForecastMethod::GaussianClosedForm,
    })
}

/// Empirical `((1−p)/2, (1+p)/2)` quantiles per bucket.
pub fn envelope_from_ensemble(ens: &Ensemble, p: f64, method: ForecastMethod) -> Result<ForecastEnvelope> {
    check_level(p)?;
    let n = ens.n_paths();
    if n == 0 {
        return Err(Error::InvalidParameter("empty ensemble".into()));
    }
    if (n as f64) < 20.0 / (1.0 - p) {
        warn!("{n} paths are few for coverage {p}; quantiles will be coarse");
    }
    let mean = ens.mean();
    let d = ens.dim();
    let (mut lower, mut upper, mut sd) = (Vec::with_capacity(d), Vec::with_capacity(d), Vec::with_capacity(d));
    for (j, col) in ens.paths.column_iter().enumerate() {
        let mut v: Vec<f64> = col.iter().copied().collect();
        v.sort_by(|a, b| a.total_cmp(b));
        lower.push(quantile_sorted(&v, 0.5 * (1.0 - p)));
        upper.push(quantile_sorted(&v, 0.5 * (1.0 + p)));
        let var = if n > 1 {
            v.iter().map(|x| (x - mean[j]).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        sd.push(var.sqrt());
    }
    // Guard l <= mean <= u against floating noise on degenerate ensembles.
    let mean: Vec<f64> = mean.iter().copied().collect();
    for j in 0..d {
        lower[j] = lower[j].min(mean[j]);
        upper[j] = upper[j].max(mean[j]);
    }
    Ok(ForecastEnvelope {
        level: p,
        lower,
        upper,
        mean,
        sd,
        method,
    })
}

fn yield_map(ops: &SplineOperators) -> DMatrix<f64> {
    let mut sp = ops.p().clone();
    for (i, s) in ops.grid().as_slice().iter().enumerate() {
        sp.row_mut(i).scale_mut(1.0 / s);
    }
    sp
}

/// Moments of the ZC yields `Y = S P f`, `S = diag(1/s)`, from forward moments.
pub fn yield_moments(ops: &SplineOperators, fwd: &Moments) -> Result<Moments> {
    if fwd.mean.len() != ops.len() {
        return Err(Error::GridMismatch("forward moments do not match the grid".into()));
    }
    let sp = yield_map(ops);
    let cov = &sp * &fwd.cov * sp.transpose();
    Ok(Moments {
        mean: &sp * &fwd.mean,
        cov: (&cov + cov.transpose()) * 0.5,
    })
}

/// Path-wise ZC yields from a forward ensemble.
pub fn yield_ensemble(ops: &SplineOperators, fwd: &Ensemble) -> Result<Ensemble> {
    if fwd.dim() != ops.len() {
        return Err(Error::GridMismatch("forward ensemble does not match the grid".into()));
    }
    let sp = yield_map(ops);
    Ok(Ensemble {
        paths: &fwd.paths * sp.transpose(),
    })
}
