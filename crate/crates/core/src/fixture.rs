//! Synthetic multi-curve histories simulated from the model itself.
//!
//! The default system is a discount curve on twelve buckets (1m … 30y) plus a
//! 3M FRA curve on ten buckets (3m … 30y), sampled weekly. True parameters:
//! `λ_s = 1.5` on the two shortest discount buckets, `λ_l = 0`, `λ_3M = 0.8`,
//! volatilities between 50 and 100 bp and an exponential-decay correlation in
//! log maturity with a cross-curve damping factor.

use chrono::{Duration, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::curve::CurveHistory;
use crate::dynamics::{
    drift_from_params, step_raw, CurveSystem, LambdaBlocks, ModelParams, StateVector, TenorSpec,
};
use crate::error::Result;
use crate::pipeline::histories_from_states;
use crate::spline::BucketGrid;

pub const DISCOUNT_LABELS: [&str; 12] = [
    "1m", "2m", "3m", "6m", "9m", "1y", "5y", "10y", "15y", "20y", "25y", "30y",
];
pub const EUR3M_LABELS: [&str; 10] = ["3m", "6m", "9m", "1y", "5y", "10y", "15y", "20y", "25y", "30y"];

pub const TRUE_LAMBDA: [f64; 3] = [1.5, 0.0, 0.8];
pub const K_SHORT: usize = 2;
pub const WEEKLY_DT: f64 = 1.0 / 52.0;

/// Knobs of the generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub n_dates: usize,
    pub seed: u64,
    pub dt: f64,
    pub start: NaiveDate,
    /// Calendar days between consecutive dates.
    pub spacing_days: i64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            n_dates: 260,
            seed: 20_130_105,
            dt: WEEKLY_DT,
            start: NaiveDate::from_ymd_opt(2010, 1, 5).expect("valid date"),
            spacing_days: 7,
        }
    }
}

/// A simulated history together with the system and parameters that produced it.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub sys: CurveSystem,
    pub params: ModelParams,
    pub states: Vec<StateVector>,
    pub histories: Vec<CurveHistory>,
    pub labels: Vec<Vec<String>>,
}

fn labels(l: &[&str]) -> Vec<String> {
    l.iter().map(|s| s.to_string()).collect()
}

/// Discount + 3M system on the default grids.
pub fn default_system(dt: f64) -> Result<CurveSystem> {
    let disc = BucketGrid::from_labels(&DISCOUNT_LABELS)?;
    let t3m = TenorSpec {
        curve_id: "EUR3M".into(),
        tenor: 0.25,
        grid: BucketGrid::from_labels(&EUR3M_LABELS)?,
    };
    CurveSystem::new("EONIA", disc, vec![t3m], dt)
}

/// True parameters on a system built by [`default_system`] (or any system
/// with one tenor curve).
pub fn true_params(sys: &CurveSystem) -> Result<ModelParams> {
    let mut buckets = sys.discount_grid().as_slice().to_vec();
    let mut curve = vec![0usize; buckets.len()];
    for (j, t) in sys.tenors().iter().enumerate() {
        buckets.extend_from_slice(t.grid.as_slice());
        curve.extend(std::iter::repeat_n(j + 1, t.grid.len()));
    }
    let d = buckets.len();
    let omega = DVector::from_iterator(
        d,
        buckets.iter().zip(&curve).map(|(s, c)| {
            let base = if *c == 0 { 0.005 } else { 0.006 };
            base + 0.004 * s.min(10.0) / 10.0
        }),
    );
    let gamma = DMatrix::from_fn(d, d, |i, j| {
        let decay = (-(buckets[i].ln() - buckets[j].ln()).abs() / 2.0).exp();
        if curve[i] == curve[j] {
            decay
        } else {
            0.85 * decay
        }
    });
    let blocks = LambdaBlocks::standard(sys, K_SHORT)?;
    let mut lambda = DVector::zeros(blocks.n_blocks());
    for (b, v) in lambda.iter_mut().enumerate() {
        *v = TRUE_LAMBDA.get(b).copied().unwrap_or(0.0);
    }
    ModelParams::new(omega, gamma, lambda, blocks)
}

/// Upward-sloping starting curves: forwards for the discount block, FRA above them.
pub fn initial_state(sys: &CurveSystem) -> DVector<f64> {
    let mut x = Vec::with_capacity(sys.dim());
    for s in sys.discount_grid().as_slice() {
        x.push(0.005 + 0.02 * (1.0 - (-s / 4.0).exp()));
    }
    for t in sys.tenors() {
        for s in t.grid.as_slice() {
            x.push(0.008 + 0.02 * (1.0 - (-s / 4.0).exp()));
        }
    }
    DVector::from_vec(x)
}

/// Euler paths `x' = A x + μ dt + Σ ε √dt` with ε from a seeded ChaCha stream.
pub fn simulate_states(
    sys: &CurveSystem,
    params: &ModelParams,
    x0: &DVector<f64>,
    n_dates: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    let mu = drift_from_params(sys, params)?;
    let sigma = params.sigma();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_dates);
    let mut x = x0.clone();
    for k in 0..n_dates {
        if k > 0 {
            let eps = DVector::from_fn(sys.dim(), |_, _| StandardNormal.sample(&mut rng));
            x = step_raw(sys, &mu, &sigma, &x, &eps);
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Full fixture: simulated states and the ZC-yield histories behind them.
pub fn generate(spec: &FixtureSpec) -> Result<Fixture> {
    let sys = default_system(spec.dt)?;
    let params = true_params(&sys)?;
    let raw = simulate_states(&sys, &params, &initial_state(&sys), spec.n_dates, spec.seed)?;
    let dates: Vec<NaiveDate> = (0..spec.n_dates)
        .map(|k| spec.start + Duration::days(spec.spacing_days * k as i64))
        .collect();
    let states = raw
        .into_iter()
        .zip(&dates)
        .map(|(v, d)| StateVector::new(Some(*d), v))
        .collect::<Result<Vec<_>>>()?;
    let labels = vec![labels(&DISCOUNT_LABELS), labels(&EUR3M_LABELS)];
    let histories = histories_from_states(&sys, &states, &dates, &labels)?;
    Ok(Fixture {
        sys,
        params,
        states,
        histories,
        labels,
    })
}
