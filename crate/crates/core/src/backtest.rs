//! Interval-forecast backtesting: exceedance indicators, the unconditional
//! coverage likelihood-ratio test and the rolling out-of-sample harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::NaiveDate;
use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::dynamics::{compute_y_series, CurveSystem, LambdaBlocks, ModelParams, StateVector};
use crate::error::{Error, Result};
use crate::estimation::{fit, fit_from, residuals, EstimationWindow, FitOptions};
use crate::pca::{decompose, select_components};
use crate::scenario::{
    envelope_from_ensemble, envelope_from_moments, gaussian_moments, simulate_paths, DriftMode,
    ForecastEnvelope, ForecastMethod, ForecastSpec, ScenarioModel,
};

/// χ²(1) critical value at 95%.
pub const CHI2_95: f64 = 3.841_458_820_694_124;
/// χ²(1) critical value at 99%.
pub const CHI2_99: f64 = 6.634_896_601_021_213;

/// `P(χ²₁ > x) = erfc(√(x/2))`.
pub fn chi2_1_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    erfc((x / 2.0).sqrt())
}

/// Unconditional coverage statistic and its p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KupiecResult {
    pub n1: usize,
    pub n_obs: usize,
    pub lr: f64,
    /// p-value as a fraction.
    pub p_value: f64,
}

impl KupiecResult {
    /// 0, 1 (significant at 95%) or 2 (significant at 99%).
    pub fn stars(&self) -> u8 {
        if self.lr > CHI2_99 {
            2
        } else if self.lr > CHI2_95 {
            1
        } else {
            0
        }
    }
}

fn xlogy_ratio(n: f64, num: f64, den: f64) -> f64 {
    if n == 0.0 {
        0.0
    } else {
        n * (num / den).ln()
    }
}

/// `LR = 2[n₁ ln(π̂₁/(1−p)) + n₀ ln(π̂₀/p)]` with `π̂₁ = n₁/n_obs`.
pub fn kupiec_lr(n1: usize, n_obs: usize, p: f64) -> Result<KupiecResult> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!("coverage {p} outside (0, 1)")));
    }
    if n_obs == 0 || n1 > n_obs {
        return Err(Error::InvalidParameter(format!(
            "exceedance count {n1} invalid for {n_obs} observations"
        )));
    }
    let n = n_obs as f64;
    let x1 = n1 as f64;
    let x0 = n - x1;
    let lr = (2.0 * (xlogy_ratio(x1, x1 / n, 1.0 - p) + xlogy_ratio(x0, x0 / n, p))).max(0.0);
    Ok(KupiecResult {
        n1,
        n_obs,
        lr,
        p_value: chi2_1_sf(lr),
    })
}

/// Indicator series for one bucket, horizon and coverage level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceSeries {
    pub bucket: usize,
    pub horizon: usize,
    pub level: f64,
    /// `-1` below the lower bound, `+1` above the upper bound, `0` inside.
    pub signs: Vec<i8>,
}

impl ExceedanceSeries {
    pub fn n_obs(&self) -> usize {
        self.signs.len()
    }

    pub fn n1(&self) -> usize {
        self.signs.iter().filter(|s| **s != 0).count()
    }

    pub fn n0(&self) -> usize {
        self.n_obs() - self.n1()
    }

    pub fn indicators(&self) -> Vec<u8> {
        self.signs.iter().map(|s| u8::from(*s != 0)).collect()
    }

    pub fn kupiec(&self) -> Result<KupiecResult> {
        kupiec_lr(self.n1(), self.n_obs(), self.level)
    }
}

/// Envelope issued at `origin` for the date `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatedEnvelope {
    pub origin: NaiveDate,
    pub target: NaiveDate,
    pub envelope: ForecastEnvelope,
}

/// Compares each envelope with the realised state on its target date.
pub fn count_exceedances(
    envelopes: &[DatedEnvelope],
    realized: &[StateVector],
    horizon: usize,
) -> Result<Vec<ExceedanceSeries>> {
    let first = envelopes
        .first()
        .ok_or_else(|| Error::Input("no envelopes to backtest".into()))?;
    let d = first.envelope.len();
    let level = first.envelope.level;
    let by_date: BTreeMap<NaiveDate, &StateVector> = realized
        .iter()
        .filter_map(|s| s.date.map(|d| (d, s)))
        .collect();
    let mut series: Vec<ExceedanceSeries> = (0..d)
        .map(|bucket| ExceedanceSeries {
            bucket,
            horizon,
            level,
            signs: Vec::with_capacity(envelopes.len()),
        })
        .collect();
    for e in envelopes {
        if e.envelope.len() != d || e.envelope.level != level {
            return Err(Error::Input("envelopes differ in size or coverage level".into()));
        }
        let state = by_date.get(&e.target).ok_or_else(|| {
            Error::Input(format!(
                "no realised curve on {} for the forecast issued {}",
                e.target, e.origin
            ))
        })?;
        if state.values.len() != d {
            return Err(Error::dim("realised state", d, state.values.len()));
        }
        for (b, s) in series.iter_mut().enumerate() {
            let v = state.values[b];
            s.signs.push(if v < e.envelope.lower[b] {
                -1
            } else if v > e.envelope.upper[b] {
                1
            } else {
                0
            });
        }
    }
    Ok(series)
}

/// Kupiec statistics of one bucket at one coverage level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCell {
    pub level: f64,
    pub result: KupiecResult,
}

/// One bucket of a coverage report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub bucket: String,
    pub cells: Vec<CoverageCell>,
}

/// Coverage test results for one method and horizon, one row per bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub method: String,
    pub horizon: usize,
    pub levels: Vec<f64>,
    pub rows: Vec<CoverageRow>,
}

fn star_suffix(stars: u8) -> &'static str {
    match stars {
        2 => " (**)",
        1 => " (*)",
        _ => "",
    }
}

impl CoverageReport {
    /// Builds a report from series sharing method and horizon; `labels` names the buckets.
    pub fn from_series(
        method: impl Into<String>,
        horizon: usize,
        labels: &[String],
        series: &[ExceedanceSeries],
    ) -> Result<Self> {
        let mut levels: Vec<f64> = Vec::new();
        for s in series {
            if !levels.contains(&s.level) {
                levels.push(s.level);
            }
        }
        levels.sort_by(|a, b| a.total_cmp(b));
        let mut rows = Vec::with_capacity(labels.len());
        for (b, label) in labels.iter().enumerate() {
            let mut cells = Vec::with_capacity(levels.len());
            for level in &levels {
                let s = series
                    .iter()
                    .find(|s| s.bucket == b && s.level == *level)
                    .ok_or_else(|| Error::Input(format!("no series for bucket {label} at {level}")))?;
                cells.push(CoverageCell {
                    level: *level,
                    result: s.kupiec()?,
                });
            }
            rows.push(CoverageRow {
                bucket: label.clone(),
                cells,
            });
        }
        Ok(Self {
            method: method.into(),
            horizon,
            levels,
            rows,
        })
    }

    /// `method,horizon,bucket,coverage,n_obs,n1,lr,p_value_pct,stars` rows.
    pub fn to_csv_rows(&self) -> Vec<String> {
        let mut out = Vec::new();
        for row in &self.rows {
            for c in &row.cells {
                out.push(format!(
                    "{},{},{},{},{},{},{:.6},{:.6},{}",
                    self.method,
                    self.horizon,
                    row.bucket,
                    c.level,
                    c.result.n_obs,
                    c.result.n1,
                    c.result.lr,
                    100.0 * c.result.p_value,
                    c.result.stars()
                ));
            }
        }
        out
    }

    pub const CSV_HEADER: &'static str = "method,horizon,bucket,coverage,n_obs,n1,lr,p_value_pct,stars";

    /// Plain-text table: per level, `n1`, `LR_UC` with (*)/(**) flags and the p-value in percent.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method: {}  horizon: {} steps", self.method, self.horizon);
        let _ = write!(s, "{:<10}", "bucket");
        for l in &self.levels {
            let _ = write!(s, "| {:<34}", format!("p = {l}"));
        }
        let _ = writeln!(s);
        let _ = write!(s, "{:<10}", "");
        for _ in &self.levels {
            let _ = write!(s, "| {:>5} {:>16} {:>10}  ", "n1", "LR_UC", "p-value");
        }
        let _ = writeln!(s);
        for row in &self.rows {
            let _ = write!(s, "{:<10}", row.bucket);
            for c in &row.cells {
                let lr = format!("{:.2}{}", c.result.lr, star_suffix(c.result.stars()));
                let _ = write!(s, "| {:>5} {:>16} {:>10.2}  ", c.result.n1, lr, 100.0 * c.result.p_value);
            }
            let _ = writeln!(s);
        }
        s
    }
}

/// Settings of the rolling out-of-sample sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RollingConfig {
    /// Increments per estimation window.
    pub window: usize,
    /// Steps between consecutive window ends.
    pub stride: usize,
    pub k_short: usize,
    pub horizons: Vec<usize>,
    pub levels: Vec<f64>,
    pub methods: Vec<ForecastMethod>,
    pub n_paths: usize,
    pub drift_mode: DriftMode,
    /// Use the PCA loading `W` instead of the full `Σ` for Gaussian forecasts.
    pub use_pca: bool,
    pub pca_threshold: f64,
    pub fit: FitOptions,
    /// Start each window's fit from the previous window's estimate.
    pub warm_start: bool,
    pub seed: u64,
    /// Upper bound on the number of windows (0 = all).
    pub max_windows: usize,
}

impl Default for RollingConfig {
    fn default() -> Self {
        Self {
            window: 156,
            stride: 1,
            k_short: 2,
            horizons: vec![1, 12, 52],
            levels: vec![0.95, 0.99],
            methods: vec![ForecastMethod::GaussianClosedForm, ForecastMethod::Bootstrap],
            n_paths: 10_000,
            drift_mode: DriftMode::ExactRecursion,
            use_pca: true,
            pca_threshold: 0.95,
            fit: FitOptions::default(),
            warm_start: false,
            seed: 0,
            max_windows: 0,
        }
    }
}

/// Estimates and PCA summary of one window.
#[derive(Debug, Clone)]
pub struct WindowSummary {
    pub end: NaiveDate,
    pub params: ModelParams,
    pub n_iters: usize,
    pub converged: bool,
    pub neg_log_lik: f64,
    pub n_components: usize,
    pub explained: f64,
    pub eigenvalues: DVector<f64>,
}

/// Key of one envelope series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SeriesKey {
    pub method: ForecastMethod,
    pub horizon: usize,
    /// Coverage level in basis points (0.95 → 9500), to keep the key orderable.
    pub level_bp: u32,
}

impl SeriesKey {
    pub fn level(&self) -> f64 {
        self.level_bp as f64 / 10_000.0
    }

    /// File stem such as `bootstrap_h12_p95`.
    pub fn stem(&self) -> String {
        let pct = self.level_bp as f64 / 100.0;
        let pct = if pct.fract() == 0.0 {
            format!("{}", pct as u32)
        } else {
            format!("{pct}").replace('.', "_")
        };
        format!("{}_h{}_p{}", self.method.as_str(), self.horizon, pct)
    }
}

fn level_bp(p: f64) -> u32 {
    (p * 10_000.0).round() as u32
}

/// Everything the rolling sweep produces.
#[derive(Debug, Clone)]
pub struct RollingOutput {
    pub windows: Vec<WindowSummary>,
    pub failed_windows: Vec<(NaiveDate, String)>,
    pub envelopes: BTreeMap<SeriesKey, Vec<DatedEnvelope>>,
    pub exceedances: BTreeMap<SeriesKey, Vec<ExceedanceSeries>>,
    pub reports: Vec<CoverageReport>,
}

/// Deterministic per-task seed (SplitMix64 finaliser over the inputs).
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut z = master;
    for p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(*p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

struct WindowOutcome {
    summary: WindowSummary,
    envelopes: Vec<(SeriesKey, DatedEnvelope)>,
}

fn run_window(
    sys: &CurveSystem,
    states: &[StateVector],
    y_all: &DMatrix<f64>,
    blocks: &LambdaBlocks,
    cfg: &RollingConfig,
    end: usize,
    start: Option<ModelParams>,
) -> Result<WindowOutcome> {
    let l = cfg.window;
    let y = y_all.rows(end - l, l).into_owned();
    let window = EstimationWindow::new(sys, y)?;
    let est = match start {
        Some(p) => fit_from(&window, p, &cfg.fit)?,
        None => fit(&window, blocks, &cfg.fit)?,
    };
    let params = est.params.clone();
    let pca = select_components(&decompose(&params.covariance())?, cfg.pca_threshold)?;
    let full = ScenarioModel::from_params(sys, &params)?;
    let gaussian = if cfg.use_pca {
        full.with_vol(pca.w.clone())?
    } else {
        full.clone()
    };
    let pool = residuals(&window, &params)?;
    let x = &states[end].values;
    let origin = states[end].date.ok_or_else(|| Error::Input("state without a date".into()))?;

    let mut envelopes = Vec::new();
    for (hi, &h) in cfg.horizons.iter().enumerate() {
        let Some(target) = states.get(end + h).and_then(|s| s.date) else {
            continue;
        };
        for (mi, &method) in cfg.methods.iter().enumerate() {
            let envs: Vec<ForecastEnvelope> = match method {
                ForecastMethod::GaussianClosedForm => {
                    let m = gaussian_moments(sys, &gaussian, x, h, cfg.drift_mode)?;
                    cfg.levels
                        .iter()
                        .map(|p| envelope_from_moments(&m, *p))
                        .collect::<Result<_>>()?
                }
                ForecastMethod::GaussianMc | ForecastMethod::Bootstrap => {
                    let spec = ForecastSpec {
                        horizon: h,
                        n_paths: cfg.n_paths,
                        levels: cfg.levels.clone(),
                        method,
                        drift_mode: cfg.drift_mode,
                        seed: derive_seed(cfg.seed, &[end as u64, hi as u64, mi as u64]),
                    };
                    let model = if method == ForecastMethod::Bootstrap { &full } else { &gaussian };
                    let ens = simulate_paths(sys, model, x, &spec, Some(&pool))?;
                    cfg.levels
                        .iter()
                        .map(|p| envelope_from_ensemble(&ens, *p, method))
                        .collect::<Result<_>>()?
                }
            };
            for env in envs {
                let key = SeriesKey {
                    method,
                    horizon: h,
                    level_bp: level_bp(env.level),
                };
                envelopes.push((
                    key,
                    DatedEnvelope {
                        origin,
                        target,
                        envelope: env,
                    },
                ));
            }
        }
    }
    Ok(WindowOutcome {
        summary: WindowSummary {
            end: origin,
            params,
            n_iters: est.n_iters,
            converged: est.converged,
            neg_log_lik: est.neg_log_lik,
            n_components: pca.n_components,
            explained: pca.explained,
            eigenvalues: pca.eigenvalues.clone(),
        },
        envelopes,
    })
}

/// Window end indices (state indices) of the sweep.
pub fn window_ends(n_states: usize, cfg: &RollingConfig) -> Vec<usize> {
    let min_h = cfg.horizons.iter().copied().min().unwrap_or(1);
    if n_states < cfg.window + 1 + min_h {
        return Vec::new();
    }
    let last = n_states - 1 - min_h;
    let mut ends: Vec<usize> = (cfg.window..=last).step_by(cfg.stride.max(1)).collect();
    if cfg.max_windows > 0 {
        ends.truncate(cfg.max_windows);
    }
    ends
}

/// Rolling estimation, forecasting and coverage testing over a state history.
///
/// For every window end `t_k` the parameters are fitted on the `window`
/// increments ending at `t_k`; each horizon `δ` with a realised state at
/// `t_k + δ` gets one envelope per method and level. Windows are processed
/// in parallel unless `warm_start` chains them.
pub fn run_rolling(
    sys: &CurveSystem,
    states: &[StateVector],
    labels: &[String],
    cfg: &RollingConfig,
) -> Result<RollingOutput> {
    if labels.len() != sys.dim() {
        return Err(Error::dim("bucket labels", sys.dim(), labels.len()));
    }
    if cfg.window < 2 {
        return Err(Error::Config("window must hold at least 2 increments".into()));
    }
    if cfg.horizons.contains(&0) {
        return Err(Error::Config("horizons must be >= 1 step".into()));
    }
    let ends = window_ends(states.len(), cfg);
    if ends.is_empty() {
        return Err(Error::Input(format!(
            "history of {} dates is too short for a {}-step window",
            states.len(),
            cfg.window
        )));
    }
    info!("rolling sweep over {} windows", ends.len());
    let y_all = compute_y_series(sys, states)?;
    let blocks = LambdaBlocks::standard(sys, cfg.k_short)?;

    let outcomes: Vec<(usize, Result<WindowOutcome>)> = if cfg.warm_start {
        let mut prev: Option<ModelParams> = None;
        ends.iter()
            .map(|&e| {
                let r = run_window(sys, states, &y_all, &blocks, cfg, e, prev.clone());
                if let Ok(o) = &r {
                    prev = Some(o.summary.params.clone());
                }
                (e, r)
            })
            .collect()
    } else {
        ends.par_iter()
            .map(|&e| (e, run_window(sys, states, &y_all, &blocks, cfg, e, None)))
            .collect()
    };

    let mut windows = Vec::new();
    let mut failed_windows = Vec::new();
    let mut envelopes: BTreeMap<SeriesKey, Vec<DatedEnvelope>> = BTreeMap::new();
    for (e, r) in outcomes {
        match r {
            Ok(o) => {
                windows.push(o.summary);
                for (k, env) in o.envelopes {
                    envelopes.entry(k).or_default().push(env);
                }
            }
            Err(err) => {
                let date = states[e].date.unwrap_or_default();
                warn!("window ending {date} skipped: {err}");
                failed_windows.push((date, err.to_string()));
            }
        }
    }
    if windows.is_empty() {
        return Err(Error::Numerical("every estimation window failed".into()));
    }

    let mut exceedances = BTreeMap::new();
    for (key, envs) in &envelopes {
        exceedances.insert(*key, count_exceedances(envs, states, key.horizon)?);
    }
    let mut reports = Vec::new();
    let mut groups: BTreeMap<(ForecastMethod, usize), Vec<ExceedanceSeries>> = BTreeMap::new();
    for (key, series) in &exceedances {
        groups
            .entry((key.method, key.horizon))
            .or_default()
            .extend(series.iter().cloned());
    }
    for ((method, horizon), series) in groups {
        reports.push(CoverageReport::from_series(method.as_str(), horizon, labels, &series)?);
    }
    Ok(RollingOutput {
        windows,
        failed_windows,
        envelopes,
        exceedances,
        reports,
    })
}
