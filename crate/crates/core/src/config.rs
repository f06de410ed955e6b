//! Run configuration read from TOML, with every default filled in so the
//! resolved file can be echoed next to the outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backtest::RollingConfig;
use crate::curve::tenor_to_years;
use crate::dynamics::{CurveSystem, TenorSpec};
use crate::error::{Error, Result};
use crate::estimation::{BootstrapOptions, FitOptions};
use crate::fixture::{DISCOUNT_LABELS, EUR3M_LABELS};
use crate::scenario::{DriftMode, ForecastMethod};
use crate::spline::BucketGrid;

/// One curve of the system. The first curve is the discounting curve and has no tenor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveConfig {
    pub id: String,
    /// Accrual label such as `3m`; absent for the discounting curve.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tenor: Option<String>,
    pub buckets: Vec<String>,
}

impl CurveConfig {
    pub fn tenor_years(&self) -> Result<f64> {
        match &self.tenor {
            Some(t) => tenor_to_years(t),
            None => Ok(0.0),
        }
    }

    pub fn grid(&self) -> Result<BucketGrid> {
        BucketGrid::from_labels(&self.buckets)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    /// Increments per window (156 weekly steps = 3 years).
    pub window: usize,
    /// Steps between consecutive window ends.
    pub stride: usize,
    /// Discount buckets sharing the short-end premium.
    pub k_short: usize,
    /// Relative-change tolerance γ.
    pub tol: f64,
    pub max_iters: usize,
    pub n_boot: usize,
    pub bootstrap_warm_start: bool,
    pub max_failure_rate: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            window: 156,
            stride: 1,
            k_short: 2,
            tol: 1e-4,
            max_iters: 500,
            n_boot: 500,
            bootstrap_warm_start: true,
            max_failure_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaConfig {
    /// Replace `Σ` by the retained components in Gaussian forecasts.
    pub enabled: bool,
    pub threshold: f64,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            threshold: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    /// Horizons in steps (1 week, 3 months, 1 year for weekly data).
    pub horizons: Vec<usize>,
    pub levels: Vec<f64>,
    pub methods: Vec<ForecastMethod>,
    pub n_paths: usize,
    pub drift_mode: DriftMode,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            horizons: vec![1, 12, 52],
            levels: vec![0.95, 0.99],
            methods: vec![ForecastMethod::GaussianClosedForm, ForecastMethod::Bootstrap],
            n_paths: 10_000,
            drift_mode: DriftMode::ExactRecursion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Long-format yield CSV.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

/// Complete run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub curves: Vec<CurveConfig>,
    /// Year fraction of one step after sampling.
    pub dt: f64,
    /// Keep every n-th input row (5 turns daily rows into weekly steps).
    pub sample_every: usize,
    pub seed: u64,
    /// Cap on rolling windows, 0 for all.
    pub max_windows: usize,
    pub estimation: EstimationConfig,
    pub pca: PcaConfig,
    pub forecast: ForecastConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let labels = |l: &[&str]| l.iter().map(|s| s.to_string()).collect();
        Self {
            curves: vec![
                CurveConfig {
                    id: "EONIA".into(),
                    tenor: None,
                    buckets: labels(&DISCOUNT_LABELS),
                },
                CurveConfig {
                    id: "EUR3M".into(),
                    tenor: Some("3m".into()),
                    buckets: labels(&EUR3M_LABELS),
                },
            ],
            dt: 1.0 / 52.0,
            sample_every: 5,
            seed: 0,
            max_windows: 0,
            estimation: EstimationConfig::default(),
            pca: PcaConfig::default(),
            forecast: ForecastConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// The configuration with all defaults spelled out.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let (disc, rest) = self
            .curves
            .split_first()
            .ok_or_else(|| Error::Config("at least one curve is required".into()))?;
        if disc.tenor.is_some() {
            return Err(Error::Config(format!(
                "the first curve ({}) is the discounting curve and takes no tenor",
                disc.id
            )));
        }
        for c in &self.curves {
            c.grid()?;
            if self.curves.iter().filter(|o| o.id == c.id).count() > 1 {
                return Err(Error::Config(format!("curve id {} appears twice", c.id)));
            }
        }
        for c in rest {
            if c.tenor.is_none() {
                return Err(Error::Config(format!("curve {} needs a tenor", c.id)));
            }
            c.tenor_years()?;
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.sample_every == 0 {
            return Err(Error::Config("sample_every must be >= 1".into()));
        }
        let e = &self.estimation;
        if e.window < 2 || e.stride == 0 {
            return Err(Error::Config("window must be >= 2 and stride >= 1".into()));
        }
        if e.k_short == 0 || e.k_short >= disc.buckets.len() {
            return Err(Error::Config(format!(
                "k_short must lie in 1..{}, got {}",
                disc.buckets.len(),
                e.k_short
            )));
        }
        if !(e.tol > 0.0) || e.max_iters == 0 {
            return Err(Error::Config("tol must be positive and max_iters >= 1".into()));
        }
        if !(0.0..=1.0).contains(&e.max_failure_rate) {
            return Err(Error::Config("max_failure_rate must lie in [0, 1]".into()));
        }
        if !(self.pca.threshold > 0.0 && self.pca.threshold <= 1.0) {
            return Err(Error::Config("pca threshold must lie in (0, 1]".into()));
        }
        let f = &self.forecast;
        if f.horizons.is_empty() || f.horizons.contains(&0) {
            return Err(Error::Config("horizons must be non-empty and >= 1".into()));
        }
        if f.levels.is_empty() || f.levels.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::Config("coverage levels must lie in (0, 1)".into()));
        }
        if f.methods.is_empty() {
            return Err(Error::Config("at least one forecast method is required".into()));
        }
        if f.methods.iter().any(|m| *m != ForecastMethod::GaussianClosedForm) && f.n_paths < 2 {
            return Err(Error::Config("Monte Carlo methods need n_paths >= 2".into()));
        }
        Ok(())
    }

    /// The curve system described by `curves` and `dt`.
    pub fn system(&self) -> Result<CurveSystem> {
        let (disc, rest) = self
            .curves
            .split_first()
            .ok_or_else(|| Error::Config("at least one curve is required".into()))?;
        let tenors = rest
            .iter()
            .map(|c| {
                Ok(TenorSpec {
                    curve_id: c.id.clone(),
                    tenor: c.tenor_years()?,
                    grid: c.grid()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        CurveSystem::new(disc.id.clone(), disc.grid()?, tenors, self.dt)
    }

    /// Labels `curve:bucket` in state order.
    pub fn bucket_labels(&self) -> Vec<String> {
        self.curves
            .iter()
            .flat_map(|c| c.buckets.iter().map(move |b| format!("{}:{}", c.id, b)))
            .collect()
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            tol: self.estimation.tol,
            max_iters: self.estimation.max_iters,
        }
    }

    pub fn bootstrap_options(&self) -> BootstrapOptions {
        BootstrapOptions {
            n_boot: self.estimation.n_boot,
            seed: self.seed,
            warm_start: self.estimation.bootstrap_warm_start,
            max_failure_rate: self.estimation.max_failure_rate,
        }
    }

    pub fn rolling_config(&self) -> RollingConfig {
        RollingConfig {
            window: self.estimation.window,
            stride: self.estimation.stride,
            k_short: self.estimation.k_short,
            horizons: self.forecast.horizons.clone(),
            levels: self.forecast.levels.clone(),
            methods: self.forecast.methods.clone(),
            n_paths: self.forecast.n_paths,
            drift_mode: self.forecast.drift_mode,
            use_pca: self.pca.enabled,
            pca_threshold: self.pca.threshold,
            fit: self.fit_options(),
            warm_start: false,
            seed: self.seed,
            max_windows: self.max_windows,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(cfg.system().unwrap().dim(), 22);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 7\n[estimation]\ntol = 0.01\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.estimation.tol, 0.01);
        assert_eq!(cfg.estimation.n_boot, 500);
        assert_eq!(cfg.forecast.horizons, vec![1, 12, 52]);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml_str("dt = -1.0").is_err());
        assert!(RunConfig::from_toml_str("unknown = 1").is_err());
        assert!(RunConfig::from_toml_str("[forecast]\nlevels = [1.0]").is_err());
        assert!(RunConfig::from_toml_str("[forecast]\nmethods = [\"nope\"]").is_err());
        let bad = "[[curves]]\nid = \"A\"\ntenor = \"3m\"\nbuckets = [\"1m\", \"1y\", \"2y\"]\n";
        assert!(RunConfig::from_toml_str(bad).is_err());
    }
}
