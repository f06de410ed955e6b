//! Multi-curve HJM scenario engine.
//!
//! The discount curve is modelled through its instantaneous forwards and each
//! tenor curve through its FRA rates, all on fixed bucket grids joined by
//! Bessel-spline operators. The stacked state follows a VAR(1) whose drift is
//! tied to the volatilities by the no-arbitrage condition plus a step-wise
//! constant market price of risk. The crate covers estimation by maximum
//! likelihood, principal components of the fitted covariance, horizon
//! forecasts and the rolling coverage backtest.

pub mod backtest;
pub mod config;
pub mod curve;
pub mod dynamics;
pub mod error;
pub mod estimation;
pub mod fixture;
pub mod io;
pub mod optimize;
pub mod pca;
pub mod pipeline;
pub mod scenario;
pub mod spline;

pub use backtest::{
    count_exceedances, kupiec_lr, run_rolling, CoverageReport, ExceedanceSeries, KupiecResult,
    RollingConfig, RollingOutput,
};
pub use config::RunConfig;
pub use curve::{CurveHistory, CurveSnapshot};
pub use dynamics::{drift_from_params, CurveSystem, LambdaBlocks, ModelParams, StateVector, TenorSpec};
pub use error::{Error, Result};
pub use estimation::{bootstrap_errors, fit, BootstrapOptions, EstimationResult, EstimationWindow, FitOptions};
pub use pca::{decompose, select_components, PcaResult};
pub use scenario::{
    gaussian_moments, simulate_paths, DriftMode, ForecastEnvelope, ForecastMethod, ForecastSpec,
    ScenarioModel,
};
pub use spline::{BucketGrid, SplineOperators};
