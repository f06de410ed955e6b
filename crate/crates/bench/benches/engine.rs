//! Hot paths: operator construction, fitting one window, Gaussian moments
//! and Monte Carlo paths.

use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use mchjm_core::dynamics::{compute_y_series, LambdaBlocks, StateVector};
use mchjm_core::fixture::{default_system, initial_state, simulate_states, true_params, K_SHORT, WEEKLY_DT};
use mchjm_core::scenario::{DriftMode, ForecastMethod, ForecastSpec};
use mchjm_core::{fit, gaussian_moments, simulate_paths, BucketGrid, EstimationWindow, FitOptions, ScenarioModel, SplineOperators};

fn spline(c: &mut Criterion) {
    let grid = BucketGrid::from_labels(&["1m", "3m", "6m", "1y", "2y", "3y", "5y", "7y", "10y", "15y", "20y", "30y"]).unwrap();
    c.bench_function("spline_operators_12", |b| {
        b.iter(|| SplineOperators::new(black_box(&grid)))
    });
}

fn estimation(c: &mut Criterion) {
    let sys = default_system(WEEKLY_DT).unwrap();
    let p = true_params(&sys).unwrap();
    let states: Vec<StateVector> = simulate_states(&sys, &p, &initial_state(&sys), 157, 1)
        .unwrap()
        .into_iter()
        .map(|x| StateVector::new(None, x).unwrap())
        .collect();
    let window = EstimationWindow::new(&sys, compute_y_series(&sys, &states).unwrap()).unwrap();
    let blocks = LambdaBlocks::standard(&sys, K_SHORT).unwrap();
    let opts = FitOptions::default();
    c.bench_function("fit_156x22", |b| b.iter(|| fit(black_box(&window), &blocks, &opts).unwrap()));
}

fn forecasting(c: &mut Criterion) {
    let sys = default_system(WEEKLY_DT).unwrap();
    let p = true_params(&sys).unwrap();
    let model = ScenarioModel::from_params(&sys, &p).unwrap();
    let x = initial_state(&sys);
    c.bench_function("gaussian_moments_h52", |b| {
        b.iter(|| gaussian_moments(&sys, &model, black_box(&x), 52, DriftMode::ExactRecursion).unwrap())
    });
    let spec = ForecastSpec {
        horizon: 12,
        n_paths: 2_000,
        levels: vec![0.95],
        method: ForecastMethod::GaussianMc,
        drift_mode: DriftMode::ExactRecursion,
        seed: 0,
    };
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    group.bench_function("mc_2000_paths_h12", |b| {
        b.iter_batched(|| spec.clone(), |s| simulate_paths(&sys, &model, &x, &s, None).unwrap(), BatchSize::SmallInput)
    });
    group.finish();
}

criterion_group!(benches, spline, estimation, forecasting);
criterion_main!(benches);
