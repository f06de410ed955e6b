use approx::assert_relative_eq;
use mchjm_core::dynamics::{compute_y_series, drift_from_params, LambdaBlocks, ModelParams, StateVector};
use mchjm_core::estimation::*;
use mchjm_core::fixture::{default_system, initial_state, simulate_states, true_params, K_SHORT, WEEKLY_DT};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn simulated_window(n: usize, seed: u64) -> (EstimationWindow, LambdaBlocks, ModelParams) {
    let sys = default_system(WEEKLY_DT).unwrap();
    let p = true_params(&sys).unwrap();
    let states: Vec<StateVector> = simulate_states(&sys, &p, &initial_state(&sys), n + 1, seed)
        .unwrap()
        .into_iter()
        .map(|x| StateVector::new(None, x).unwrap())
        .collect();
    let y = compute_y_series(&sys, &states).unwrap();
    let blocks = LambdaBlocks::standard(&sys, K_SHORT).unwrap();
    (EstimationWindow::new(&sys, y).unwrap(), blocks, p)
}

fn one_block(d: usize) -> LambdaBlocks {
    LambdaBlocks::new(vec!["lambda".into()], vec![0; d]).unwrap()
}

#[test]
fn uncorrelated_likelihood_is_sum_of_univariate_terms() {
    let sys = default_system(WEEKLY_DT).unwrap();
    let (window, blocks, truth) = simulated_window(156, 1);
    let d = sys.dim();
    let params = ModelParams::new(truth.omega.clone(), DMatrix::identity(d, d), truth.lambda.clone(), blocks).unwrap();
    let mu = drift_from_params(&sys, &params).unwrap();
    let dt = WEEKLY_DT;
    let mut oracle = 0.0;
    for j in 0..d {
        let w = params.omega[j];
        for k in 0..window.len() {
            let z = (window.y()[(k, j)] - mu[j] * dt) / (w * dt.sqrt());
            oracle += 0.5 * (2.0 * std::f64::consts::PI).ln() + w.ln() + 0.5 * z * z;
        }
    }
    assert_relative_eq!(neg_log_likelihood(&window, &params).unwrap(), oracle, max_relative = 1e-10);
}

#[test]
fn correlated_likelihood_matches_multivariate_density() {
    // ℒ + L·Σ ln √dt is the negative log density of y under N(μ dt, Σ dt).
    let sys = default_system(WEEKLY_DT).unwrap();
    let (window, _, truth) = simulated_window(60, 2);
    let d = sys.dim();
    let dt = WEEKLY_DT;
    let mu = drift_from_params(&sys, &truth).unwrap();
    let cov = truth.covariance() * dt;
    let chol = cov.clone().cholesky().unwrap();
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mut density = 0.0;
    for k in 0..window.len() {
        let r = window.y().row(k).transpose() - &mu * dt;
        let q = r.dot(&chol.solve(&r));
        density += 0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + q);
    }
    let jacobian = window.len() as f64 * d as f64 * 0.5 * dt.ln();
    let value = neg_log_likelihood(&window, &truth).unwrap();
    assert_relative_eq!(value + jacobian, density, max_relative = 1e-10);
}

#[test]
fn doubling_omega_halves_residuals_without_drift() {
    let y = DMatrix::from_fn(25, 3, |k, j| ((k * 5 + j) as f64).cos() * 0.01);
    let window = EstimationWindow::from_parts(y, WEEKLY_DT, DMatrix::zeros(3, 3)).unwrap();
    let omega = DVector::from_row_slice(&[0.01, 0.02, 0.03]);
    let p1 = ModelParams::new(omega.clone(), DMatrix::identity(3, 3), DVector::zeros(1), one_block(3)).unwrap();
    let p2 = p1.with_omega(omega * 2.0);
    let e1 = residuals(&window, &p1).unwrap();
    let e2 = residuals(&window, &p2).unwrap();
    assert!((e1 / 2.0 - e2).amax() < 1e-15);
}

#[test]
fn likelihood_is_invariant_to_bucket_order() {
    let d = 4;
    let y = DMatrix::from_fn(40, d, |k, j| ((k * 3 + j * 11) as f64).sin() * 0.01);
    let p = DMatrix::from_fn(d, d, |i, j| if j <= i { 0.2 + 0.1 * (i + j) as f64 } else { 0.0 });
    let gamma = DMatrix::from_fn(d, d, |i, j| 0.6f64.powi((i as i32 - j as i32).abs()));
    let omega = DVector::from_row_slice(&[0.01, 0.015, 0.02, 0.012]);
    let blocks = LambdaBlocks::new(vec!["a".into(), "b".into()], vec![0, 0, 1, 1]).unwrap();
    // The λ term goes through the Cholesky factor of Γ, which depends on bucket order.
    let lambda = DVector::zeros(2);
    let base = ModelParams::new(omega.clone(), gamma.clone(), lambda.clone(), blocks).unwrap();
    let w = EstimationWindow::from_parts(y.clone(), WEEKLY_DT, p.clone()).unwrap();

    let perm = [2usize, 0, 3, 1];
    let py = DMatrix::from_fn(y.nrows(), d, |k, j| y[(k, perm[j])]);
    let pp = DMatrix::from_fn(d, d, |i, j| p[(perm[i], perm[j])]);
    let pg = DMatrix::from_fn(d, d, |i, j| gamma[(perm[i], perm[j])]);
    let pw = DVector::from_fn(d, |i, _| omega[perm[i]]);
    let pblocks = LambdaBlocks::new(vec!["a".into(), "b".into()], perm.iter().map(|&i| i / 2).collect()).unwrap();
    let permuted = ModelParams::new(pw, pg, lambda, pblocks).unwrap();
    let pwin = EstimationWindow::from_parts(py, WEEKLY_DT, pp).unwrap();

    assert_relative_eq!(
        neg_log_likelihood(&w, &base).unwrap(),
        neg_log_likelihood(&pwin, &permuted).unwrap(),
        max_relative = 1e-12
    );
}

#[test]
fn pearson_start_is_sample_moments() {
    let (window, _, _) = simulated_window(80, 3);
    let (omega, corr) = pearson_start(&window);
    let y = window.y();
    let l = y.nrows() as f64;
    for i in [0usize, 5, 17] {
        let ci = y.column(i);
        let mi = ci.mean();
        let var = ci.iter().map(|v| (v - mi).powi(2)).sum::<f64>() / (l - 1.0);
        assert_relative_eq!(omega[i], (var / WEEKLY_DT).sqrt(), max_relative = 1e-10);
        let j = i + 1;
        let cj = y.column(j);
        let mj = cj.mean();
        let cov = ci.iter().zip(cj.iter()).map(|(a, b)| (a - mi) * (b - mj)).sum::<f64>() / (l - 1.0);
        let vj = cj.iter().map(|v| (v - mj).powi(2)).sum::<f64>() / (l - 1.0);
        assert_relative_eq!(corr[(i, j)], cov / (var * vj).sqrt(), max_relative = 1e-9);
    }
}

#[test]
fn fit_is_coordinatewise_stationary() {
    let (window, blocks, _) = simulated_window(156, 4);
    let r = fit(&window, &blocks, &FitOptions::default()).unwrap();
    assert!(r.converged);
    let best = neg_log_likelihood(&window, &r.params).unwrap();
    let start = initial_params(&window, &blocks).unwrap();
    assert!(best < neg_log_likelihood(&window, &start).unwrap());
    // The fitted Γ is refreshed after the last sweep, so allow a small slack.
    let slack = 1e-3;
    for b in 0..r.params.lambda.len() {
        for h in [-0.1, 0.1] {
            let mut l = r.params.lambda.clone();
            l[b] += h;
            let v = neg_log_likelihood(&window, &r.params.with_lambda(l)).unwrap();
            assert!(v > best - slack, "lambda {b} {h}: {v} vs {best}");
        }
    }
    for i in 0..r.params.omega.len() {
        for h in [0.99, 1.01] {
            let mut w = r.params.omega.clone();
            w[i] *= h;
            let v = neg_log_likelihood(&window, &r.params.with_omega(w)).unwrap();
            assert!(v > best - slack, "omega {i} x{h}: {v} vs {best}");
        }
    }
}

#[test]
fn long_window_recovers_volatilities() {
    let (window, blocks, truth) = simulated_window(3000, 5);
    let r = fit(&window, &blocks, &FitOptions::default()).unwrap();
    for i in 0..truth.omega.len() {
        let rel = (r.params.omega[i] / truth.omega[i] - 1.0).abs();
        // SE of a volatility from n draws is about 1/√(2n) ≈ 1.3%.
        assert!(rel < 0.05, "omega {i}: {} vs {}", r.params.omega[i], truth.omega[i]);
    }
    assert!((r.params.gamma() - truth.gamma()).amax() < 0.1);
}

#[test]
fn looser_tolerance_needs_no_more_sweeps() {
    let (window, blocks, _) = simulated_window(156, 6);
    let tight = fit(&window, &blocks, &FitOptions { tol: 1e-4, ..Default::default() }).unwrap();
    let loose = fit(&window, &blocks, &FitOptions { tol: 1e-2, ..Default::default() }).unwrap();
    assert!(loose.n_iters <= tight.n_iters);
    assert_eq!(tight.theta_path.len(), tight.n_iters + 1);
}

#[test]
fn fit_rejects_bad_options() {
    let (window, blocks, _) = simulated_window(30, 7);
    assert!(fit(&window, &blocks, &FitOptions { tol: 0.0, ..Default::default() }).is_err());
    let wrong = one_block(3);
    assert!(fit(&window, &wrong, &FitOptions::default()).is_err());
}

#[test]
fn bootstrap_is_reproducible_and_thread_independent() {
    let (window, blocks, _) = simulated_window(104, 8);
    let fit_opts = FitOptions::default();
    let r = fit(&window, &blocks, &fit_opts).unwrap();
    let boot = BootstrapOptions { n_boot: 8, seed: 42, ..Default::default() };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| bootstrap_errors(&window, &r, &fit_opts, &boot).unwrap())
    };
    let a = run(1);
    let b = run(3);
    let sa = a.std_errors.unwrap();
    assert_eq!(sa.omega, b.std_errors.unwrap().omega);
    assert_eq!(a.bias.unwrap().lambda, b.bias.unwrap().lambda);
    assert_eq!(a.n_boot, 8);
    assert_eq!(a.failed_replicas, 0);
    assert!(sa.lambda.iter().chain(sa.omega.iter()).all(|v| v.is_finite() && *v > 0.0));
}

#[test]
fn bootstrap_smoke_and_guards() {
    let (window, blocks, _) = simulated_window(60, 9);
    let fit_opts = FitOptions::default();
    let r = fit(&window, &blocks, &fit_opts).unwrap();
    let two = BootstrapOptions { n_boot: 2, seed: 1, ..Default::default() };
    assert!(bootstrap_errors(&window, &r, &fit_opts, &two).is_ok());
    let one = BootstrapOptions { n_boot: 1, ..two };
    assert!(bootstrap_errors(&window, &r, &fit_opts, &one).is_err());
}

#[test]
fn window_validation() {
    assert!(EstimationWindow::from_parts(DMatrix::zeros(0, 2), 1.0, DMatrix::zeros(2, 2)).is_err());
    assert!(EstimationWindow::from_parts(DMatrix::zeros(3, 2), 1.0, DMatrix::zeros(3, 3)).is_err());
    let mut y = DMatrix::zeros(3, 2);
    y[(1, 1)] = f64::NAN;
    assert!(EstimationWindow::from_parts(y, 1.0, DMatrix::zeros(2, 2)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scalar_likelihood_closed_form(
        ys in proptest::collection::vec(-0.05f64..0.05, 1..30),
        w in 0.001f64..0.5,
        dt in 0.001f64..1.0,
    ) {
        let n = ys.len();
        let window = EstimationWindow::from_parts(DMatrix::from_vec(n, 1, ys.clone()), dt, DMatrix::zeros(1, 1)).unwrap();
        let p = ModelParams::new(DVector::from_element(1, w), DMatrix::identity(1, 1), DVector::zeros(1), one_block(1)).unwrap();
        let q: f64 = ys.iter().map(|y| y * y).sum::<f64>() / (w * w * dt);
        let expected = n as f64 * (0.5 * (2.0 * std::f64::consts::PI).ln() + w.ln()) + 0.5 * q;
        let got = neg_log_likelihood(&window, &p).unwrap();
        prop_assert!((got - expected).abs() <= 1e-10 * expected.abs().max(1.0));
    }
}
