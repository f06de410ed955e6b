//! `mchjm`: command-line front end of the multi-curve HJM engine.
//!
//! Exit codes: 0 on success, 1 for bad input or configuration, 2 when a
//! numerical stage fails.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use chrono::{Duration, NaiveDate};
use clap::{Args, Parser, Subcommand};
use log::info;
use nalgebra::DVector;

use mchjm_core::backtest::{count_exceedances, kupiec_lr, run_rolling, CoverageReport, DatedEnvelope, SeriesKey};
use mchjm_core::config::RunConfig;
use mchjm_core::curve::CurveHistory;
use mchjm_core::dynamics::{compute_y_series, CurveSystem, LambdaBlocks, StateVector};
use mchjm_core::estimation::{bootstrap_errors, fit, EstimationResult, EstimationWindow};
use mchjm_core::fixture::{generate, FixtureSpec};
use mchjm_core::io::{
    fmt_num, load_history, read_envelopes, save_history, write_coverage, write_envelopes,
    write_rolling_outputs,
};
use mchjm_core::pca::{decompose, select_components};
use mchjm_core::pipeline::states_from_histories;
use mchjm_core::scenario::{
    envelope_from_ensemble, envelope_from_moments, gaussian_moments, simulate_paths, DriftMode,
    ForecastMethod, ForecastSpec, ScenarioModel,
};
use mchjm_core::Error;

/// `println!` that gives up quietly when stdout is closed (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "mchjm", version, about = "Multi-curve HJM estimation, forecasting and coverage backtests")]
struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for bootstrap and Monte Carlo draws.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// `exact-recursion` or `linear-drift`.
    #[arg(long, global = true)]
    drift_mode: Option<DriftMode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Long-format yield CSV (`date,curve_id,tenor_label,yield`).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Convert yields to instantaneous forwards and FRA rates.
    Transform(DataArgs),
    /// Fit one window and bootstrap standard errors.
    Estimate {
        #[command(flatten)]
        data: DataArgs,
        /// Last date of the window (defaults to the last date in the file).
        #[arg(long)]
        window_end: Option<NaiveDate>,
        /// Convergence tolerance γ.
        #[arg(long)]
        tol: Option<f64>,
        /// Bootstrap replicas (0 skips the bootstrap).
        #[arg(long)]
        n_boot: Option<usize>,
    },
    /// Principal components of the fitted covariance.
    Pca {
        #[command(flatten)]
        data: DataArgs,
        /// Last date of the window (defaults to the last date in the file).
        #[arg(long)]
        window_end: Option<NaiveDate>,
        /// Explained-variance threshold for the retained components.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Forecast envelopes from the last window.
    Forecast {
        #[command(flatten)]
        data: DataArgs,
        /// Origin of the forecasts (defaults to the last date in the file).
        #[arg(long)]
        window_end: Option<NaiveDate>,
        /// Horizons in steps (repeatable).
        #[arg(long)]
        horizon: Vec<usize>,
        /// Forecast methods (repeatable).
        #[arg(long)]
        method: Vec<ForecastMethod>,
    },
    /// Coverage tests from envelope files and realised curves, or from counts.
    Backtest {
        #[command(flatten)]
        data: DataArgs,
        /// Envelope CSV files written by `forecast` or `rolling`.
        #[arg(long)]
        envelopes: Vec<PathBuf>,
        /// Counts-only mode: `n1,n_obs,p` triples (repeatable).
        #[arg(long)]
        counts: Vec<String>,
    },
    /// Rolling estimation, forecasting and coverage testing.
    Rolling {
        #[command(flatten)]
        data: DataArgs,
        /// Cap on the number of windows.
        #[arg(long)]
        max_windows: Option<usize>,
    },
    /// Write a synthetic history simulated from known parameters.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 260)]
        n_dates: usize,
        #[arg(long)]
        fixture_seed: Option<u64>,
    },
}

struct Ctx {
    cfg: RunConfig,
    base: PathBuf,
}

impl Ctx {
    fn input(&self, data: &DataArgs) -> Result<PathBuf> {
        match (&data.input, &self.cfg.paths.input) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(p)) if p.is_relative() => Ok(self.base.join(p)),
            (None, Some(p)) => Ok(p.clone()),
            (None, None) => Err(Error::Config("no input file given (--input or paths.input)".into()).into()),
        }
    }

    fn out(&self, data: &DataArgs) -> Result<PathBuf> {
        let dir = match (&data.out, &self.cfg.paths.output) {
            (Some(p), _) => p.clone(),
            (None, Some(p)) if p.is_relative() => self.base.join(p),
            (None, Some(p)) => p.clone(),
            (None, None) => PathBuf::from("out"),
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn echo_config(&self, dir: &Path) -> Result<()> {
        let text = self.cfg.to_toml_string()?;
        fs::write(dir.join("resolved_config.toml"), text)?;
        Ok(())
    }

    /// Loads, samples and converts the input history.
    fn load(&self, data: &DataArgs) -> Result<(CurveSystem, Vec<CurveHistory>, Vec<StateVector>)> {
        let path = self.input(data)?;
        let histories: Vec<CurveHistory> = load_history(&path, &self.cfg.curves)
            .with_context(|| format!("loading {}", path.display()))?
            .iter()
            .map(|h| h.sample_every(self.cfg.sample_every))
            .collect();
        let sys = self.cfg.system().context("building the curve system")?;
        let states = states_from_histories(&sys, &histories).context("converting yields to model states")?;
        info!("{} dates, dimension {}", states.len(), sys.dim());
        Ok((sys, histories, states))
    }
}

fn window_end_index(states: &[StateVector], end: Option<NaiveDate>) -> Result<usize> {
    match end {
        None => Ok(states.len() - 1),
        Some(d) => states
            .iter()
            .position(|s| s.date == Some(d))
            .ok_or_else(|| Error::Input(format!("window end {d} is not a sampled date")).into()),
    }
}

fn fit_window(
    ctx: &Ctx,
    sys: &CurveSystem,
    states: &[StateVector],
    end: usize,
) -> Result<(EstimationWindow, EstimationResult)> {
    let l = ctx.cfg.estimation.window;
    if end < l {
        return Err(Error::Input(format!(
            "window of {l} increments needs {} dates before its end, only {end} available",
            l + 1
        ))
        .into());
    }
    let y = compute_y_series(sys, &states[end - l..=end])?;
    let window = EstimationWindow::new(sys, y)?;
    let blocks = LambdaBlocks::standard(sys, ctx.cfg.estimation.k_short)?;
    let est = fit(&window, &blocks, &ctx.cfg.fit_options()).context("fitting the window")?;
    info!("fit: {} sweeps, converged = {}", est.n_iters, est.converged);
    Ok((window, est))
}

fn cmd_transform(ctx: &Ctx, data: &DataArgs) -> Result<()> {
    let (sys, histories, states) = ctx.load(data)?;
    let dir = ctx.out(data)?;
    let mut wtr = csv_writer(&dir.join("states.csv"))?;
    writeln!(wtr, "date,curve_id,tenor_label,kind,value")?;
    for s in &states {
        let mut offset = 0;
        for (b, h) in histories.iter().enumerate() {
            let kind = if b == 0 { "forward" } else { "fra" };
            for (j, label) in h.labels.iter().enumerate() {
                writeln!(
                    wtr,
                    "{},{},{},{},{}",
                    s.date.map(|d| d.to_string()).unwrap_or_default(),
                    h.curve_id,
                    label,
                    kind,
                    fmt_num(s.values[offset + j])
                )?;
            }
            offset += h.labels.len();
        }
    }
    debug_assert_eq!(sys.dim(), states[0].values.len());
    ctx.echo_config(&dir)?;
    say!("wrote {}", dir.join("states.csv").display());
    Ok(())
}

fn csv_writer(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    Ok(std::io::BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn cmd_estimate(ctx: &Ctx, data: &DataArgs, end: Option<NaiveDate>) -> Result<()> {
    let (sys, _, states) = ctx.load(data)?;
    let dir = ctx.out(data)?;
    let e = window_end_index(&states, end)?;
    let (window, mut est) = fit_window(ctx, &sys, &states, e)?;
    if ctx.cfg.estimation.n_boot > 0 {
        est = bootstrap_errors(&window, &est, &ctx.cfg.fit_options(), &ctx.cfg.bootstrap_options())
            .context("bootstrapping standard errors")?;
    }
    let names = est.theta_names();
    let theta = est.theta();
    let flat = |p: &Option<mchjm_core::estimation::ParamErrors>| -> Vec<Option<f64>> {
        match p {
            Some(p) => p.lambda.iter().chain(&p.omega).map(|v| Some(*v)).collect(),
            None => vec![None; theta.len()],
        }
    };
    let se = flat(&est.std_errors);
    let bias = flat(&est.bias);
    let mut wtr = csv_writer(&dir.join("estimate.csv"))?;
    writeln!(wtr, "parameter,estimate,std_error,bias")?;
    let opt = |v: Option<f64>| v.map(fmt_num).unwrap_or_default();
    for i in 0..theta.len() {
        writeln!(wtr, "{},{},{},{}", names[i], fmt_num(theta[i]), opt(se[i]), opt(bias[i]))?;
    }
    wtr.flush()?;
    let gamma: Vec<Vec<f64>> = est
        .params
        .gamma()
        .row_iter()
        .map(|r| r.iter().copied().collect())
        .collect();
    let summary = serde_json::json!({
        "window_end": states[e].date,
        "n_increments": window.len(),
        "sweeps": est.n_iters,
        "converged": est.converged,
        "neg_log_likelihood": est.neg_log_lik,
        "n_boot": est.n_boot,
        "failed_replicas": est.failed_replicas,
        "lambda_names": est.params.blocks.names(),
        "lambda": est.params.lambda.as_slice(),
        "omega": est.params.omega.as_slice(),
        "gamma": gamma,
    });
    fs::write(dir.join("estimate.json"), serde_json::to_string_pretty(&summary)?)?;
    ctx.echo_config(&dir)?;
    say!("sweeps: {}  converged: {}", est.n_iters, est.converged);
    for i in 0..est.params.lambda.len() {
        say!("{:<12} {:>12}  se {}", names[i], fmt_num(theta[i]), opt(se[i]));
    }
    Ok(())
}

fn cmd_pca(ctx: &Ctx, data: &DataArgs, end: Option<NaiveDate>) -> Result<()> {
    let (sys, _, states) = ctx.load(data)?;
    let dir = ctx.out(data)?;
    let e = window_end_index(&states, end)?;
    let (_, est) = fit_window(ctx, &sys, &states, e)?;
    let res = select_components(&decompose(&est.params.covariance())?, ctx.cfg.pca.threshold)?;
    let labels = ctx.cfg.bucket_labels();
    let mut wtr = csv_writer(&dir.join("pca_eigenvalues.csv"))?;
    writeln!(wtr, "component,eigenvalue,cumulative_explained")?;
    for m in 0..res.dim() {
        writeln!(wtr, "{},{},{}", m + 1, fmt_num(res.eigenvalues[m]), fmt_num(res.phi(m + 1)))?;
    }
    wtr.flush()?;
    let mut wtr = csv_writer(&dir.join("pca_w.csv"))?;
    let cols: Vec<String> = (1..=res.n_components).map(|m| format!("w_{m}")).collect();
    writeln!(wtr, "bucket,{}", cols.join(","))?;
    for (i, label) in labels.iter().enumerate() {
        let row: Vec<String> = res.w.row(i).iter().map(|v| fmt_num(*v)).collect();
        writeln!(wtr, "{label},{}", row.join(","))?;
    }
    wtr.flush()?;
    ctx.echo_config(&dir)?;
    say!(
        "F = {} components explain {:.2}% (threshold {:.2}%)",
        res.n_components,
        100.0 * res.explained,
        100.0 * ctx.cfg.pca.threshold
    );
    Ok(())
}

fn cmd_forecast(ctx: &Ctx, data: &DataArgs, end: Option<NaiveDate>) -> Result<()> {
    let (sys, _, states) = ctx.load(data)?;
    let dir = ctx.out(data)?;
    let e = window_end_index(&states, end)?;
    let (window, est) = fit_window(ctx, &sys, &states, e)?;
    let cfg = &ctx.cfg;
    let full = ScenarioModel::from_params(&sys, &est.params)?;
    let gaussian = if cfg.pca.enabled {
        let res = select_components(&decompose(&est.params.covariance())?, cfg.pca.threshold)?;
        full.with_vol(res.w.clone())?
    } else {
        full.clone()
    };
    let pool = mchjm_core::estimation::residuals(&window, &est.params)?;
    let origin = states[e].date.ok_or_else(|| anyhow!("state without a date"))?;
    // Step length in calendar days, for labelling target dates only.
    let step_days = if e > 0 {
        states[e - 1].date.map_or(7, |p| (origin - p).num_days())
    } else {
        7
    };
    let x: &DVector<f64> = &states[e].values;
    let labels = cfg.bucket_labels();
    let envdir = dir.join("envelopes");
    fs::create_dir_all(&envdir)?;
    for (hi, &h) in cfg.forecast.horizons.iter().enumerate() {
        let target = origin + Duration::days(step_days * h as i64);
        for (mi, &method) in cfg.forecast.methods.iter().enumerate() {
            let envs = match method {
                ForecastMethod::GaussianClosedForm => {
                    let m = gaussian_moments(&sys, &gaussian, x, h, cfg.forecast.drift_mode)?;
                    cfg.forecast
                        .levels
                        .iter()
                        .map(|p| envelope_from_moments(&m, *p))
                        .collect::<mchjm_core::Result<Vec<_>>>()?
                }
                _ => {
                    let spec = ForecastSpec {
                        horizon: h,
                        n_paths: cfg.forecast.n_paths,
                        levels: cfg.forecast.levels.clone(),
                        method,
                        drift_mode: cfg.forecast.drift_mode,
                        seed: mchjm_core::backtest::derive_seed(cfg.seed, &[e as u64, hi as u64, mi as u64]),
                    };
                    let model = if method == ForecastMethod::Bootstrap { &full } else { &gaussian };
                    let ens = simulate_paths(&sys, model, x, &spec, Some(&pool))?;
                    cfg.forecast
                        .levels
                        .iter()
                        .map(|p| envelope_from_ensemble(&ens, *p, method))
                        .collect::<mchjm_core::Result<Vec<_>>>()?
                }
            };
            for env in envs {
                let key = SeriesKey {
                    method,
                    horizon: h,
                    level_bp: (env.level * 10_000.0).round() as u32,
                };
                let path = envdir.join(format!("{}.csv", key.stem()));
                let dated = DatedEnvelope {
                    origin,
                    target,
                    envelope: env,
                };
                write_envelopes(fs::File::create(&path)?, h, &labels, std::slice::from_ref(&dated))?;
            }
        }
    }
    ctx.echo_config(&dir)?;
    say!("wrote envelopes to {}", envdir.display());
    Ok(())
}

fn parse_counts(s: &str) -> Result<(usize, usize, f64)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        bail!(Error::Input(format!("counts must look like n1,n_obs,p, got '{s}'")));
    }
    let bad = || Error::Input(format!("bad counts '{s}'"));
    Ok((
        parts[0].parse().map_err(|_| bad())?,
        parts[1].parse().map_err(|_| bad())?,
        parts[2].parse().map_err(|_| bad())?,
    ))
}

fn cmd_backtest(ctx: &Ctx, data: &DataArgs, envelopes: &[PathBuf], counts: &[String]) -> Result<()> {
    if !counts.is_empty() {
        say!("{:>6} {:>6} {:>6} {:>10} {:>10}  flag", "n1", "n_obs", "p", "LR_UC", "p-value%");
        for c in counts {
            let (n1, n, p) = parse_counts(c)?;
            let r = kupiec_lr(n1, n, p)?;
            let flag = ["", "(*)", "(**)"][r.stars() as usize];
            say!("{n1:>6} {n:>6} {p:>6} {:>10.2} {:>10.2}  {flag}", r.lr, 100.0 * r.p_value);
        }
        return Ok(());
    }
    if envelopes.is_empty() {
        bail!(Error::Input("give --envelopes files or --counts triples".into()));
    }
    let (_, _, states) = ctx.load(data)?;
    let dir = ctx.out(data)?;
    let labels = ctx.cfg.bucket_labels();
    let mut reports = Vec::new();
    for path in envelopes {
        let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let groups = read_envelopes(f, &labels).with_context(|| format!("reading {}", path.display()))?;
        for (key, envs) in groups {
            let series = count_exceedances(&envs, &states, key.horizon)
                .with_context(|| format!("matching {} with realised curves", path.display()))?;
            reports.push(CoverageReport::from_series(key.method.as_str(), key.horizon, &labels, &series)?);
        }
    }
    write_coverage(&dir, &reports)?;
    ctx.echo_config(&dir)?;
    for r in &reports {
        say!("{}", r.to_text());
    }
    Ok(())
}

fn cmd_rolling(ctx: &Ctx, data: &DataArgs) -> Result<()> {
    let (sys, _, states) = ctx.load(data)?;
    let dir = ctx.out(data)?;
    let labels = ctx.cfg.bucket_labels();
    let out = run_rolling(&sys, &states, &labels, &ctx.cfg.rolling_config()).context("rolling sweep")?;
    write_rolling_outputs(&dir, &out, &labels, &states).context("writing rolling outputs")?;
    ctx.echo_config(&dir)?;
    say!(
        "{} windows fitted, {} failed; outputs in {}",
        out.windows.len(),
        out.failed_windows.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_fixture(out: &Path, n_dates: usize, seed: Option<u64>) -> Result<()> {
    let mut spec = FixtureSpec {
        n_dates,
        ..Default::default()
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let fx = generate(&spec)?;
    fs::create_dir_all(out)?;
    save_history(&out.join("history.csv"), &fx.histories)?;
    let cfg = RunConfig {
        sample_every: 1,
        dt: spec.dt,
        paths: mchjm_core::config::PathsConfig {
            input: Some("history.csv".into()),
            output: Some("out".into()),
        },
        ..Default::default()
    };
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    say!("wrote {} dates to {}", n_dates, out.join("history.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (mut cfg, base) = match &cli.config {
        Some(p) => (
            RunConfig::load(p)?,
            p.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (RunConfig::default(), PathBuf::new()),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.drift_mode {
        cfg.forecast.drift_mode = m;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| anyhow!(Error::Config(e.to_string())))?;
    }
    match &cli.command {
        Command::Estimate { tol, n_boot, .. } => {
            if let Some(t) = tol {
                cfg.estimation.tol = *t;
            }
            if let Some(n) = n_boot {
                cfg.estimation.n_boot = *n;
            }
        }
        Command::Pca { threshold: Some(t), .. } => cfg.pca.threshold = *t,
        Command::Forecast { horizon, method, .. } => {
            if !horizon.is_empty() {
                cfg.forecast.horizons = horizon.clone();
            }
            if !method.is_empty() {
                cfg.forecast.methods = method.clone();
            }
        }
        Command::Rolling { max_windows: Some(n), .. } => cfg.max_windows = *n,
        _ => {}
    }
    cfg.validate()?;
    let ctx = Ctx { cfg, base };
    match &cli.command {
        Command::Transform(d) => cmd_transform(&ctx, d).context("transform"),
        Command::Estimate { data, window_end, .. } => cmd_estimate(&ctx, data, *window_end).context("estimate"),
        Command::Pca { data, window_end, .. } => cmd_pca(&ctx, data, *window_end).context("pca"),
        Command::Forecast { data, window_end, .. } => cmd_forecast(&ctx, data, *window_end).context("forecast"),
        Command::Backtest {
            data,
            envelopes,
            counts,
        } => cmd_backtest(&ctx, data, envelopes, counts).context("backtest"),
        Command::Rolling { data, .. } => cmd_rolling(&ctx, data).context("rolling"),
        Command::Fixture {
            out,
            n_dates,
            fixture_seed,
        } => cmd_fixture(out, *n_dates, *fixture_seed).context("fixture"),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_numerical() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
