use chrono::{Duration, NaiveDate};
use mchjm_core::backtest::*;
use mchjm_core::dynamics::StateVector;
use mchjm_core::scenario::{ForecastEnvelope, ForecastMethod};
use nalgebra::DVector;
use proptest::prelude::*;

/// Independent form of the statistic: −2 ln L(p) + 2 ln L(π̂).
fn lr_oracle(n1: usize, n: usize, p: f64) -> f64 {
    let a = 1.0 - p;
    let (x1, x0) = (n1 as f64, (n - n1) as f64);
    let ll = |q: f64| {
        let t1 = if x1 > 0.0 { x1 * q.ln() } else { 0.0 };
        let t0 = if x0 > 0.0 { x0 * (1.0 - q).ln() } else { 0.0 };
        t1 + t0
    };
    -2.0 * ll(a) + 2.0 * ll(x1 / n as f64)
}

#[test]
fn golden_rows_reproduce() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/coverage_tables.csv");
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let mut n = 0;
    for rec in rdr.records() {
        let r = rec.unwrap();
        let horizon: usize = r[2].parse().unwrap();
        let level: f64 = r[5].parse().unwrap();
        let n1: usize = r[6].parse().unwrap();
        let lr: f64 = r[7].parse().unwrap();
        let pv: f64 = r[8].parse().unwrap();
        let stars: u8 = r[9].parse().unwrap();
        let k = kupiec_lr(n1, 290 - horizon, level).unwrap();
        assert!((k.lr - lr).abs() <= 0.01 + 1e-9, "row {n}: {} vs {lr}", k.lr);
        assert!((100.0 * k.p_value - pv).abs() <= 0.01 + 1e-9, "row {n}");
        assert_eq!(k.stars(), stars, "row {n}");
        n += 1;
    }
    assert_eq!(n, 264);
}

#[test]
fn critical_values() {
    // erfc from statrs is accurate to roughly 1e-10 relative.
    assert!((chi2_1_sf(CHI2_95) / 0.05 - 1.0).abs() < 1e-9);
    assert!((chi2_1_sf(CHI2_99) / 0.01 - 1.0).abs() < 1e-9);
    assert_eq!(chi2_1_sf(0.0), 1.0);
}

#[test]
fn invalid_inputs() {
    assert!(kupiec_lr(3, 2, 0.95).is_err());
    assert!(kupiec_lr(0, 0, 0.95).is_err());
    assert!(kupiec_lr(1, 10, 1.0).is_err());
    assert!(kupiec_lr(1, 10, 0.0).is_err());
}

fn date(k: i64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 6).unwrap() + Duration::days(7 * k)
}

fn envelope(lower: f64, upper: f64, d: usize) -> ForecastEnvelope {
    ForecastEnvelope {
        level: 0.95,
        lower: vec![lower; d],
        upper: vec![upper; d],
        mean: vec![0.5 * (lower + upper); d],
        sd: vec![0.0; d],
        method: ForecastMethod::GaussianClosedForm,
    }
}

fn realized(values: &[f64]) -> Vec<StateVector> {
    values
        .iter()
        .enumerate()
        .map(|(k, v)| StateVector::new(Some(date(k as i64)), DVector::from_vec(vec![*v, -*v])).unwrap())
        .collect()
}

#[test]
fn infinite_envelopes_never_exceed() {
    let states = realized(&[0.01, 0.5, -3.0, 7.0]);
    let envs: Vec<DatedEnvelope> = (0..3)
        .map(|k| DatedEnvelope {
            origin: date(k),
            target: date(k + 1),
            envelope: envelope(f64::NEG_INFINITY, f64::INFINITY, 2),
        })
        .collect();
    let s = count_exceedances(&envs, &states, 1).unwrap();
    assert_eq!(s.len(), 2);
    assert!(s.iter().all(|x| x.n1() == 0 && x.n_obs() == 3));
}

#[test]
fn zero_width_envelopes_always_exceed_and_sign() {
    let states = realized(&[0.0, 0.5, -3.0, 7.0]);
    let envs: Vec<DatedEnvelope> = (0..3)
        .map(|k| DatedEnvelope {
            origin: date(k),
            target: date(k + 1),
            envelope: envelope(0.1, 0.1, 2),
        })
        .collect();
    let s = count_exceedances(&envs, &states, 1).unwrap();
    assert_eq!(s[0].signs, vec![1, -1, 1]);
    assert_eq!(s[1].signs, vec![-1, 1, -1]);
    assert_eq!(s[0].n1(), 3);
    assert_eq!(s[0].indicators(), vec![1, 1, 1]);
}

#[test]
fn missing_realisation_is_an_error() {
    let states = realized(&[0.0, 0.1]);
    let envs = vec![DatedEnvelope {
        origin: date(1),
        target: date(5),
        envelope: envelope(0.0, 1.0, 2),
    }];
    let err = count_exceedances(&envs, &states, 4).unwrap_err().to_string();
    assert!(err.contains(&date(5).to_string()), "{err}");
    assert!(count_exceedances(&[], &states, 1).is_err());
}

#[test]
fn report_flags_significance() {
    let mk = |bucket: usize, n1: usize| ExceedanceSeries {
        bucket,
        horizon: 1,
        level: 0.95,
        signs: (0..100).map(|i| i8::from(i < n1)).collect(),
    };
    let labels = ["EONIA:1m".to_string(), "EONIA:3m".to_string()];
    let report = CoverageReport::from_series("gaussian", 1, &labels, &[mk(0, 5), mk(1, 20)]).unwrap();
    assert_eq!(report.levels, vec![0.95]);
    assert_eq!(report.rows[0].cells[0].result.stars(), 0);
    assert_eq!(report.rows[1].cells[0].result.stars(), 2);
    let text = report.to_text();
    assert!(text.lines().any(|l| l.starts_with("EONIA:3m") && l.contains("(**)")), "{text}");
    assert!(!text.lines().any(|l| l.starts_with("EONIA:1m") && l.contains("(*")), "{text}");
    let rows = report.to_csv_rows();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("gaussian,1,EONIA:1m,0.95,100,5,0.000000,100.000000,0"), "{}", rows[0]);
    assert!(CoverageReport::from_series("gaussian", 1, &labels, &[mk(0, 5)]).is_err());
}

#[test]
fn window_ends_respect_horizon_and_cap() {
    let cfg = RollingConfig {
        window: 10,
        horizons: vec![3, 1],
        ..Default::default()
    };
    assert_eq!(window_ends(15, &cfg), vec![10, 11, 12, 13]);
    assert!(window_ends(11, &cfg).is_empty());
    let capped = RollingConfig { max_windows: 2, stride: 2, ..cfg };
    assert_eq!(window_ends(30, &capped), vec![10, 12]);
}

proptest! {
    #[test]
    fn statistic_matches_oracle(n in 1usize..400, frac in 0.0f64..=1.0, p in 0.5f64..0.999) {
        let n1 = ((n as f64) * frac).floor() as usize;
        let k = kupiec_lr(n1, n, p).unwrap();
        let want = lr_oracle(n1, n, p).max(0.0);
        prop_assert!((k.lr - want).abs() <= 1e-9 * want.max(1.0));
        prop_assert!(k.p_value >= 0.0 && k.p_value <= 1.0);
    }

    #[test]
    fn relabelling_is_symmetric(n in 1usize..400, frac in 0.0f64..=1.0, p in 0.01f64..0.99) {
        // Swapping hits and misses together with p ↔ 1−p leaves LR unchanged.
        let n1 = ((n as f64) * frac).floor() as usize;
        let a = kupiec_lr(n1, n, p).unwrap().lr;
        let b = kupiec_lr(n - n1, n, 1.0 - p).unwrap().lr;
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn zero_at_expected_count_and_monotone_away(m in 1usize..40) {
        let n = 20 * m;
        let expected = m; // 5% of n
        prop_assert!(kupiec_lr(expected, n, 0.95).unwrap().lr < 1e-12);
        let mut prev = 0.0;
        for n1 in expected..=n.min(expected + 30) {
            let lr = kupiec_lr(n1, n, 0.95).unwrap().lr;
            prop_assert!(lr >= prev - 1e-12);
            prev = lr;
        }
        prev = 0.0;
        for n1 in (0..=expected).rev() {
            let lr = kupiec_lr(n1, n, 0.95).unwrap().lr;
            prop_assert!(lr >= prev - 1e-12);
            prev = lr;
        }
    }

    #[test]
    fn seeds_are_deterministic(master in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        prop_assert_eq!(derive_seed(master, &[a, b]), derive_seed(master, &[a, b]));
        if a != b {
            prop_assert_ne!(derive_seed(master, &[a, b]), derive_seed(master, &[b, a]));
        }
    }
}
