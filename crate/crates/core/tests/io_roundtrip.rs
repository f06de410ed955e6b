use chrono::NaiveDate;
use mchjm_core::backtest::{DatedEnvelope, SeriesKey};
use mchjm_core::config::CurveConfig;
use mchjm_core::io::*;
use mchjm_core::scenario::{ForecastEnvelope, ForecastMethod};

fn curves() -> Vec<CurveConfig> {
    vec![
        CurveConfig {
            id: "EONIA".into(),
            tenor: None,
            buckets: vec!["1m".into(), "1y".into(), "5y".into()],
        },
        CurveConfig {
            id: "EUR3M".into(),
            tenor: Some("3m".into()),
            buckets: vec!["3m".into(), "2y".into(), "10y".into()],
        },
    ]
}

const TOY: &str = "\
date,curve_id,tenor_label,yield
2020-01-06,EONIA,1m,0.01
2020-01-06,EONIA,1y,0.0125
2020-01-06,EONIA,5y,0.02
2020-01-06,EUR3M,3m,0.011
2020-01-06,EUR3M,2y,0.015
2020-01-06,EUR3M,10y,0.024
2020-01-13,EONIA,1m,0.0101
2020-01-13,EONIA,1y,0.0126
2020-01-13,EONIA,5y,0.0203
2020-01-13,EUR3M,3m,0.0112
2020-01-13,EUR3M,2y,0.0151
2020-01-13,EUR3M,10y,0.0242
";

#[test]
fn toy_history_round_trips_byte_for_byte() {
    let h = read_history(TOY.as_bytes(), &curves()).unwrap();
    assert_eq!(h.len(), 2);
    assert_eq!(h[0].len(), 2);
    assert_eq!(h[1].tenor, 0.25);
    assert_eq!(h[0].snapshots[1].values[2], 0.0203);
    let mut out = Vec::new();
    write_history(&mut out, &h, "yield").unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), TOY);
}

#[test]
fn row_order_within_a_date_does_not_matter() {
    let mut lines: Vec<&str> = TOY.lines().collect();
    lines.swap(1, 5);
    lines.swap(7, 10);
    let shuffled = lines.join("\n");
    let a = read_history(TOY.as_bytes(), &curves()).unwrap();
    let b = read_history(shuffled.as_bytes(), &curves()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn value_column_alias() {
    let renamed = TOY.replacen("yield", "value", 1);
    assert!(read_history(renamed.as_bytes(), &curves()).is_ok());
    let wrong = TOY.replacen("yield", "rate", 1);
    assert!(read_history(wrong.as_bytes(), &curves()).unwrap_err().to_string().contains("yield"));
}

fn error_of(text: &str) -> String {
    read_history(text.as_bytes(), &curves()).unwrap_err().to_string()
}

#[test]
fn gap_names_date_and_bucket() {
    let gap: String = TOY.lines().filter(|l| !l.starts_with("2020-01-13,EONIA,1y")).map(|l| format!("{l}\n")).collect();
    let e = error_of(&gap);
    assert!(e.contains("2020-01-13") && e.contains("1y") && e.contains("EONIA"), "{e}");
}

#[test]
fn duplicate_and_unknown_cells() {
    let dup = format!("{TOY}2020-01-13,EUR3M,2y,0.0152\n");
    let e = error_of(&dup);
    assert!(e.contains("duplicate") && e.contains("line 14"), "{e}");
    let unknown = TOY.replacen("EUR3M,2y", "EUR3M,7y", 1);
    assert!(error_of(&unknown).contains("unknown tenor label '7y'"));
    let curve = TOY.replacen("EUR3M,2y", "EUR6M,2y", 1);
    assert!(error_of(&curve).contains("unknown curve 'EUR6M'"));
    let bad = TOY.replacen("0.0151", "abc", 1);
    assert!(error_of(&bad).contains("bad value"));
    let date = TOY.replacen("2020-01-13,EONIA,5y", "2020/01/13,EONIA,5y", 1);
    assert!(error_of(&date).contains("bad date"));
}

#[test]
fn dates_must_not_go_backwards() {
    let back = format!("{TOY}2020-01-06,EONIA,1m,0.01\n");
    let e = error_of(&back);
    assert!(e.contains("not monotone"), "{e}");
}

#[test]
fn empty_file_is_rejected() {
    assert!(error_of("date,curve_id,tenor_label,yield\n").contains("no data"));
}

#[test]
fn numbers_keep_twelve_significant_digits() {
    assert_eq!(fmt_num(0.1 + 0.2), "0.3");
    assert_eq!(fmt_num(1.0 / 3.0), "0.333333333333");
    assert_eq!(fmt_num(-0.0), "0");
    assert_eq!(fmt_num(12345.678), "12345.678");
}

#[test]
fn envelopes_round_trip() {
    let labels = vec!["EONIA:1m".to_string(), "EONIA:1y".to_string()];
    let d = |day| NaiveDate::from_ymd_opt(2020, 1, day).unwrap();
    let env = |shift: f64| ForecastEnvelope {
        level: 0.99,
        lower: vec![0.01 + shift, 0.02],
        upper: vec![0.03, 0.04 + shift],
        mean: vec![0.02, 0.03],
        sd: vec![0.005, 0.0051],
        method: ForecastMethod::Bootstrap,
    };
    let dated = vec![
        DatedEnvelope { origin: d(6), target: d(13), envelope: env(0.0) },
        DatedEnvelope { origin: d(13), target: d(20), envelope: env(0.001) },
    ];
    let mut buf = Vec::new();
    write_envelopes(&mut buf, 1, &labels, &dated).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with(&ENVELOPE_HEADER.join(",")));
    assert_eq!(text.lines().count(), 5);

    let back = read_envelopes(buf.as_slice(), &labels).unwrap();
    let key = SeriesKey { method: ForecastMethod::Bootstrap, horizon: 1, level_bp: 9900 };
    assert_eq!(back.len(), 1);
    assert_eq!(back[&key], dated);

    let missing: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
    assert!(read_envelopes(missing.as_bytes(), &labels).is_err());
    assert!(write_envelopes(Vec::new(), 1, &labels[..1], &dated).is_err());
}
