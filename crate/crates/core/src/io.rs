//! CSV ingestion and artifact emission.
//!
//! Curve files are long format, `date,curve_id,tenor_label,yield`, with ISO
//! dates and continuously compounded decimal yields. Every number written by
//! this module goes through [`fmt_num`] so reruns produce identical bytes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DVector;

use crate::backtest::{CoverageReport, DatedEnvelope, RollingOutput, SeriesKey};
use crate::config::CurveConfig;
use crate::curve::{CurveHistory, CurveSnapshot};
use crate::dynamics::StateVector;
use crate::error::{Error, Result};
use crate::scenario::{ForecastEnvelope, ForecastMethod};

/// Rounds to 12 significant digits and prints the shortest decimal form.
pub fn fmt_num(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let rounded: f64 = format!("{x:.11e}").parse().unwrap_or(x);
    let s = format!("{rounded}");
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

fn parse_date(s: &str, line: u64) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|_| Error::Input(format!("line {line}: bad date '{s}'")))
}

/// Reads a long-format yield file and pivots it onto the configured grids.
pub fn read_history<R: Read>(reader: R, curves: &[CurveConfig]) -> Result<Vec<CurveHistory>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Input(format!("missing column '{name}'")))
    };
    let (c_date, c_curve, c_tenor) = (col("date")?, col("curve_id")?, col("tenor_label")?);
    let c_value = col("yield")
        .or_else(|_| col("value"))
        .map_err(|_| Error::Input("missing column 'yield' (or 'value')".into()))?;

    let index: HashMap<&str, (usize, HashMap<&str, usize>)> = curves
        .iter()
        .enumerate()
        .map(|(ci, c)| {
            let buckets = c.buckets.iter().enumerate().map(|(b, l)| (l.as_str(), b)).collect();
            (c.id.as_str(), (ci, buckets))
        })
        .collect();
    let mut cells: Vec<BTreeMap<NaiveDate, Vec<Option<f64>>>> = vec![BTreeMap::new(); curves.len()];
    let mut last_date: Vec<Option<NaiveDate>> = vec![None; curves.len()];
    let mut all_dates = BTreeSet::new();

    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let date = parse_date(field(c_date), line)?;
        let curve = field(c_curve);
        let tenor = field(c_tenor);
        let (ci, buckets) = index
            .get(curve)
            .ok_or_else(|| Error::Input(format!("line {line}: unknown curve '{curve}'")))?;
        let b = *buckets.get(tenor).ok_or_else(|| {
            Error::Input(format!("line {line}: unknown tenor label '{tenor}' for curve {curve}"))
        })?;
        let value: f64 = field(c_value)
            .parse()
            .map_err(|_| Error::Input(format!("line {line}: bad value '{}'", field(c_value))))?;
        if !value.is_finite() {
            return Err(Error::Input(format!("line {line}: non-finite value")));
        }
        if let Some(prev) = last_date[*ci] {
            if date < prev {
                return Err(Error::Input(format!(
                    "line {line}: dates of curve {curve} are not monotone ({date} after {prev})"
                )));
            }
        }
        last_date[*ci] = Some(date);
        all_dates.insert(date);
        let row = cells[*ci]
            .entry(date)
            .or_insert_with(|| vec![None; curves[*ci].buckets.len()]);
        if row[b].is_some() {
            return Err(Error::Input(format!(
                "line {line}: duplicate value for {curve} {tenor} on {date}"
            )));
        }
        row[b] = Some(value);
    }
    if all_dates.is_empty() {
        return Err(Error::Input("no data rows".into()));
    }

    let mut out = Vec::with_capacity(curves.len());
    for (ci, c) in curves.iter().enumerate() {
        let grid = c.grid()?;
        let mut snaps = Vec::with_capacity(all_dates.len());
        for date in &all_dates {
            let row = cells[ci].get(date);
            let mut values = Vec::with_capacity(c.buckets.len());
            for (b, label) in c.buckets.iter().enumerate() {
                match row.and_then(|r| r[b]) {
                    Some(v) => values.push(v),
                    None => {
                        return Err(Error::Input(format!(
                            "missing value for {} {label} on {date}",
                            c.id
                        )))
                    }
                }
            }
            snaps.push(CurveSnapshot::new(*date, grid.clone(), DVector::from_vec(values))?);
        }
        out.push(CurveHistory::new(c.id.clone(), c.tenor_years()?, c.buckets.clone(), snaps)?);
    }
    Ok(out)
}

pub fn load_history(path: &Path, curves: &[CurveConfig]) -> Result<Vec<CurveHistory>> {
    let f = fs::File::open(path)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    read_history(f, curves)
}

/// Writes histories in long format; `value_name` heads the value column.
pub fn write_history<W: Write>(w: W, histories: &[CurveHistory], value_name: &str) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["date", "curve_id", "tenor_label", value_name])?;
    let n = histories.first().map_or(0, |h| h.len());
    for k in 0..n {
        for h in histories {
            let snap = h
                .snapshots
                .get(k)
                .ok_or_else(|| Error::Input(format!("curve {} is shorter than the others", h.curve_id)))?;
            for (label, v) in h.labels.iter().zip(snap.values.iter()) {
                wtr.write_record([
                    snap.date.to_string(),
                    h.curve_id.clone(),
                    label.clone(),
                    fmt_num(*v),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_history(path: &Path, histories: &[CurveHistory]) -> Result<()> {
    write_history(create(path)?, histories, "yield")
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(fs::File::create(path)?)
}

pub const ENVELOPE_HEADER: [&str; 10] = [
    "method", "horizon", "level", "origin_date", "target_date", "bucket", "lower", "upper", "mean", "sd",
];

/// One row per (forecast, bucket).
pub fn write_envelopes<W: Write>(
    w: W,
    horizon: usize,
    labels: &[String],
    envelopes: &[DatedEnvelope],
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(ENVELOPE_HEADER)?;
    for e in envelopes {
        let env = &e.envelope;
        if env.len() != labels.len() {
            return Err(Error::dim("envelope buckets", labels.len(), env.len()));
        }
        for (b, label) in labels.iter().enumerate() {
            wtr.write_record([
                env.method.as_str().to_string(),
                horizon.to_string(),
                fmt_num(env.level),
                e.origin.to_string(),
                e.target.to_string(),
                label.clone(),
                fmt_num(env.lower[b]),
                fmt_num(env.upper[b]),
                fmt_num(env.mean[b]),
                fmt_num(env.sd[b]),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Envelope file grouped by series; bucket order follows `labels`.
pub fn read_envelopes<R: Read>(
    reader: R,
    labels: &[String],
) -> Result<BTreeMap<SeriesKey, Vec<DatedEnvelope>>> {
    let pos: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let d = labels.len();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut cols = [0usize; 10];
    for (i, name) in ENVELOPE_HEADER.iter().enumerate() {
        cols[i] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| Error::Input(format!("envelope file lacks column '{name}'")))?;
    }
    type Partial = (ForecastMethod, f64, Vec<Option<[f64; 4]>>);
    let mut acc: BTreeMap<(SeriesKey, NaiveDate, NaiveDate), Partial> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let f = |i: usize| rec.get(cols[i]).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            f(i).parse()
                .map_err(|_| Error::Input(format!("line {line}: bad number '{}'", f(i))))
        };
        let method: ForecastMethod = f(0).parse()?;
        let horizon: usize = f(1)
            .parse()
            .map_err(|_| Error::Input(format!("line {line}: bad horizon '{}'", f(1))))?;
        let level = num(2)?;
        let origin = parse_date(f(3), line)?;
        let target = parse_date(f(4), line)?;
        let b = *pos
            .get(f(5))
            .ok_or_else(|| Error::Input(format!("line {line}: unknown bucket '{}'", f(5))))?;
        let key = SeriesKey {
            method,
            horizon,
            level_bp: (level * 10_000.0).round() as u32,
        };
        let entry = acc
            .entry((key, origin, target))
            .or_insert_with(|| (method, level, vec![None; d]));
        if entry.2[b].is_some() {
            return Err(Error::Input(format!("line {line}: duplicate envelope row for {}", f(5))));
        }
        entry.2[b] = Some([num(6)?, num(7)?, num(8)?, num(9)?]);
    }
    let mut out: BTreeMap<SeriesKey, Vec<DatedEnvelope>> = BTreeMap::new();
    for ((key, origin, target), (method, level, rows)) in acc {
        let mut env = ForecastEnvelope {
            level,
            lower: Vec::with_capacity(d),
            upper: Vec::with_capacity(d),
            mean: Vec::with_capacity(d),
            sd: Vec::with_capacity(d),
            method,
        };
        for (b, r) in rows.into_iter().enumerate() {
            let [lo, hi, m, s] = r.ok_or_else(|| {
                Error::Input(format!("envelope issued {origin} lacks bucket {}", labels[b]))
            })?;
            env.lower.push(lo);
            env.upper.push(hi);
            env.mean.push(m);
            env.sd.push(s);
        }
        out.entry(key).or_default().push(DatedEnvelope {
            origin,
            target,
            envelope: env,
        });
    }
    Ok(out)
}

/// Writes every coverage report as one CSV and one text file.
pub fn write_coverage(dir: &Path, reports: &[CoverageReport]) -> Result<()> {
    let mut csv = String::from(CoverageReport::CSV_HEADER);
    csv.push('\n');
    let mut txt = String::new();
    for r in reports {
        for row in r.to_csv_rows() {
            csv.push_str(&row);
            csv.push('\n');
        }
        txt.push_str(&r.to_text());
        txt.push('\n');
    }
    create(&dir.join("coverage_report.csv"))?.write_all(csv.as_bytes())?;
    create(&dir.join("coverage_report.txt"))?.write_all(txt.as_bytes())?;
    Ok(())
}

/// Writes the artifacts of a rolling sweep under `dir`:
/// `params.csv`, `pca.csv`, `failed_windows.csv`, `envelopes/*.csv`,
/// `plotdata/*.csv` and the coverage reports.
pub fn write_rolling_outputs(
    dir: &Path,
    out: &RollingOutput,
    labels: &[String],
    states: &[StateVector],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_params(dir, out, labels)?;
    write_pca(dir, out)?;

    let mut failed = String::from("window_end,error\n");
    for (d, e) in &out.failed_windows {
        failed.push_str(&format!("{d},\"{}\"\n", e.replace('"', "'")));
    }
    create(&dir.join("failed_windows.csv"))?.write_all(failed.as_bytes())?;

    let realized: BTreeMap<NaiveDate, &StateVector> = states
        .iter()
        .filter_map(|s| s.date.map(|d| (d, s)))
        .collect();
    for (key, envs) in &out.envelopes {
        let stem = key.stem();
        write_envelopes(
            create(&dir.join("envelopes").join(format!("{stem}.csv")))?,
            key.horizon,
            labels,
            envs,
        )?;
        let mut wtr = csv::Writer::from_writer(create(&dir.join("plotdata").join(format!("{stem}.csv")))?);
        wtr.write_record([
            "target_date", "bucket", "mean", "lower", "upper", "minus_2sd", "plus_2sd", "realized",
            "exception",
        ])?;
        for e in envs {
            let env = &e.envelope;
            let (lo2, hi2) = env.two_sd_band();
            let x = realized.get(&e.target).map(|s| &s.values);
            for (b, label) in labels.iter().enumerate() {
                let (real, exc) = match x {
                    Some(v) => {
                        let r = v[b];
                        let exc = if r < env.lower[b] {
                            -1
                        } else if r > env.upper[b] {
                            1
                        } else {
                            0
                        };
                        (fmt_num(r), exc.to_string())
                    }
                    None => (String::new(), String::new()),
                };
                wtr.write_record([
                    e.target.to_string(),
                    label.clone(),
                    fmt_num(env.mean[b]),
                    fmt_num(env.lower[b]),
                    fmt_num(env.upper[b]),
                    fmt_num(lo2[b]),
                    fmt_num(hi2[b]),
                    real,
                    exc,
                ])?;
            }
        }
        wtr.flush()?;
    }
    write_coverage(dir, &out.reports)
}

fn write_params(dir: &Path, out: &RollingOutput, labels: &[String]) -> Result<()> {
    let Some(first) = out.windows.first() else {
        return Ok(());
    };
    let d = labels.len();
    let mut header: Vec<String> = ["window_end", "converged", "n_iters", "neg_log_lik"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(first.params.blocks.names().iter().cloned());
    header.extend(labels.iter().map(|l| format!("omega_{l}")));
    header.extend((0..d.saturating_sub(1)).map(|i| format!("gamma_{}_{}", labels[i], labels[i + 1])));
    let mut wtr = csv::Writer::from_writer(create(&dir.join("params.csv"))?);
    wtr.write_record(&header)?;
    for w in &out.windows {
        let p = &w.params;
        let mut row = vec![
            w.end.to_string(),
            w.converged.to_string(),
            w.n_iters.to_string(),
            fmt_num(w.neg_log_lik),
        ];
        row.extend(p.lambda.iter().map(|v| fmt_num(*v)));
        row.extend(p.omega.iter().map(|v| fmt_num(*v)));
        row.extend((0..d.saturating_sub(1)).map(|i| fmt_num(p.gamma()[(i, i + 1)])));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

fn write_pca(dir: &Path, out: &RollingOutput) -> Result<()> {
    let Some(first) = out.windows.first() else {
        return Ok(());
    };
    let mut header: Vec<String> = vec!["window_end".into(), "n_components".into(), "explained".into()];
    header.extend((1..=first.eigenvalues.len()).map(|m| format!("eigenvalue_{m}")));
    let mut wtr = csv::Writer::from_writer(create(&dir.join("pca.csv"))?);
    wtr.write_record(&header)?;
    for w in &out.windows {
        let mut row = vec![w.end.to_string(), w.n_components.to_string(), fmt_num(w.explained)];
        row.extend(w.eigenvalues.iter().map(|v| fmt_num(*v)));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(fmt_num(0.1 + 0.2), "0.3");
        assert_eq!(fmt_num(1.0 / 3.0), "0.333333333333");
        assert_eq!(fmt_num(-0.0), "0");
        assert_eq!(fmt_num(123_456_789.123_456_78), "123456789.123");
    }
}
