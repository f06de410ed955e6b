//! Curve data model and the static maps between zero-coupon yields,
//! discount factors, instantaneous forwards and FRA rates.

use chrono::NaiveDate;
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::spline::{BucketGrid, SplineOperators};

/// Converts a tenor label to a year fraction.
///
/// Accepted units: `d` (days/365), `w` (7 days), `m` (months/12), `y` (years).
/// Compound labels such as `1y6m` or `1y 6m` add up their parts.
pub fn tenor_to_years(label: &str) -> Result<f64> {
    let cleaned: String = label
        .chars()
        .filter(|c| !c.is_whitespace())
        .collect::<String>()
        .to_ascii_lowercase();
    if cleaned.is_empty() {
        return Err(Error::Input(format!("empty tenor label '{label}'")));
    }
    let bad = || Error::Input(format!("unknown tenor label '{label}'"));
    let mut total = 0.0;
    let mut digits = String::new();
    for ch in cleaned.chars() {
        if ch.is_ascii_digit() || ch == '.' {
            digits.push(ch);
            continue;
        }
        if digits.is_empty() {
            return Err(bad());
        }
        let n: f64 = digits.parse().map_err(|_| bad())?;
        digits.clear();
        total += match ch {
            'd' => n / 365.0,
            'w' => 7.0 * n / 365.0,
            'm' => n / 12.0,
            'y' => n,
            _ => return Err(bad()),
        };
    }
    if !digits.is_empty() || total <= 0.0 {
        return Err(bad());
    }
    Ok(total)
}

/// One dated curve on a fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSnapshot {
    pub date: NaiveDate,
    pub grid: BucketGrid,
    pub values: DVector<f64>,
}

impl CurveSnapshot {
    pub fn new(date: NaiveDate, grid: BucketGrid, values: DVector<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::dim("curve snapshot", grid.len(), values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite value at bucket {} on {date}",
                grid.as_slice()[i]
            )));
        }
        Ok(Self { date, grid, values })
    }

    fn with_values(&self, values: DVector<f64>) -> Self {
        Self {
            date: self.date,
            grid: self.grid.clone(),
            values,
        }
    }
}

/// Date-ordered panel of one curve on a fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveHistory {
    pub curve_id: String,
    /// Accrual length in years, `0` for the discounting curve.
    pub tenor: f64,
    pub grid: BucketGrid,
    /// Tenor labels of the grid buckets, used when writing files.
    pub labels: Vec<String>,
    pub snapshots: Vec<CurveSnapshot>,
}

impl CurveHistory {
    pub fn new(
        curve_id: impl Into<String>,
        tenor: f64,
        labels: Vec<String>,
        snapshots: Vec<CurveSnapshot>,
    ) -> Result<Self> {
        let grid = BucketGrid::from_labels(&labels)?;
        if !(tenor >= 0.0 && tenor.is_finite()) {
            return Err(Error::InvalidParameter(format!("tenor must be >= 0, got {tenor}")));
        }
        for snap in &snapshots {
            if snap.grid != grid {
                return Err(Error::GridMismatch(format!(
                    "snapshot on {} does not use the history grid",
                    snap.date
                )));
            }
        }
        if let Some(w) = snapshots.windows(2).find(|w| w[1].date <= w[0].date) {
            return Err(Error::Input(format!(
                "dates must be strictly increasing ({} then {})",
                w[0].date, w[1].date
            )));
        }
        Ok(Self {
            curve_id: curve_id.into(),
            tenor,
            grid,
            labels,
            snapshots,
        })
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.snapshots.iter().map(|s| s.date).collect()
    }

    /// Keeps every `every`-th snapshot starting with the first.
    pub fn sample_every(&self, every: usize) -> Self {
        let every = every.max(1);
        Self {
            snapshots: self.snapshots.iter().step_by(every).cloned().collect(),
            ..self.clone()
        }
    }
}

fn check_grid(snap: &CurveSnapshot, ops: &SplineOperators) -> Result<()> {
    if &snap.grid != ops.grid() {
        return Err(Error::GridMismatch(
            "snapshot grid differs from the operator grid".into(),
        ));
    }
    Ok(())
}

/// `P(t, t+s_i) = exp(-s_i Y_i)`.
pub fn yields_to_discounts(snap: &CurveSnapshot) -> CurveSnapshot {
    let s = snap.grid.as_slice();
    snap.with_values(DVector::from_iterator(
        s.len(),
        s.iter().zip(snap.values.iter()).map(|(x, y)| (-x * y).exp()),
    ))
}

/// `Y_i = -ln P_i / s_i`.
pub fn discounts_to_yields(snap: &CurveSnapshot) -> Result<CurveSnapshot> {
    if let Some(p) = snap.values.iter().find(|p| **p <= 0.0) {
        return Err(Error::Input(format!("non-positive discount factor {p}")));
    }
    let s = snap.grid.as_slice();
    Ok(snap.with_values(DVector::from_iterator(
        s.len(),
        s.iter().zip(snap.values.iter()).map(|(x, p)| -p.ln() / x),
    )))
}

/// `f = Y + s ∘ (M Y)` on raw vectors.
pub fn forwards_from_yields(ops: &SplineOperators, y: &DVector<f64>) -> DVector<f64> {
    let s = DVector::from_row_slice(ops.grid().as_slice());
    y + s.component_mul(&(ops.m() * y))
}

/// `Y = (P f) / s` on raw vectors.
pub fn yields_from_forwards(ops: &SplineOperators, f: &DVector<f64>) -> DVector<f64> {
    let s = DVector::from_row_slice(ops.grid().as_slice());
    (ops.p() * f).component_div(&s)
}

/// Inverse of [`forwards_from_yields`]: solves `(I + diag(s) M) Y = f`.
pub fn yields_solving_forwards(ops: &SplineOperators, f: &DVector<f64>) -> Result<DVector<f64>> {
    let k = ops.len();
    let s = DVector::from_row_slice(ops.grid().as_slice());
    let mut a = ops.m().clone();
    for i in 0..k {
        a.row_mut(i).scale_mut(s[i]);
        a[(i, i)] += 1.0;
    }
    a.lu()
        .solve(f)
        .ok_or_else(|| Error::Numerical("forward-to-yield system is singular".into()))
}

pub fn yields_to_forwards(snap: &CurveSnapshot, ops: &SplineOperators) -> Result<CurveSnapshot> {
    check_grid(snap, ops)?;
    Ok(snap.with_values(forwards_from_yields(ops, &snap.values)))
}

pub fn forwards_to_yields(fwd: &CurveSnapshot, ops: &SplineOperators) -> Result<CurveSnapshot> {
    check_grid(fwd, ops)?;
    Ok(fwd.with_values(yields_from_forwards(ops, &fwd.values)))
}

fn check_fra_inputs(tenor: f64, target: &BucketGrid, source: &BucketGrid) -> Result<()> {
    if !(tenor > 0.0 && tenor.is_finite()) {
        return Err(Error::InvalidParameter(format!("tenor must be > 0, got {tenor}")));
    }
    if target.first() < tenor * (1.0 - 1e-12) {
        return Err(Error::InvalidGrid(format!(
            "FRA bucket {} is shorter than the tenor {tenor}",
            target.first()
        )));
    }
    if target.last() > source.last() * (1.0 + 1e-12) {
        return Err(Error::InvalidGrid(format!(
            "FRA bucket {} lies beyond the yield grid",
            target.last()
        )));
    }
    Ok(())
}

/// FRA rates on `target` from tenor-curve yields `y` on the grid of `ops`.
pub fn fra_from_yields(
    ops: &SplineOperators,
    y: &DVector<f64>,
    tenor: f64,
    target: &BucketGrid,
) -> Result<DVector<f64>> {
    check_fra_inputs(tenor, target, ops.grid())?;
    if y.len() != ops.len() {
        return Err(Error::dim("tenor yields", ops.len(), y.len()));
    }
    let mut out = DVector::zeros(target.len());
    for (i, &x) in target.as_slice().iter().enumerate() {
        let start = (x - tenor).max(0.0);
        let y_end = ops.evaluate(y, x)?;
        let y_start = ops.evaluate(y, start)?;
        out[i] = ((x * y_end - start * y_start).exp() - 1.0) / tenor;
    }
    Ok(out)
}

/// Tenor-curve yields reproducing the given FRA rates, where the FRA grid
/// equals the yield grid. Newton iteration with a finite-difference Jacobian.
pub fn yields_from_fra(ops: &SplineOperators, fra: &DVector<f64>, tenor: f64) -> Result<DVector<f64>> {
    let grid = ops.grid().clone();
    let k = grid.len();
    if fra.len() != k {
        return Err(Error::dim("FRA rates", k, fra.len()));
    }
    let mut y = fra.map(|f| (1.0 + tenor * f).ln() / tenor);
    for _ in 0..50 {
        let r = fra_from_yields(ops, &y, tenor, &grid)? - fra;
        if r.amax() < 1e-15 {
            return Ok(y);
        }
        let mut jac = nalgebra::DMatrix::zeros(k, k);
        for j in 0..k {
            let h = 1e-7;
            let mut yp = y.clone();
            yp[j] += h;
            let mut ym = y.clone();
            ym[j] -= h;
            let col = (fra_from_yields(ops, &yp, tenor, &grid)? - fra_from_yields(ops, &ym, tenor, &grid)?) / (2.0 * h);
            jac.set_column(j, &col);
        }
        let step = jac
            .lu()
            .solve(&r)
            .ok_or_else(|| Error::Numerical("FRA inversion Jacobian is singular".into()))?;
        y -= &step;
        if step.amax() < 1e-16 {
            return Ok(y);
        }
    }
    let r = fra_from_yields(ops, &y, tenor, &grid)? - fra;
    if r.amax() < 1e-12 {
        Ok(y)
    } else {
        Err(Error::Numerical(format!(
            "FRA inversion did not converge (residual {:.3e})",
            r.amax()
        )))
    }
}

pub fn tenor_yields_to_fra(
    snap: &CurveSnapshot,
    tenor: f64,
    target_grid: &BucketGrid,
    ops: &SplineOperators,
) -> Result<CurveSnapshot> {
    check_grid(snap, ops)?;
    let values = fra_from_yields(ops, &snap.values, tenor, target_grid)?;
    Ok(CurveSnapshot {
        date: snap.date,
        grid: target_grid.clone(),
        values,
    })
}

/// Restricts a history to the buckets of `target`, keeping their order.
pub fn subset_grid(hist: &CurveHistory, target: &BucketGrid) -> Result<CurveHistory> {
    let idx = target
        .as_slice()
        .iter()
        .map(|x| {
            hist.grid.position(*x).ok_or_else(|| {
                Error::InvalidGrid(format!(
                    "bucket {x} is not on the grid of curve {}",
                    hist.curve_id
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = idx.iter().map(|i| hist.labels[*i].clone()).collect();
    let snapshots = hist
        .snapshots
        .iter()
        .map(|s| CurveSnapshot {
            date: s.date,
            grid: target.clone(),
            values: DVector::from_iterator(idx.len(), idx.iter().map(|i| s.values[*i])),
        })
        .collect();
    Ok(CurveHistory {
        curve_id: hist.curve_id.clone(),
        tenor: hist.tenor,
        grid: target.clone(),
        labels,
        snapshots,
    })
}
