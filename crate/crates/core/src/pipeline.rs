//! Conversions between yield histories and the stacked model state.

use chrono::NaiveDate;
use nalgebra::DVector;

use crate::curve::{
    forwards_from_yields, fra_from_yields, yields_from_fra, yields_solving_forwards, CurveHistory,
    CurveSnapshot,
};
use crate::dynamics::{Block, CurveSystem, StateVector, TenorSpec};
use crate::error::{Error, Result};

/// Builds the system whose grids are those of the given histories.
/// The first history is the discounting curve; the others carry a tenor.
pub fn system_for(histories: &[CurveHistory], dt: f64) -> Result<CurveSystem> {
    let (disc, rest) = histories
        .split_first()
        .ok_or_else(|| Error::Input("no curve histories".into()))?;
    let tenors = rest
        .iter()
        .map(|h| {
            if h.tenor <= 0.0 {
                return Err(Error::Input(format!(
                    "curve {} needs a positive tenor",
                    h.curve_id
                )));
            }
            Ok(TenorSpec {
                curve_id: h.curve_id.clone(),
                tenor: h.tenor,
                grid: h.grid.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CurveSystem::new(disc.curve_id.clone(), disc.grid.clone(), tenors, dt)
}

/// Stacked states `[f; FRA…]` for every date, from ZC-yield histories.
///
/// Histories must share their dates and match the system grids.
pub fn states_from_histories(sys: &CurveSystem, histories: &[CurveHistory]) -> Result<Vec<StateVector>> {
    if histories.len() != sys.n_blocks() {
        return Err(Error::dim("curve histories", sys.n_blocks(), histories.len()));
    }
    let dates = histories[0].dates();
    for h in &histories[1..] {
        if h.dates() != dates {
            return Err(Error::Input(format!(
                "curve {} does not share the dates of curve {}",
                h.curve_id, histories[0].curve_id
            )));
        }
    }
    for (b, h) in histories.iter().enumerate() {
        if sys.grid(sys.block_at(b))? != &h.grid {
            return Err(Error::GridMismatch(format!(
                "curve {} grid differs from the system grid",
                h.curve_id
            )));
        }
    }
    (0..dates.len())
        .map(|k| {
            let mut values = DVector::zeros(sys.dim());
            for (b, h) in histories.iter().enumerate() {
                let block = sys.block_at(b);
                let ops = sys.ops(block)?;
                let y = &h.snapshots[k].values;
                let v = match block {
                    Block::Discount => forwards_from_yields(ops, y),
                    Block::Tenor(j) => {
                        let spec = &sys.tenors()[j];
                        fra_from_yields(ops, y, spec.tenor, &spec.grid)?
                    }
                };
                let r = sys.range(block)?;
                values.rows_mut(r.start, r.len()).copy_from(&v);
            }
            StateVector::new(Some(dates[k]), values)
        })
        .collect()
}

/// ZC-yield histories reproducing the given states exactly.
pub fn histories_from_states(
    sys: &CurveSystem,
    states: &[StateVector],
    dates: &[NaiveDate],
    labels: &[Vec<String>],
) -> Result<Vec<CurveHistory>> {
    if states.len() != dates.len() {
        return Err(Error::dim("state dates", states.len(), dates.len()));
    }
    if labels.len() != sys.n_blocks() {
        return Err(Error::dim("label sets", sys.n_blocks(), labels.len()));
    }
    let mut out = Vec::with_capacity(sys.n_blocks());
    for (b, lab) in labels.iter().enumerate() {
        let block = sys.block_at(b);
        let ops = sys.ops(block)?;
        let grid = sys.grid(block)?.clone();
        let r = sys.range(block)?;
        let (id, tenor) = match block {
            Block::Discount => (sys.discount_id().to_string(), 0.0),
            Block::Tenor(j) => (sys.tenors()[j].curve_id.clone(), sys.tenors()[j].tenor),
        };
        let snaps = states
            .iter()
            .zip(dates)
            .map(|(s, d)| {
                let x: DVector<f64> = s.values.rows(r.start, r.len()).into_owned();
                let y = match block {
                    Block::Discount => yields_solving_forwards(ops, &x)?,
                    Block::Tenor(_) => yields_from_fra(ops, &x, tenor)?,
                };
                CurveSnapshot::new(*d, grid.clone(), y)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(CurveHistory::new(id, tenor, lab.clone(), snaps)?);
    }
    Ok(out)
}
