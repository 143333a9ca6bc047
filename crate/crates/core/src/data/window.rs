use super::{time_covariates, Dataset};
use crate::error::{Result, UfoError};
use crate::tensorops::DenseArray;

/// Half-open row range of one split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRange {
    pub start: usize,
    pub end: usize,
}

/// How the context of a window is assembled from an input series that may
/// contain missing rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextMode {
    /// The last `T` observed rows before the horizon, at their true
    /// (possibly irregular) times.
    Observed,
    /// The last `T` rows before the horizon on the regular grid, with
    /// missing rows forward-filled and flagged in the mask.
    Regular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub context: usize,
    pub horizon: usize,
    pub stride: usize,
    pub mode: ContextMode,
}

/// One forecasting instance. Times are in sampling intervals relative to the
/// first horizon step, so the horizon sits at `0, 1, …, L − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesWindow {
    pub context_values: DenseArray,
    pub context_times: Vec<f64>,
    /// `true` where the context row was actually observed.
    pub context_mask: Vec<bool>,
    pub context_covariates: DenseArray,
    pub horizon_values: DenseArray,
    pub horizon_times: Vec<f64>,
    pub horizon_timestamps: Vec<i64>,
    pub horizon_covariates: DenseArray,
    /// Row index of the first horizon step in the source dataset.
    pub anchor: usize,
}

impl TimeSeriesWindow {
    pub fn context_len(&self) -> usize {
        self.context_times.len()
    }

    pub fn horizon_len(&self) -> usize {
        self.horizon_times.len()
    }

    pub fn channels(&self) -> usize {
        self.horizon_values.cols()
    }

    /// Last observed context row.
    pub fn last_observed(&self) -> Vec<f64> {
        let i = (0..self.context_len())
            .rev()
            .find(|&i| self.context_mask[i])
            .unwrap_or(self.context_len() - 1);
        self.context_values.row(i).to_vec()
    }
}

fn gather(ds: &DenseArray, rows: &[usize]) -> DenseArray {
    let mut out = DenseArray::zeros(rows.len(), ds.cols());
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(k).copy_from_slice(ds.row(r));
    }
    out
}

/// Windows whose horizons start at `range.start + context_room + k·stride`
/// and end inside `range`.
///
/// `inputs` supplies the context (it may carry injected missing rows) and
/// `truth` the horizon targets; they must share timestamps. Contexts may
/// reach back before `range.start` (useful for validation and test splits),
/// but never before `context_floor`. Windows whose horizon contains missing
/// ground truth, or whose context cannot be filled or holds no observed
/// row, are skipped.
pub fn make_windows(
    truth: &Dataset,
    inputs: &Dataset,
    spec: &WindowSpec,
    range: SplitRange,
    context_floor: usize,
) -> Result<Vec<TimeSeriesWindow>> {
    if truth.timestamps != inputs.timestamps || truth.channels() != inputs.channels() {
        return Err(UfoError::invalid("truth and input series are not aligned"));
    }
    if spec.context == 0 || spec.horizon == 0 || spec.stride == 0 {
        return Err(UfoError::Config("context, horizon and stride must be positive".into()));
    }
    if range.end > truth.len() || range.start > range.end {
        return Err(UfoError::invalid("split range outside the dataset"));
    }
    let filled = inputs.forward_filled().0;
    let observed: Vec<bool> = (0..inputs.len()).map(|i| inputs.row_observed(i)).collect();
    let first_anchor = match spec.mode {
        ContextMode::Regular => (context_floor + spec.context).max(range.start),
        ContextMode::Observed => range.start.max(context_floor + 1),
    };
    let mut out = Vec::new();
    let mut h = first_anchor;
    while h + spec.horizon <= range.end {
        let rows: Option<Vec<usize>> = match spec.mode {
            ContextMode::Regular => (h >= context_floor + spec.context).then(|| (h - spec.context..h).collect()),
            ContextMode::Observed => {
                let mut picked: Vec<usize> = (context_floor..h).rev().filter(|&i| observed[i]).take(spec.context).collect();
                picked.reverse();
                (picked.len() == spec.context).then_some(picked)
            }
        };
        let horizon_rows: Vec<usize> = (h..h + spec.horizon).collect();
        let horizon_values = gather(&truth.values, &horizon_rows);
        let rows = rows.filter(|r| r.iter().any(|&i| observed[i]));
        if let (Some(rows), true) = (rows, horizon_values.data().iter().all(|v| v.is_finite())) {
            let origin = truth.timestamps[h];
            let ctx_ts: Vec<i64> = rows.iter().map(|&i| truth.timestamps[i]).collect();
            let hz_ts: Vec<i64> = horizon_rows.iter().map(|&i| truth.timestamps[i]).collect();
            out.push(TimeSeriesWindow {
                context_values: gather(&filled.values, &rows),
                context_times: rows.iter().map(|&i| truth.step_time(i, origin)).collect(),
                context_mask: rows.iter().map(|&i| observed[i]).collect(),
                context_covariates: time_covariates(&ctx_ts).values,
                horizon_values,
                horizon_times: horizon_rows.iter().map(|&i| truth.step_time(i, origin)).collect(),
                horizon_timestamps: hz_ts.clone(),
                horizon_covariates: time_covariates(&hz_ts).values,
                anchor: h,
            });
        }
        h += spec.stride;
    }
    Ok(out)
}

/// A window forecasting past the end of `inputs`. The context is chosen as
/// in [`make_windows`]; the horizon continues at the dataset frequency and
/// its values are unknown (`NaN`).
pub fn future_window(inputs: &Dataset, context: usize, horizon: usize, mode: ContextMode) -> Result<TimeSeriesWindow> {
    if context == 0 || horizon == 0 {
        return Err(UfoError::Config("context and horizon must be positive".into()));
    }
    let n = inputs.len();
    let observed: Vec<bool> = (0..n).map(|i| inputs.row_observed(i)).collect();
    let rows: Vec<usize> = match mode {
        ContextMode::Regular => (n.saturating_sub(context)..n).collect(),
        ContextMode::Observed => {
            let mut picked: Vec<usize> = (0..n).rev().filter(|&i| observed[i]).take(context).collect();
            picked.reverse();
            picked
        }
    };
    if rows.len() < context {
        return Err(UfoError::Config(format!(
            "only {} usable context rows; the model needs {context}",
            rows.len()
        )));
    }
    if !rows.iter().any(|&i| observed[i]) {
        return Err(UfoError::invalid("the context holds no observed row"));
    }
    let step = inputs.frequency.seconds;
    let last = inputs.timestamps[n - 1];
    let hz_ts: Vec<i64> = (1..=horizon as i64).map(|k| last + k * step).collect();
    let origin = hz_ts[0];
    let ctx_ts: Vec<i64> = rows.iter().map(|&i| inputs.timestamps[i]).collect();
    let filled = inputs.forward_filled().0;
    Ok(TimeSeriesWindow {
        context_values: gather(&filled.values, &rows),
        context_times: rows.iter().map(|&i| inputs.step_time(i, origin)).collect(),
        context_mask: rows.iter().map(|&i| observed[i]).collect(),
        context_covariates: time_covariates(&ctx_ts).values,
        horizon_values: DenseArray::filled(horizon, inputs.channels(), f64::NAN),
        horizon_times: (0..horizon).map(|k| k as f64).collect(),
        horizon_timestamps: hz_ts.clone(),
        horizon_covariates: time_covariates(&hz_ts).values,
        anchor: n,
    })
}
