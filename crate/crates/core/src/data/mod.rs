//! Datasets, time features, irregularity injection, patch grids and
//! forecasting windows.
//!
//! Missing values are stored as `NaN`. Timestamps are UTC epoch seconds; the
//! model sees time in units of the dataset's sampling interval.

mod csvio;
mod synth;
mod window;

pub use csvio::{format_timestamp, load_csv, read_csv, write_csv};
pub use synth::{synth_channel_params, synth_dataset, ChannelParams, SynthKind, SynthSpec};
pub use window::{future_window, make_windows, ContextMode, SplitRange, TimeSeriesWindow, WindowSpec};

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::fmt;

use rand::seq::index::sample;

use crate::cde::LevelGrid;
use crate::error::{Result, UfoError};
use crate::tensorops::{stream, DenseArray};

pub const DAY_SECONDS: i64 = 86_400;

/// Sampling interval of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Frequency {
    pub seconds: i64,
}

impl fmt::Display for Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.seconds;
        if s % DAY_SECONDS == 0 {
            write!(f, "{}d", s / DAY_SECONDS)
        } else if s % 3600 == 0 {
            write!(f, "{}h", s / 3600)
        } else if s % 60 == 0 {
            write!(f, "{}m", s / 60)
        } else {
            write!(f, "{s}s")
        }
    }
}

impl Frequency {
    /// Most common gap between consecutive timestamps (smallest on ties).
    pub fn infer(timestamps: &[i64]) -> Result<Self> {
        let mut gaps: Vec<i64> = timestamps.windows(2).map(|w| w[1] - w[0]).collect();
        if gaps.is_empty() {
            return Err(UfoError::invalid("need at least two timestamps to infer a frequency"));
        }
        gaps.sort_unstable();
        let mut best = (gaps[0], 0usize);
        let mut i = 0;
        while i < gaps.len() {
            let j = gaps[i..].partition_point(|g| *g == gaps[i]) + i;
            if j - i > best.1 {
                best = (gaps[i], j - i);
            }
            i = j;
        }
        Ok(Self { seconds: best.0 })
    }
}

/// A multichannel series on strictly increasing timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub timestamps: Vec<i64>,
    /// `N × d_x`; `NaN` marks a missing cell.
    pub values: DenseArray,
    pub frequency: Frequency,
    pub channels: Vec<String>,
}

impl Dataset {
    pub fn new(timestamps: Vec<i64>, values: DenseArray, channels: Vec<String>) -> Result<Self> {
        if values.rows() != timestamps.len() || values.cols() != channels.len() {
            return Err(UfoError::invalid(format!(
                "{} timestamps and {} channel names for values of shape {}x{}",
                timestamps.len(),
                channels.len(),
                values.rows(),
                values.cols()
            )));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(UfoError::invalid("timestamps must be strictly increasing"));
        }
        if values.data().iter().any(|v| v.is_infinite()) {
            return Err(UfoError::invalid("values must be finite or missing"));
        }
        let frequency = Frequency::infer(&timestamps)?;
        let ds = Self {
            timestamps,
            values,
            frequency,
            channels,
        };
        let empty: Vec<usize> = (0..ds.channels())
            .filter(|&j| (0..ds.len()).all(|i| ds.values.get(i, j).is_nan()))
            .collect();
        if !empty.is_empty() {
            return Err(UfoError::DegenerateChannel(empty));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    /// Whether any channel of row `i` is observed.
    pub fn row_observed(&self, i: usize) -> bool {
        self.values.row(i).iter().any(|v| !v.is_nan())
    }

    /// Time of row `i` in sampling-interval units relative to `origin`.
    pub fn step_time(&self, i: usize, origin: i64) -> f64 {
        (self.timestamps[i] - origin) as f64 / self.frequency.seconds as f64
    }

    /// Calendar day index (UTC) of row `i`.
    pub fn day(&self, i: usize) -> i64 {
        self.timestamps[i].div_euclid(DAY_SECONDS)
    }

    /// Copy with missing cells forward-filled (leading gaps take the first
    /// observed value of the channel) and the per-row observation mask.
    pub fn forward_filled(&self) -> (Dataset, Vec<bool>) {
        let mask: Vec<bool> = (0..self.len()).map(|i| self.row_observed(i)).collect();
        let mut values = self.values.clone();
        for j in 0..self.channels() {
            let first = (0..self.len())
                .map(|i| self.values.get(i, j))
                .find(|v| !v.is_nan())
                .unwrap_or(0.0);
            let mut last = first;
            for i in 0..self.len() {
                let v = values.get(i, j);
                if v.is_nan() {
                    values.set(i, j, last);
                } else {
                    last = v;
                }
            }
        }
        let filled = Dataset {
            values,
            ..self.clone()
        };
        (filled, mask)
    }
}

/// Sine–cosine pairs of the day, week, month and year phases: `N × 8`.
#[derive(Clone, Debug, PartialEq)]
pub struct CyclicFeatures {
    pub values: DenseArray,
}

pub const COVARIATE_DIM: usize = 8;

/// Cycle lengths in seconds; the month is a fixed 30.4375 days and the
/// year 365.25 days so every cycle has constant length.
pub const CYCLES: [f64; 4] = [86_400.0, 604_800.0, 2_629_800.0, 31_557_600.0];

pub fn time_covariates(timestamps: &[i64]) -> CyclicFeatures {
    let mut values = DenseArray::zeros(timestamps.len(), COVARIATE_DIM);
    for (i, &t) in timestamps.iter().enumerate() {
        for (k, c) in CYCLES.iter().enumerate() {
            let phase = TAU * (t as f64).rem_euclid(*c) / c;
            values.set(i, 2 * k, phase.sin());
            values.set(i, 2 * k + 1, phase.cos());
        }
    }
    CyclicFeatures { values }
}

/// Result of removing whole calendar days.
#[derive(Clone, Debug, PartialEq)]
pub struct Injection {
    /// The dataset with removed days set to `NaN`.
    pub dataset: Dataset,
    pub removed_days: Vec<i64>,
}

/// Marks all observations of `⌈fraction · D⌉` uniformly chosen calendar days
/// as missing, where `D` is the number of distinct days in the data.
pub fn inject_block_missing(ds: &Dataset, fraction: f64, seed: u64) -> Result<Injection> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(UfoError::invalid(format!("fraction must lie in [0, 1), got {fraction}")));
    }
    let days: Vec<i64> = (0..ds.len())
        .map(|i| ds.day(i))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if days.len() < 2 {
        return Err(UfoError::Config("irregularity injection needs at least two calendar days".into()));
    }
    // guard against 0.3 · 10 = 3.0000000000000004 rounding up to 4
    let count = ((fraction * days.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut rng = stream("inject-block-missing", seed);
    let mut removed: Vec<i64> = sample(&mut rng, days.len(), count)
        .into_iter()
        .map(|k| days[k])
        .collect();
    removed.sort_unstable();
    let mut values = ds.values.clone();
    for i in 0..ds.len() {
        if removed.binary_search(&ds.day(i)).is_ok() {
            values.row_mut(i).fill(f64::NAN);
        }
    }
    Ok(Injection {
        dataset: Dataset {
            values,
            ..ds.clone()
        },
        removed_days: removed,
    })
}

/// Coefficient of variation (population std / mean) of consecutive gaps.
pub fn gap_cv(times: &[f64]) -> Result<f64> {
    if times.len() < 3 {
        return Err(UfoError::invalid("gap CV needs at least two gaps"));
    }
    let gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return Err(UfoError::invalid("times must increase"));
    }
    let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// Patch grids of levels `1..=levels` over the observed times.
///
/// Missing positions are skipped and the survivors left-truncated to a
/// multiple of `w^levels`, so every patch holds exactly `w` observations.
pub fn build_level_grids(times: &[f64], observed: &[bool], w: usize, levels: usize) -> Result<Vec<LevelGrid>> {
    if times.len() != observed.len() {
        return Err(UfoError::invalid("times and mask differ in length"));
    }
    if w < 1 || levels < 1 {
        return Err(UfoError::Config("patch length and level count must be positive".into()));
    }
    let block = w.checked_pow(levels as u32).ok_or_else(|| UfoError::Config("w^M overflows".into()))?;
    let survivors: Vec<f64> = times.iter().zip(observed).filter(|(_, o)| **o).map(|(t, _)| *t).collect();
    if survivors.len() < block {
        return Err(UfoError::Config(format!(
            "{} observed positions; at least w^M = {block} are required",
            survivors.len()
        )));
    }
    let keep = survivors.len() / block * block;
    let mut fine = survivors[survivors.len() - keep..].to_vec();
    let mut grids = Vec::with_capacity(levels);
    for m in 1..=levels {
        let grid = LevelGrid::new(m, w, fine)?;
        fine = grid.coarse_times().to_vec();
        grids.push(grid);
    }
    Ok(grids)
}

/// Sequence lengths of every level, from the bottom.
pub fn level_sizes(grids: &[LevelGrid]) -> Vec<usize> {
    let mut sizes: Vec<usize> = grids.iter().map(|g| g.fine_times().len()).collect();
    if let Some(last) = grids.last() {
        sizes.push(last.num_patches());
    }
    sizes
}

/// Chronological 70/10/20 split of `n` rows.
pub fn split_ranges(n: usize) -> [SplitRange; 3] {
    let train_end = n * 7 / 10;
    let val_end = n * 8 / 10;
    [
        SplitRange { start: 0, end: train_end },
        SplitRange { start: train_end, end: val_end },
        SplitRange { start: val_end, end: n },
    ]
}

#[cfg(test)]
mod tests;
