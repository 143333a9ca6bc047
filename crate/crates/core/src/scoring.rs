//! Sample-based CRPS and the channel-normalized NCRPS.
//!
//! The sample score uses the sorted form
//! `MAE − (1/P²) Σ_i (2i − P − 1) X_(i)`, which equals the energy form
//! `E|X − y| − ½ E|X − X'|` in `O(P log P)`. [`crps_brute`] integrates the
//! squared CDF difference exactly and serves as its oracle.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Result, UfoError};
use crate::tensorops::{crps_cell, DenseArray, Tape, Var};

fn check_samples(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(UfoError::invalid("empty sample set"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(UfoError::invalid("sample set contains non-finite values"));
    }
    Ok(())
}

/// CRPS of an empirical ensemble against one observation.
pub fn crps_samples(x: &[f64], y: f64) -> Result<f64> {
    check_samples(x)?;
    let mut buf: Vec<(f64, usize)> = x.iter().copied().zip(0..).collect();
    Ok(crps_cell(&mut buf, y, x.len() as f64, |_, _| {}).max(0.0))
}

/// Exact `∫ (F(z) − 1{y ≤ z})² dz` for the empirical step CDF `F` of `x`.
pub fn crps_brute(x: &[f64], y: f64) -> Result<f64> {
    check_samples(x)?;
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut points = sorted.clone();
    points.push(y);
    points.sort_by(f64::total_cmp);
    let p = x.len() as f64;
    let mut total = 0.0;
    for seg in points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        if b <= a {
            continue;
        }
        // F and the indicator are constant on [a, b)
        let below = sorted.partition_point(|&s| s <= a) as f64;
        let f = below / p;
        let h = if y <= a { 1.0 } else { 0.0 };
        total += (f - h) * (f - h) * (b - a);
    }
    Ok(total)
}

/// Per-channel NCRPS of one forecast.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub channels: Vec<f64>,
    pub denominators: Vec<f64>,
    pub aggregate: f64,
}

impl ScoreReport {
    /// Pools several per-forecast reports by summing CRPS mass and ℓ1
    /// denominators channel by channel.
    pub fn pooled(reports: &[ScoreReport]) -> Result<ScoreReport> {
        let first = reports.first().ok_or_else(|| UfoError::invalid("no reports to pool"))?;
        let d = first.channels.len();
        let mut num = vec![0.0; d];
        let mut den = vec![0.0; d];
        for r in reports {
            if r.channels.len() != d {
                return Err(UfoError::invalid("reports differ in channel count"));
            }
            for j in 0..d {
                num[j] += r.channels[j] * r.denominators[j];
                den[j] += r.denominators[j];
            }
        }
        let channels: Vec<f64> = num.iter().zip(&den).map(|(n, d)| n / d).collect();
        let aggregate = channels.iter().sum::<f64>() / d as f64;
        Ok(ScoreReport {
            channels,
            denominators: den,
            aggregate,
        })
    }

    /// Flat text table `channel,denominator,ncrps` with a final `mean` row.
    pub fn to_table(&self, names: &[String]) -> String {
        let mut out = String::from("channel,denominator,ncrps\n");
        for (j, (v, d)) in self.channels.iter().zip(&self.denominators).enumerate() {
            let name = names.get(j).cloned().unwrap_or_else(|| format!("ch{j}"));
            let _ = writeln!(out, "{name},{d},{v}");
        }
        let _ = writeln!(out, "mean,,{}", self.aggregate);
        out
    }
}

fn denominators(truth: &DenseArray) -> Result<Vec<f64>> {
    let d = truth.cols();
    let mut den = vec![0.0; d];
    for r in 0..truth.rows() {
        for (j, v) in truth.row(r).iter().enumerate() {
            den[j] += v.abs();
        }
    }
    let zero: Vec<usize> = (0..d).filter(|&j| den[j] <= 0.0 || !den[j].is_finite()).collect();
    if !zero.is_empty() {
        return Err(UfoError::DegenerateChannel(zero));
    }
    Ok(den)
}

/// NCRPS of an ensemble (`samples[s]` is an `L × d_x` path) against `truth`.
pub fn ncrps(samples: &[DenseArray], truth: &DenseArray) -> Result<ScoreReport> {
    if samples.is_empty() {
        return Err(UfoError::invalid("empty ensemble"));
    }
    if samples.iter().any(|s| s.shape() != truth.shape()) {
        return Err(UfoError::invalid("ensemble members do not match the truth shape"));
    }
    let den = denominators(truth)?;
    let d = truth.cols();
    let mut num = vec![0.0; d];
    let mut cell = vec![0.0; samples.len()];
    for t in 0..truth.rows() {
        for j in 0..d {
            for (c, s) in cell.iter_mut().zip(samples) {
                *c = s.get(t, j);
            }
            num[j] += crps_samples(&cell, truth.get(t, j))?;
        }
    }
    let channels: Vec<f64> = num.iter().zip(&den).map(|(n, d)| n / d).collect();
    let aggregate = channels.iter().sum::<f64>() / d as f64;
    Ok(ScoreReport {
        channels,
        denominators: den,
        aggregate,
    })
}

/// Differentiable mean NCRPS over `groups` forecasts.
///
/// `samples` stacks `groups × members × L` rows (member-major inside each
/// group) and `truth` stacks `groups × L` rows.
pub fn ncrps_loss(
    tape: &mut Tape,
    samples: Var,
    truth: &DenseArray,
    groups: usize,
    members: usize,
) -> Result<Var> {
    let (rows, cols) = tape.shape(samples);
    if groups == 0 || members == 0 || truth.rows() % groups != 0 {
        return Err(UfoError::invalid("truth rows do not split into groups"));
    }
    let steps = truth.rows() / groups;
    if cols != truth.cols() || rows != groups * members * steps {
        return Err(UfoError::invalid(format!(
            "samples of shape {rows}x{cols} do not match {groups} groups of {members} x {steps} x {}",
            truth.cols()
        )));
    }
    let mut weights = vec![0.0; truth.len()];
    for g in 0..groups {
        let block = DenseArray::from_vec(
            steps,
            cols,
            truth.data()[g * steps * cols..(g + 1) * steps * cols].to_vec(),
        )?;
        let den = denominators(&block)?;
        for t in 0..steps {
            for j in 0..cols {
                weights[(g * steps + t) * cols + j] = 1.0 / (den[j] * cols as f64 * groups as f64);
            }
        }
    }
    let cells = tape.crps(samples, truth, groups, members);
    Ok(tape.dot_const(cells, Arc::new(weights)))
}

/// Persistence baseline: the last context row repeated over the horizon.
pub fn persistence_forecast(last: &[f64], horizon: usize) -> DenseArray {
    let rows = vec![last.to_vec(); horizon];
    DenseArray::from_rows(&rows).unwrap_or_else(|_| DenseArray::zeros(horizon, last.len()))
}
