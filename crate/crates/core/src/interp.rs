//! Regularized Nadaraya–Watson smoothing of irregular observations.
//!
//! The estimate at time `t` is
//!
//! ```text
//! x̂(t) = Σ x_i K(t_i, t) / (λ + Σ K(t_i, t)),   K(a, b) = exp(-|a - b| / scale)
//! ```
//!
//! The constant `λ` acts as a pseudo-observation of value zero present at
//! every query, so sparse regions shrink toward zero instead of blowing up.

use crate::error::{Result, UfoError};

/// Weight of the default prior: the kernel weight at distance 3.
pub const DEFAULT_LAMBDA: f64 = 0.049_787_068_367_863_944;

/// One channel of irregularly timed observations.
#[derive(Clone, Debug, PartialEq)]
pub struct IrregularChannel {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl IrregularChannel {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(UfoError::invalid(format!(
                "{} times but {} values",
                times.len(),
                values.len()
            )));
        }
        if times.iter().chain(&values).any(|x| !x.is_finite()) {
            return Err(UfoError::invalid("channel contains non-finite entries"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(UfoError::invalid("channel times must be strictly increasing"));
        }
        Ok(Self { times, values })
    }

    pub fn empty() -> Self {
        Self {
            times: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelConfig {
    pub lambda: f64,
    pub kernel_scale: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            kernel_scale: 1.0,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(UfoError::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.kernel_scale > 0.0 && self.kernel_scale.is_finite()) {
            return Err(UfoError::invalid(format!(
                "kernel_scale must be > 0, got {}",
                self.kernel_scale
            )));
        }
        Ok(())
    }
}

pub fn kernel_weight(a: f64, b: f64, scale: f64) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() || !scale.is_finite() {
        return Err(UfoError::invalid("kernel arguments must be finite"));
    }
    if scale <= 0.0 {
        return Err(UfoError::invalid("kernel scale must be positive"));
    }
    Ok(kernel(a, b, scale))
}

#[inline]
fn kernel(a: f64, b: f64, scale: f64) -> f64 {
    (-(a - b).abs() / scale).exp()
}

/// Normalized smoothing weights of `times` at `query`.
///
/// `x̂(query) = Σ weights[i] · x_i`; the weights sum to less than one when
/// `λ > 0`. Because they do not depend on the values, callers reuse them as a
/// fixed linear map over every channel.
pub fn smoothing_weights(times: &[f64], query: f64, cfg: &KernelConfig) -> Vec<f64> {
    let mut w: Vec<f64> = times.iter().map(|&t| kernel(t, query, cfg.kernel_scale)).collect();
    let denom = cfg.lambda + w.iter().sum::<f64>();
    if denom > 0.0 {
        for x in &mut w {
            *x /= denom;
        }
    }
    w
}

/// Evaluates the smoother of one channel at every query time.
pub fn interpolate(
    channel: &IrregularChannel,
    query_times: &[f64],
    cfg: &KernelConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if channel.is_empty() && cfg.lambda == 0.0 {
        return Err(UfoError::DegenerateDesign(
            "empty channel with lambda = 0 has no estimate".into(),
        ));
    }
    if query_times.iter().any(|t| !t.is_finite()) {
        return Err(UfoError::invalid("query times must be finite"));
    }
    Ok(query_times
        .iter()
        .map(|&q| {
            smoothing_weights(&channel.times, q, cfg)
                .iter()
                .zip(&channel.values)
                .map(|(w, x)| w * x)
                .sum()
        })
        .collect())
}

/// Multichannel variant: `values[i]` is the observation vector at `times[i]`.
/// Each channel is smoothed independently with shared weights.
pub fn interpolate_rows(
    times: &[f64],
    values: &[Vec<f64>],
    query_times: &[f64],
    cfg: &KernelConfig,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if times.len() != values.len() {
        return Err(UfoError::invalid("times and value rows differ in length"));
    }
    if times.is_empty() && cfg.lambda == 0.0 {
        return Err(UfoError::DegenerateDesign(
            "empty channel with lambda = 0 has no estimate".into(),
        ));
    }
    let width = values.first().map_or(0, Vec::len);
    Ok(query_times
        .iter()
        .map(|&q| {
            let w = smoothing_weights(times, q, cfg);
            let mut out = vec![0.0; width];
            for (wi, row) in w.iter().zip(values) {
                for (o, x) in out.iter_mut().zip(row) {
                    *o += wi * x;
                }
            }
            out
        })
        .collect())
}
