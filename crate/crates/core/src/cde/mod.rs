//! Neural CDE resampling over patches.
//!
//! Downsampling integrates a controlled differential equation across every
//! patch of a level and keeps the terminal state; upsampling seeds one
//! trajectory per coarse position and records it along the finer timestamps.
//! Patches never interact, so a whole level (and a whole batch) is integrated
//! in lockstep as one stack of rows.

mod alt;
mod ncde;

pub use alt::{
    alt_resample, AltDirection, AltKind, AltParams, ConvDownParams, ConvUpParams, GruParams,
};
pub use ncde::{
    downsample_tape, ncde_downsample, ncde_upsample, rk4_patches, upsample_tape, FieldIds,
    NcdeDownParams, NcdeUpParams, PatchSet,
};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UfoError};
use crate::interp::KernelConfig;
use crate::tensorops::{swish, DenseArray};

/// Patch partition of one level.
///
/// `fine_times` holds the timestamps of the level below, grouped into
/// consecutive patches of `patch_len`; the coarse timestamp of a patch is its
/// end time divided by `patch_len`, which keeps the mean spacing of every
/// level comparable.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelGrid {
    level: usize,
    patch_len: usize,
    fine_times: Vec<f64>,
    coarse_times: Vec<f64>,
}

impl LevelGrid {
    pub fn new(level: usize, patch_len: usize, fine_times: Vec<f64>) -> Result<Self> {
        if patch_len == 0 {
            return Err(UfoError::InvalidGrid("empty patch".into()));
        }
        if fine_times.is_empty() || fine_times.len() % patch_len != 0 {
            return Err(UfoError::InvalidGrid(format!(
                "{} fine times do not split into patches of {patch_len}",
                fine_times.len()
            )));
        }
        if fine_times.iter().any(|t| !t.is_finite()) {
            return Err(UfoError::InvalidGrid("non-finite timestamp".into()));
        }
        if fine_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(UfoError::InvalidGrid("fine times must be strictly increasing".into()));
        }
        let coarse_times = fine_times
            .chunks(patch_len)
            .map(|p| p[patch_len - 1] / patch_len as f64)
            .collect();
        Ok(Self {
            level,
            patch_len,
            fine_times,
            coarse_times,
        })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    pub fn num_patches(&self) -> usize {
        self.coarse_times.len()
    }

    pub fn fine_times(&self) -> &[f64] {
        &self.fine_times
    }

    pub fn coarse_times(&self) -> &[f64] {
        &self.coarse_times
    }

    pub fn patch(&self, p: usize) -> &[f64] {
        &self.fine_times[p * self.patch_len..(p + 1) * self.patch_len]
    }

    pub fn patch_bounds(&self) -> Vec<(f64, f64)> {
        self.fine_times
            .chunks(self.patch_len)
            .map(|p| (p[0], p[p.len() - 1]))
            .collect()
    }
}

/// A level's embeddings with their timestamps and time covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSequence {
    pub times: Vec<f64>,
    /// `len × d`
    pub values: DenseArray,
    /// `len × c`
    pub covariates: DenseArray,
}

impl LevelSequence {
    pub fn new(times: Vec<f64>, values: DenseArray, covariates: DenseArray) -> Result<Self> {
        if values.rows() != times.len() || covariates.rows() != times.len() {
            return Err(UfoError::invalid(format!(
                "sequence of {} times has {} value rows and {} covariate rows",
                times.len(),
                values.rows(),
                covariates.rows()
            )));
        }
        Ok(Self {
            times,
            values,
            covariates,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// States recorded at the requested times of one integration.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub steps_per_interval: usize,
    pub kernel: KernelConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            steps_per_interval: 2,
            kernel: KernelConfig::default(),
        }
    }
}

/// Weights of a SwiGLU map `W_out · (swish(W_gate·u) ⊙ (W_val·u))`, stored
/// for row-vector inputs: `gate`, `value` are `in × hidden`, `output` is
/// `hidden × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorFieldParams {
    pub gate: DenseArray,
    pub value: DenseArray,
    pub output: DenseArray,
}

impl VectorFieldParams {
    pub fn input_dim(&self) -> usize {
        self.gate.rows()
    }

    pub fn state_dim(&self) -> usize {
        self.output.cols()
    }

    fn validate(&self) -> Result<()> {
        let (i, h) = self.gate.shape();
        if self.value.shape() != (i, h) || self.output.rows() != h {
            return Err(UfoError::invalid("inconsistent SwiGLU weight shapes"));
        }
        Ok(())
    }
}

/// Evaluates the SwiGLU vector field at `u = tau ⊕ control ⊕ state`
/// (`control` is absent for upsampling fields).
pub fn swiglu_field(
    tau: &[f64],
    control: Option<&[f64]>,
    state: &[f64],
    params: &VectorFieldParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    let mut u = Vec::with_capacity(params.input_dim());
    u.extend_from_slice(tau);
    if let Some(c) = control {
        u.extend_from_slice(c);
    }
    u.extend_from_slice(state);
    if u.len() != params.input_dim() {
        return Err(UfoError::invalid(format!(
            "vector field expects input of width {}, got {}",
            params.input_dim(),
            u.len()
        )));
    }
    if state.len() != params.state_dim() {
        return Err(UfoError::invalid(format!(
            "vector field state width {} but output width {}",
            state.len(),
            params.state_dim()
        )));
    }
    let hidden = params.gate.cols();
    let mut h = vec![0.0; hidden];
    for (j, hj) in h.iter_mut().enumerate() {
        let mut g = 0.0;
        let mut v = 0.0;
        for (i, ui) in u.iter().enumerate() {
            g += ui * params.gate.get(i, j);
            v += ui * params.value.get(i, j);
        }
        *hj = swish(g) * v;
    }
    let d = params.state_dim();
    Ok((0..d)
        .map(|k| h.iter().enumerate().map(|(j, hj)| hj * params.output.get(j, k)).sum())
        .collect())
}

fn axpy(z: &[f64], k: &[f64], h: f64) -> Vec<f64> {
    z.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

/// Fixed-step classical Runge–Kutta from the first to the last of
/// `fine_times`, with `steps_per_interval` steps between consecutive times,
/// recording the state at every fine time.
pub fn integrate_patch<F>(
    mut field: F,
    z0: &[f64],
    fine_times: &[f64],
    steps_per_interval: usize,
) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64]) -> Vec<f64>,
{
    if steps_per_interval == 0 {
        return Err(UfoError::invalid("steps_per_interval must be >= 1"));
    }
    if fine_times.is_empty() {
        return Err(UfoError::invalid("no fine times to integrate over"));
    }
    if fine_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(UfoError::invalid("fine times must be increasing"));
    }
    let mut z = z0.to_vec();
    let mut states = vec![z.clone()];
    for w in fine_times.windows(2) {
        let h = (w[1] - w[0]) / steps_per_interval as f64;
        for s in 0..steps_per_interval {
            let t = w[0] + s as f64 * h;
            let k1 = field(t, &z);
            let k2 = field(t + 0.5 * h, &axpy(&z, &k1, 0.5 * h));
            let k3 = field(t + 0.5 * h, &axpy(&z, &k2, 0.5 * h));
            let k4 = field(t + h, &axpy(&z, &k3, h));
            for i in 0..z.len() {
                z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if z.iter().any(|x| !x.is_finite()) {
                return Err(UfoError::IntegrationDiverged { time: t + h });
            }
        }
        states.push(z.clone());
    }
    Ok(Trajectory {
        times: fine_times.to_vec(),
        states,
    })
}

#[cfg(test)]
mod tests;
