//! Recurrent and convolutional resamplers used as baselines for the CDE.
//!
//! Both assume a regular grid: callers forward-fill missing slots first.

use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use super::{LevelGrid, LevelSequence};
use crate::error::{Result, UfoError};
use crate::tensorops::{Bound, DenseArray, ParamId, ParamStore, RowMixPlan, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AltKind {
    Rnn,
    Conv,
}

impl FromStr for AltKind {
    type Err = UfoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnn" => Ok(Self::Rnn),
            "conv" => Ok(Self::Conv),
            other => Err(UfoError::invalid(format!("unknown resampler kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AltDirection {
    Down,
    Up,
}

/// Strided convolution with kernel = stride = `w`: `w·d_in × d` weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDownParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvDownParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        w: usize,
        d_in: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.add_uniform(format!("{prefix}.weight"), w * d_in, d, 1.0, rng),
            bias: store.add(format!("{prefix}.bias"), DenseArray::zeros(1, d)),
        }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, prev: Var, w: usize) -> Result<Var> {
        let (rows, d_in) = tape.shape(prev);
        if w == 0 || rows % w != 0 {
            return Err(UfoError::InvalidGrid(format!("{rows} rows do not split into patches of {w}")));
        }
        if tape.shape(bound.var(self.weight)).0 != w * d_in {
            return Err(UfoError::invalid("convolution kernel does not match patch length"));
        }
        let wide = tape.reshape(prev, rows / w, w * d_in);
        let out = tape.matmul(wide, bound.var(self.weight));
        Ok(tape.add_row(out, bound.var(self.bias)))
    }
}

/// Transposed convolution with factor `w`: `d × w·d` weight and a shared
/// `1 × d` bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvUpParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvUpParams {
    pub fn init(store: &mut ParamStore, prefix: &str, w: usize, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add_uniform(format!("{prefix}.weight"), d, w * d, 1.0, rng),
            bias: store.add(format!("{prefix}.bias"), DenseArray::zeros(1, d)),
        }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, seeds: Var, w: usize) -> Result<Var> {
        let (p, d) = tape.shape(seeds);
        if tape.shape(bound.var(self.weight)) != (d, w * d) {
            return Err(UfoError::invalid("transposed kernel does not match patch length"));
        }
        let wide = tape.matmul(seeds, bound.var(self.weight));
        let tall = tape.reshape(wide, p * w, d);
        Ok(tape.add_row(tall, bound.var(self.bias)))
    }
}

/// Gated recurrent cell; gate blocks are ordered update, reset, candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruParams {
    pub input: ParamId,
    pub hidden: ParamId,
    pub bias: ParamId,
}

impl GruParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            input: store.add_uniform(format!("{prefix}.input"), d_in, 3 * d, 1.0, rng),
            hidden: store.add_uniform(format!("{prefix}.hidden"), d, 3 * d, 1.0, rng),
            bias: store.add(format!("{prefix}.bias"), DenseArray::zeros(1, 3 * d)),
        }
    }

    pub fn cell(&self, tape: &mut Tape, bound: &Bound, x: Var, h: Var) -> Var {
        let d = tape.shape(h).1;
        let xi = tape.matmul(x, bound.var(self.input));
        let xi = tape.add_row(xi, bound.var(self.bias));
        let hh = tape.matmul(h, bound.var(self.hidden));
        let xz = tape.slice_cols(xi, 0, 2 * d);
        let hz = tape.slice_cols(hh, 0, 2 * d);
        let gates = tape.add(xz, hz);
        let gates = tape.sigmoid(gates);
        let update = tape.slice_cols(gates, 0, d);
        let reset = tape.slice_cols(gates, d, 2 * d);
        let xn = tape.slice_cols(xi, 2 * d, 3 * d);
        let hn = tape.slice_cols(hh, 2 * d, 3 * d);
        let hn = tape.mul(reset, hn);
        let cand = tape.add(xn, hn);
        let cand = tape.tanh(cand);
        // h' = cand + update ⊙ (h - cand)
        let diff = tape.sub(h, cand);
        let keep = tape.mul(update, diff);
        tape.add(cand, keep)
    }

    /// Last hidden state over each patch, starting from zero.
    pub fn down(&self, tape: &mut Tape, bound: &Bound, prev: Var, w: usize, d: usize) -> Result<Var> {
        let rows = tape.shape(prev).0;
        if w == 0 || rows % w != 0 {
            return Err(UfoError::InvalidGrid(format!("{rows} rows do not split into patches of {w}")));
        }
        let p = rows / w;
        let mut h = tape.constant(DenseArray::zeros(p, d));
        for k in 0..w {
            let idx: Vec<usize> = (0..p).map(|i| i * w + k).collect();
            let x = tape.row_mix(prev, Arc::new(RowMixPlan::gather(&idx)));
            h = self.cell(tape, bound, x, h);
        }
        Ok(h)
    }

    /// Unrolls from each seed over the fine covariates, emitting one hidden
    /// state per fine position.
    pub fn up(&self, tape: &mut Tape, seeds: Var, bound: &Bound, covariates: &DenseArray, w: usize) -> Result<Var> {
        let (p, d) = tape.shape(seeds);
        if covariates.rows() != p * w {
            return Err(UfoError::invalid(format!(
                "{} covariate rows for {p} patches of {w}",
                covariates.rows()
            )));
        }
        let c = covariates.cols();
        let mut h = seeds;
        let mut outs = Vec::with_capacity(w);
        for k in 0..w {
            let mut x = DenseArray::zeros(p, c);
            for i in 0..p {
                x.row_mut(i).copy_from_slice(covariates.row(i * w + k));
            }
            let x = tape.constant(x);
            h = self.cell(tape, bound, x, h);
            outs.push(h);
        }
        let wide = tape.concat_cols(&outs);
        Ok(tape.reshape(wide, p * w, d))
    }
}

/// Parameters of one baseline resampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AltParams {
    ConvDown(ConvDownParams),
    ConvUp(ConvUpParams),
    Gru(GruParams),
}

/// One level of baseline resampling outside of training. Downsampling
/// consumes `seq` aligned with `grid.fine_times()`; upsampling consumes one
/// seed per patch and needs `fine_covariates` for the recurrent variant.
#[allow(clippy::too_many_arguments)]
pub fn alt_resample(
    kind: AltKind,
    direction: AltDirection,
    seq: &LevelSequence,
    grid: &LevelGrid,
    fine_covariates: &DenseArray,
    store: &ParamStore,
    params: &AltParams,
) -> Result<LevelSequence> {
    let w = grid.patch_len();
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let x = tape.constant(seq.values.clone());
    match direction {
        AltDirection::Down => {
            if seq.len() != grid.fine_times().len() {
                return Err(UfoError::invalid(format!(
                    "{} positions for {} fine times",
                    seq.len(),
                    grid.fine_times().len()
                )));
            }
            let out = match (kind, params) {
                (AltKind::Conv, AltParams::ConvDown(p)) => p.apply(&mut tape, &bound, x, w)?,
                (AltKind::Rnn, AltParams::Gru(p)) => {
                    let d = store.get(p.hidden).rows();
                    p.down(&mut tape, &bound, x, w, d)?
                }
                _ => return Err(UfoError::invalid("parameters do not match resampler kind")),
            };
            let covs: Vec<Vec<f64>> = (0..grid.num_patches())
                .map(|p| seq.covariates.row(p * w + w - 1).to_vec())
                .collect();
            LevelSequence::new(
                grid.coarse_times().to_vec(),
                tape.value(out).clone(),
                DenseArray::from_rows(&covs)?.reshaped(covs.len(), seq.covariates.cols())?,
            )
        }
        AltDirection::Up => {
            if seq.len() != grid.num_patches() {
                return Err(UfoError::invalid(format!(
                    "{} coarse positions for {} patches",
                    seq.len(),
                    grid.num_patches()
                )));
            }
            let out = match (kind, params) {
                (AltKind::Conv, AltParams::ConvUp(p)) => p.apply(&mut tape, &bound, x, w)?,
                (AltKind::Rnn, AltParams::Gru(p)) => p.up(&mut tape, x, &bound, fine_covariates, w)?,
                _ => return Err(UfoError::invalid("parameters do not match resampler kind")),
            };
            LevelSequence::new(
                grid.fine_times().to_vec(),
                tape.value(out).clone(),
                fine_covariates.clone(),
            )
        }
    }
}
