//! Window preparation and batched forward passes.
//!
//! A batch stacks windows with the same effective context length. Decoder
//! sequences are stacked sample-major inside each window, so decoder group
//! `b·S + s` is sample `s` of window `b` and reads encoder group `b`.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Model, Resampler, SkipSource};
use crate::cde::{downsample_tape, upsample_tape, LevelGrid, LevelSequence, PatchSet};
use crate::data::{build_level_grids, ContextMode, TimeSeriesWindow};
use crate::error::{Result, UfoError};
use crate::refiner::{
    collect_attention, decoder_refine_tape, encoder_refine_tape, AttentionRecord, AttentionSite, NORM_EPS,
};
use crate::tensorops::{seeded_normal, Bound, DenseArray, RowMixPlan, Tape, Var};

pub const REVIN_EPS: f64 = 1e-5;
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Samples decoded per tape when forecasting; bounds memory only.
const SAMPLE_CHUNK: usize = 25;

/// Per-channel location and scale removed from a window's inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevinStats {
    pub mean: Vec<f64>,
    /// `sqrt(var + eps)`
    pub scale: Vec<f64>,
}

impl RevinStats {
    /// Statistics over the rows flagged in `mask`.
    pub fn from_rows(values: &DenseArray, mask: &[bool]) -> Result<Self> {
        let rows: Vec<usize> = (0..values.rows()).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(UfoError::invalid("context has no observed rows"));
        }
        let n = rows.len() as f64;
        // shifted by the first observation so a constant channel has a
        // mean equal to that constant bit-for-bit
        let pivot = values.row(rows[0]).to_vec();
        let d = values.cols();
        let mut offset = vec![0.0; d];
        for &i in &rows {
            for ((o, v), p) in offset.iter_mut().zip(values.row(i)).zip(&pivot) {
                *o += (v - p) / n;
            }
        }
        let mean: Vec<f64> = pivot.iter().zip(&offset).map(|(p, o)| p + o).collect();
        let mut var = vec![0.0; d];
        for &i in &rows {
            for ((s, v), (p, o)) in var.iter_mut().zip(values.row(i)).zip(pivot.iter().zip(&offset)) {
                let dev = (v - p) - o;
                *s += dev * dev / n;
            }
        }
        let scale = var.iter().map(|v| (v + REVIN_EPS).sqrt()).collect();
        Ok(Self { mean, scale })
    }

    pub fn normalize(&self, values: &DenseArray) -> DenseArray {
        let mut out = values.clone();
        for r in 0..out.rows() {
            for ((x, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.scale) {
                *x = (*x - m) / s;
            }
        }
        out
    }

    pub fn denormalize(&self, values: &DenseArray) -> DenseArray {
        let mut out = values.clone();
        for r in 0..out.rows() {
            for ((x, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.scale) {
                *x = *x * s + m;
            }
        }
        out
    }
}

/// Parameters of the top-level diagonal Gaussian of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    /// `T_M × d`
    pub mu: DenseArray,
    /// `T_M × d`, strictly positive.
    pub sigma: DenseArray,
}

impl LatentGaussian {
    /// `n` reparameterized draws `μ + σ ⊙ ε` from stream `"latent"`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<DenseArray> {
        let (rows, d) = self.mu.shape();
        let eps = seeded_normal(n * rows, d, "latent", seed);
        (0..n)
            .map(|s| {
                let mut out = self.mu.clone();
                for (k, o) in out.data_mut().iter_mut().enumerate() {
                    *o += self.sigma.data()[k] * eps.data()[s * rows * d + k];
                }
                out
            })
            .collect()
    }
}

/// Encoder features of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack {
    /// `x^(0..=M)`
    pub levels: Vec<LevelSequence>,
    /// Features the decoder cross-attends to, for levels `0..M`.
    pub skips: Vec<DenseArray>,
    /// `grids[m]` partitions level `m` into the patches of level `m + 1`.
    pub grids: Vec<LevelGrid>,
    /// Context rows of the window that reached level 0.
    pub used_rows: Vec<usize>,
}

/// Sampled future paths of one window in data units.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastEnsemble {
    /// `P` paths, each `L × d_x`.
    pub samples: Vec<DenseArray>,
    pub timestamps: Vec<i64>,
    pub stats: RevinStats,
}

impl ForecastEnsemble {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-step, per-channel mean over samples.
    pub fn mean(&self) -> DenseArray {
        let mut out = DenseArray::zeros(self.samples[0].rows(), self.samples[0].cols());
        for s in &self.samples {
            out.add_assign(s);
        }
        out.scale_assign(1.0 / self.samples.len() as f64);
        out
    }
}

/// A window reduced to what the network consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedWindow {
    pub stats: RevinStats,
    /// Indices into the window's context of the rows fed to level 0.
    pub used_rows: Vec<usize>,
    /// `T_eff × d_x`, normalized.
    pub inputs: DenseArray,
    pub enc_grids: Vec<LevelGrid>,
    /// Covariates of encoder levels `0..=M`.
    pub enc_covariates: Vec<DenseArray>,
    pub dec_grids: Vec<LevelGrid>,
    /// Covariates of horizon levels `0..=M`.
    pub dec_covariates: Vec<DenseArray>,
    /// `L × d_x` ground truth in data units.
    pub truth: DenseArray,
    pub horizon_timestamps: Vec<i64>,
}

impl PreparedWindow {
    pub fn effective_context(&self) -> usize {
        self.used_rows.len()
    }
}

/// Covariates of each coarser level: the covariates of every patch's last
/// element.
fn level_covariates(base: DenseArray, w: usize, levels: usize) -> Vec<DenseArray> {
    let mut out = vec![base];
    for _ in 0..levels {
        let prev = out.last().expect("non-empty");
        let n = prev.rows() / w;
        let mut next = DenseArray::zeros(n, prev.cols());
        for p in 0..n {
            next.row_mut(p).copy_from_slice(prev.row(p * w + w - 1));
        }
        out.push(next);
    }
    out
}

fn gather_rows(a: &DenseArray, rows: &[usize]) -> DenseArray {
    let mut out = DenseArray::zeros(rows.len(), a.cols());
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(k).copy_from_slice(a.row(r));
    }
    out
}

fn stack<'a>(parts: impl IntoIterator<Item = &'a DenseArray>) -> Result<DenseArray> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for p in parts {
        if *cols.get_or_insert(p.cols()) != p.cols() {
            return Err(UfoError::Internal("stacking arrays of different widths".into()));
        }
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    DenseArray::from_vec(rows, cols.unwrap_or(0), data)
}

/// Attention nodes of one forward pass, tagged by stack and level.
pub(crate) type SiteLog = Vec<(&'static str, usize, Vec<AttentionSite>)>;

impl Model {
    /// Validates a window against the configuration and builds its grids.
    pub fn prepare(&self, window: &TimeSeriesWindow) -> Result<PreparedWindow> {
        self.prepare_with(window, true)
    }

    /// `seed_check` rejects contexts with fewer top-level positions than
    /// the horizon needs; encoding alone does not need them.
    fn prepare_with(&self, window: &TimeSeriesWindow, seed_check: bool) -> Result<PreparedWindow> {
        let cfg = &self.config;
        if window.channels() != cfg.channels || window.context_values.cols() != cfg.channels {
            return Err(UfoError::invalid(format!(
                "window has {} channels, model expects {}",
                window.channels(),
                cfg.channels
            )));
        }
        if window.context_len() < cfg.context {
            return Err(UfoError::Config(format!(
                "context of {} rows is shorter than the configured {}",
                window.context_len(),
                cfg.context
            )));
        }
        if window.horizon_len() != cfg.horizon {
            return Err(UfoError::invalid(format!(
                "horizon of {} steps, model expects {}",
                window.horizon_len(),
                cfg.horizon
            )));
        }
        let start = window.context_len() - cfg.context;
        let stats = RevinStats::from_rows(
            &gather_rows(&window.context_values, &(start..window.context_len()).collect::<Vec<_>>()),
            &window.context_mask[start..],
        )?;
        let mask: Vec<bool> = match cfg.resampler.context_mode() {
            ContextMode::Observed => window.context_mask[start..].to_vec(),
            ContextMode::Regular => vec![true; cfg.context],
        };
        let times = &window.context_times[start..];
        let enc_grids = build_level_grids(times, &mask, cfg.patch_len, cfg.levels)?;
        let kept = enc_grids[0].fine_times().len();
        let candidates: Vec<usize> = (start..window.context_len()).filter(|&i| mask[i - start]).collect();
        let used_rows = candidates[candidates.len() - kept..].to_vec();
        let top = kept / cfg.block_len();
        if seed_check && cfg.horizon / cfg.block_len() > top {
            return Err(UfoError::Config(format!(
                "{kept} usable context rows give {top} top-level positions, fewer than the horizon's {}",
                cfg.horizon / cfg.block_len()
            )));
        }
        let inputs = stats.normalize(&gather_rows(&window.context_values, &used_rows));
        let enc_covariates = level_covariates(
            gather_rows(&window.context_covariates, &used_rows),
            cfg.patch_len,
            cfg.levels,
        );
        let dec_grids = build_level_grids(&window.horizon_times, &vec![true; cfg.horizon], cfg.patch_len, cfg.levels)?;
        let dec_covariates = level_covariates(window.horizon_covariates.clone(), cfg.patch_len, cfg.levels);
        Ok(PreparedWindow {
            stats,
            used_rows,
            inputs,
            enc_grids,
            enc_covariates,
            dec_grids,
            dec_covariates,
            truth: window.horizon_values.clone(),
            horizon_timestamps: window.horizon_timestamps.clone(),
        })
    }

    fn downsample(&self, tape: &mut Tape, bound: &Bound, m: usize, x: Var, batch: &[&PreparedWindow]) -> Result<Var> {
        let w = self.config.patch_len;
        match self.layout.down[m] {
            Resampler::NcdeDown(p) => {
                let sets = batch
                    .iter()
                    .map(|pw| PatchSet::from_grid(&pw.enc_grids[m], &pw.enc_covariates[m]))
                    .collect::<Result<Vec<_>>>()?;
                downsample_tape(tape, x, &PatchSet::concat(&sets)?, &p, bound, &self.config.solver)
            }
            Resampler::ConvDown(p) => p.apply(tape, bound, x, w),
            Resampler::Gru(p) => p.down(tape, bound, x, w, self.config.hidden),
            _ => Err(UfoError::Internal("upsampler registered as a downsampler".into())),
        }
    }

    fn upsample(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        m: usize,
        y: Var,
        batch: &[&PreparedWindow],
        samples: usize,
    ) -> Result<Var> {
        let w = self.config.patch_len;
        let repeated = || batch.iter().flat_map(|pw| std::iter::repeat(*pw).take(samples));
        match self.layout.up[m] {
            Resampler::NcdeUp(p) => {
                let sets = repeated()
                    .map(|pw| PatchSet::from_grid(&pw.dec_grids[m], &pw.dec_covariates[m]))
                    .collect::<Result<Vec<_>>>()?;
                upsample_tape(tape, y, &PatchSet::concat(&sets)?, &p, bound, &self.config.solver)
            }
            Resampler::ConvUp(p) => p.apply(tape, bound, y, w),
            Resampler::Gru(p) => {
                let cov = stack(repeated().map(|pw| &pw.dec_covariates[m]))?;
                p.up(tape, y, bound, &cov, w)
            }
            _ => Err(UfoError::Internal("downsampler registered as an upsampler".into())),
        }
    }

    /// Encoder hierarchy and latent parameters for a batch whose normalized
    /// inputs are stacked in `x_norm`.
    fn encode_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x_norm: Var,
        batch: &[&PreparedWindow],
        mut sites: Option<&mut SiteLog>,
    ) -> Result<(Vec<Var>, Vec<Var>, Var, Var)> {
        let l = &self.layout;
        let groups = batch.len();
        let x = tape.matmul(x_norm, bound.var(l.input.weight));
        let mut x = tape.add_row(x, bound.var(l.input.bias));
        let mut levels = vec![x];
        let mut skips = Vec::with_capacity(self.config.levels);
        for m in 0..self.config.levels {
            let refined = if m == 0 {
                x
            } else {
                let mut s = Vec::new();
                let r = encoder_refine_tape(
                    tape,
                    x,
                    groups,
                    &l.enc_refiners[m - 1],
                    bound,
                    sites.is_some().then_some(&mut s),
                )?;
                if let Some(log) = sites.as_deref_mut() {
                    log.push(("encoder", m, s));
                }
                r
            };
            skips.push(match self.config.skip {
                SkipSource::PostRefiner => refined,
                SkipSource::PreRefiner => x,
            });
            let input = if m == 0 { refined } else { tape.row_norm(refined, NORM_EPS) };
            x = self.downsample(tape, bound, m, input, batch)?;
            levels.push(x);
        }
        let n = tape.row_norm(x, NORM_EPS);
        let n = tape.mul_row(n, bound.var(l.top_gain));
        let n = tape.add_row(n, bound.var(l.top_bias));
        let mu = tape.matmul(n, bound.var(l.mu.weight));
        let mu = tape.add_row(mu, bound.var(l.mu.bias));
        let s = tape.matmul(n, bound.var(l.sigma.weight));
        let s = tape.add_row(s, bound.var(l.sigma.bias));
        let s = tape.softplus(s);
        let sigma = tape.add_scalar(s, SIGMA_FLOOR);
        Ok((levels, skips, mu, sigma))
    }

    /// Decoder hierarchy from `B·S·L_M` stacked latent rows down to level 0.
    #[allow(clippy::too_many_arguments)]
    fn decode_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        latent: Var,
        skips: &[Var],
        batch: &[&PreparedWindow],
        samples: usize,
        mut sites: Option<&mut SiteLog>,
    ) -> Result<Var> {
        let levels = self.config.levels;
        let groups = batch.len() * samples;
        let mut y = latent;
        for m in (0..levels).rev() {
            let input = if m + 1 < levels { tape.row_norm(y, NORM_EPS) } else { y };
            let up = self.upsample(tape, bound, m, input, batch, samples)?;
            y = if m == 0 {
                up
            } else {
                let mut s = Vec::new();
                let r = decoder_refine_tape(
                    tape,
                    up,
                    groups,
                    skips[m],
                    batch.len(),
                    &self.layout.dec_refiners[m - 1],
                    bound,
                    sites.is_some().then_some(&mut s),
                )?;
                if let Some(log) = sites.as_deref_mut() {
                    log.push(("decoder", m, s));
                }
                r
            };
        }
        Ok(y)
    }

    /// Full forward pass returning the `B·S·L × d_x` sampled paths in data
    /// units. `eps` holds the standard-normal draws, one `L_M × d` block per
    /// (window, sample) in decoder group order.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x_norm: Var,
        batch: &[&PreparedWindow],
        samples: usize,
        eps: &DenseArray,
        mut sites: Option<&mut SiteLog>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let t_eff = batch[0].effective_context();
        if batch.iter().any(|pw| pw.effective_context() != t_eff) {
            return Err(UfoError::Internal("batched windows differ in effective context".into()));
        }
        let top = t_eff / cfg.block_len();
        let lm = cfg.horizon / cfg.block_len();
        if eps.shape() != (batch.len() * samples * lm, cfg.hidden) {
            return Err(UfoError::invalid("latent noise has the wrong shape"));
        }
        let (_, skips, mu, sigma) = self.encode_tape(tape, bound, x_norm, batch, sites.as_deref_mut())?;
        let mut rows = Vec::with_capacity(eps.rows());
        for b in 0..batch.len() {
            for _ in 0..samples {
                rows.extend((top - lm..top).map(|i| b * top + i));
            }
        }
        let plan = Arc::new(RowMixPlan::gather(&rows));
        let mu_g = tape.row_mix(mu, plan.clone());
        let sigma_g = tape.row_mix(sigma, plan);
        let noise = tape.constant(eps.clone());
        let spread = tape.mul(sigma_g, noise);
        let latent = tape.add(mu_g, spread);
        let y0 = self.decode_tape(tape, bound, latent, &skips, batch, samples, sites)?;
        let out = tape.matmul(y0, bound.var(self.layout.output.weight));
        let out = tape.add_row(out, bound.var(self.layout.output.bias));
        let (scale, shift) = self.denorm_arrays(batch, samples);
        let scale = tape.constant(scale);
        let shift = tape.constant(shift);
        let out = tape.mul(out, scale);
        Ok(tape.add(out, shift))
    }

    fn denorm_arrays(&self, batch: &[&PreparedWindow], samples: usize) -> (DenseArray, DenseArray) {
        let (l, dx) = (self.config.horizon, self.config.channels);
        let rows = batch.len() * samples * l;
        let mut scale = DenseArray::zeros(rows, dx);
        let mut shift = DenseArray::zeros(rows, dx);
        for (b, pw) in batch.iter().enumerate() {
            for r in b * samples * l..(b + 1) * samples * l {
                scale.row_mut(r).copy_from_slice(&pw.stats.scale);
                shift.row_mut(r).copy_from_slice(&pw.stats.mean);
            }
        }
        (scale, shift)
    }

    pub(crate) fn stacked_inputs(batch: &[&PreparedWindow]) -> Result<DenseArray> {
        stack(batch.iter().map(|pw| &pw.inputs))
    }

    /// Number of latent rows per sample.
    pub fn latent_len(&self) -> usize {
        self.config.horizon / self.config.block_len()
    }

    /// Encoder features and latent parameters of one window.
    pub fn encode(&self, window: &TimeSeriesWindow) -> Result<(EncoderStack, LatentGaussian)> {
        let pw = self.prepare_with(window, false)?;
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let x = tape.constant(pw.inputs.clone());
        let (levels, skips, mu, sigma) = self.encode_tape(&mut tape, &bound, x, &[&pw], None)?;
        let mut seqs = Vec::with_capacity(levels.len());
        for (m, v) in levels.iter().enumerate() {
            let times = if m == 0 {
                pw.enc_grids[0].fine_times().to_vec()
            } else {
                pw.enc_grids[m - 1].coarse_times().to_vec()
            };
            seqs.push(LevelSequence::new(times, tape.value(*v).clone(), pw.enc_covariates[m].clone())?);
        }
        Ok((
            EncoderStack {
                levels: seqs,
                skips: skips.iter().map(|v| tape.value(*v).clone()).collect(),
                grids: pw.enc_grids,
                used_rows: pw.used_rows,
            },
            LatentGaussian {
                mu: tape.value(mu).clone(),
                sigma: tape.value(sigma).clone(),
            },
        ))
    }

    /// Decodes one latent sample (`L_M × d`) to the level-0 horizon
    /// embeddings (`L × d`).
    pub fn decode(&self, latent: &DenseArray, stack: &EncoderStack, window: &PreparedWindow) -> Result<DenseArray> {
        if latent.shape() != (self.latent_len(), self.config.hidden) {
            return Err(UfoError::invalid(format!(
                "latent of shape {:?}, expected {}x{}",
                latent.shape(),
                self.latent_len(),
                self.config.hidden
            )));
        }
        if stack.skips.len() != self.config.levels {
            return Err(UfoError::invalid("encoder stack depth does not match the model"));
        }
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let skips: Vec<Var> = stack.skips.iter().map(|s| tape.constant(s.clone())).collect();
        let y = tape.constant(latent.clone());
        let out = self.decode_tape(&mut tape, &bound, y, &skips, &[window], 1, None)?;
        Ok(tape.value(out).clone())
    }

    /// `n` sampled paths for one window, deterministic in `seed`.
    pub fn forecast(&self, window: &TimeSeriesWindow, n: usize, seed: u64) -> Result<ForecastEnsemble> {
        let pw = self.prepare(window)?;
        self.forecast_prepared(&pw, n, seed)
    }

    pub fn forecast_prepared(&self, pw: &PreparedWindow, n: usize, seed: u64) -> Result<ForecastEnsemble> {
        if n == 0 {
            return Err(UfoError::invalid("need at least one sample"));
        }
        let (lm, d, l) = (self.latent_len(), self.config.hidden, self.config.horizon);
        let eps = seeded_normal(n * lm, d, "latent", seed);
        let mut samples = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let count = SAMPLE_CHUNK.min(n - start);
            let chunk = DenseArray::from_vec(
                count * lm,
                d,
                eps.data()[start * lm * d..(start + count) * lm * d].to_vec(),
            )?;
            let mut tape = Tape::new();
            let bound = self.store.bind_frozen(&mut tape);
            let x = tape.constant(pw.inputs.clone());
            let fw = self.forward_tape(&mut tape, &bound, x, &[pw], count, &chunk, None)?;
            let out = tape.value(fw);
            if !out.is_finite() {
                return Err(UfoError::NumericFailure("forecast produced non-finite values".into()));
            }
            for s in 0..count {
                samples.push(DenseArray::from_vec(l, out.cols(), out.data()[s * l * out.cols()..(s + 1) * l * out.cols()].to_vec())?);
            }
            start += count;
        }
        Ok(ForecastEnsemble {
            samples,
            timestamps: pw.horizon_timestamps.clone(),
            stats: pw.stats.clone(),
        })
    }

    /// One sampled path (`L × d_x`) per window, in input order. Windows are
    /// grouped by effective context and each group draws its latent noise
    /// from stream `"latent"` under `seed` plus the group's rank.
    pub fn sample_batch(&self, batch: &[&PreparedWindow], seed: u64) -> Result<Vec<DenseArray>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, pw) in batch.iter().enumerate() {
            groups.entry(pw.effective_context()).or_default().push(i);
        }
        let (lm, d, l) = (self.latent_len(), self.config.hidden, self.config.horizon);
        let mut out = vec![DenseArray::zeros(0, 0); batch.len()];
        for (k, idx) in groups.values().enumerate() {
            let group: Vec<&PreparedWindow> = idx.iter().map(|&i| batch[i]).collect();
            let eps = seeded_normal(group.len() * lm, d, "latent", seed.wrapping_add(k as u64));
            let mut tape = Tape::new();
            let bound = self.store.bind_frozen(&mut tape);
            let x = tape.constant(Self::stacked_inputs(&group)?);
            let fw = self.forward_tape(&mut tape, &bound, x, &group, 1, &eps, None)?;
            let all = tape.value(fw);
            let dx = all.cols();
            for (j, &i) in idx.iter().enumerate() {
                out[i] = DenseArray::from_vec(l, dx, all.data()[j * l * dx..(j + 1) * l * dx].to_vec())?;
            }
        }
        Ok(out)
    }

    /// Every attention matrix of one single-sample forward pass.
    pub fn export_attention(&self, window: &TimeSeriesWindow, seed: u64) -> Result<Vec<AttentionRecord>> {
        let pw = self.prepare(window)?;
        let eps = seeded_normal(self.latent_len(), self.config.hidden, "latent", seed);
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let x = tape.constant(pw.inputs.clone());
        let mut log = SiteLog::new();
        self.forward_tape(&mut tape, &bound, x, &[&pw], 1, &eps, Some(&mut log))?;
        let mut out = Vec::new();
        for (stack, level, sites) in &log {
            out.extend(collect_attention(&tape, stack, *level, sites, 1)?);
        }
        Ok(out)
    }

    /// Gradient of the summed mean forecast (latent noise at zero) with
    /// respect to the raw context values of the window: `T × d_x`, zero at
    /// rows the model does not read. Normalization statistics are held
    /// constant.
    pub fn mean_forecast_gradient(&self, window: &TimeSeriesWindow) -> Result<DenseArray> {
        let pw = self.prepare(window)?;
        let start = window.context_len() - self.config.context;
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let raw = tape.param(window.context_values.clone());
        let picked = tape.row_mix(raw, Arc::new(RowMixPlan::gather(&pw.used_rows)));
        let rows = pw.used_rows.len();
        let mut shift = DenseArray::zeros(rows, self.config.channels);
        let mut inv = DenseArray::zeros(rows, self.config.channels);
        for r in 0..rows {
            shift.row_mut(r).copy_from_slice(&pw.stats.mean);
            for (o, s) in inv.row_mut(r).iter_mut().zip(&pw.stats.scale) {
                *o = 1.0 / s;
            }
        }
        let shift = tape.constant(shift);
        let inv = tape.constant(inv);
        let centred = tape.sub(picked, shift);
        let x = tape.mul(centred, inv);
        let eps = DenseArray::zeros(self.latent_len(), self.config.hidden);
        let fw = self.forward_tape(&mut tape, &bound, x, &[&pw], 1, &eps, None)?;
        let total = tape.sum(fw);
        let grads = tape.backward(total)?;
        let g = grads.wrt(raw);
        Ok(gather_rows(&g, &(start..window.context_len()).collect::<Vec<_>>()))
    }

    /// Level-1 patch embeddings `x^(1)` of one window, with the context row
    /// indices each patch covers.
    pub fn patch_embeddings(&self, window: &TimeSeriesWindow) -> Result<(DenseArray, Vec<Vec<usize>>)> {
        let (stack, _) = self.encode(window)?;
        let w = self.config.patch_len;
        let spans = stack.used_rows.chunks(w).map(<[usize]>::to_vec).collect();
        Ok((stack.levels[1].values.clone(), spans))
    }
}

/// Groups prepared windows by effective context length, keeping order
/// within each group.
pub(crate) fn group_by_context<'a>(windows: &[&'a PreparedWindow]) -> Vec<Vec<&'a PreparedWindow>> {
    let mut groups: BTreeMap<usize, Vec<&PreparedWindow>> = BTreeMap::new();
    for pw in windows {
        groups.entry(pw.effective_context()).or_default().push(pw);
    }
    groups.into_values().collect()
}
