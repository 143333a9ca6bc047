//! Diagnostic studies on trained models: per-position input sensitivity,
//! gap CV per hierarchy level, a linear probe for irregularity in patch
//! embeddings, and inference timing.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cde::{downsample_tape, NcdeDownParams, PatchSet, SolverConfig};
use crate::data::{build_level_grids, gap_cv, time_covariates, Dataset, TimeSeriesWindow};
use crate::error::{Result, UfoError};
use crate::interp::smoothing_weights;
use crate::model::{Model, PreparedWindow};
use crate::tensorops::{seeded_normal, sigmoid, stream, swish, DenseArray, ParamStore, Tape};

/// Environment variable capping the worker count of parallel studies.
pub const THREADS_ENV: &str = "UFO_THREADS";

/// Workers to use: `UFO_THREADS` when set to a positive integer, otherwise
/// the rayon default.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| UfoError::Internal(format!("thread pool: {e}")))
}

/// Anything that can report the gradient of its summed deterministic
/// forecast with respect to each raw context row.
pub trait InputSensitivity {
    /// `T × d_x` gradient for one window.
    fn input_gradient(&self, window: &TimeSeriesWindow) -> Result<DenseArray>;
}

impl InputSensitivity for Model {
    fn input_gradient(&self, window: &TimeSeriesWindow) -> Result<DenseArray> {
        self.mean_forecast_gradient(window)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// Mean gradient norm per context position, oldest first.
    pub norms: Vec<f64>,
    /// R² of a least-squares line through `(position, ln norm)` over the
    /// positions with a non-zero norm.
    pub r_squared: f64,
    pub zero_positions: Vec<usize>,
    pub windows: usize,
}

/// Coefficient of determination of the least-squares line through
/// `(x, y)`; `0` when `y` has no spread.
pub fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
}

pub fn sensitivity<M: InputSensitivity + ?Sized>(model: &M, windows: &[TimeSeriesWindow]) -> Result<SensitivityReport> {
    if windows.is_empty() {
        return Err(UfoError::invalid("no windows for the sensitivity study"));
    }
    let mut norms: Vec<f64> = Vec::new();
    for w in windows {
        let g = model.input_gradient(w)?;
        if norms.is_empty() {
            norms = vec![0.0; g.rows()];
        } else if g.rows() != norms.len() {
            return Err(UfoError::invalid("windows must share the context length"));
        }
        for (i, n) in norms.iter_mut().enumerate() {
            *n += g.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        }
    }
    for n in &mut norms {
        *n /= windows.len() as f64;
    }
    if !norms.iter().all(|n| n.is_finite()) {
        return Err(UfoError::NumericFailure("non-finite input gradient".into()));
    }
    let zero_positions: Vec<usize> = (0..norms.len()).filter(|&i| norms[i] == 0.0).collect();
    if zero_positions.len() == norms.len() {
        return Err(UfoError::DegenerateModel("every input position has a zero gradient".into()));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = norms
        .iter()
        .enumerate()
        .filter(|(_, n)| **n > 0.0)
        .map(|(i, n)| (i as f64, n.ln()))
        .unzip();
    Ok(SensitivityReport {
        r_squared: r_squared(&xs, &ys),
        norms,
        zero_positions,
        windows: windows.len(),
    })
}

/// Gap CV of each level's times, level 0 (the surviving observations after
/// truncation) through `levels`.
pub fn level_cvs(times: &[f64], observed: &[bool], w: usize, levels: usize) -> Result<Vec<f64>> {
    let grids = build_level_grids(times, observed, w, levels)?;
    let mut out = vec![gap_cv(grids[0].fine_times())?];
    for g in &grids {
        out.push(gap_cv(g.coarse_times())?);
    }
    Ok(out)
}

/// [`level_cvs`] over the rows of a dataset, a row counting as observed
/// when any channel is.
pub fn cv_study(ds: &Dataset, w: usize, levels: usize) -> Result<Vec<f64>> {
    let origin = *ds.timestamps.first().ok_or_else(|| UfoError::invalid("empty dataset"))?;
    let times: Vec<f64> = (0..ds.len()).map(|i| ds.step_time(i, origin)).collect();
    let observed: Vec<bool> = (0..ds.len()).map(|i| ds.row_observed(i)).collect();
    level_cvs(&times, &observed, w, levels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Fraction of each class held out for scoring.
    pub holdout: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.1,
            l2: 1e-4,
            holdout: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// F1 of the positive (irregular) class on the held-out split.
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub positives: usize,
    pub negatives: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub weight_norm: f64,
    pub bias: f64,
}

/// Fits a class-balanced, ℓ2-penalized logistic regression by full-batch
/// gradient descent on standardized features and scores it on a stratified
/// held-out split drawn from stream `"probe-split"`.
pub fn fit_probe(features: &DenseArray, labels: &[bool], seed: u64, cfg: &ProbeConfig) -> Result<ProbeReport> {
    if features.rows() != labels.len() {
        return Err(UfoError::invalid("one label per feature row is required"));
    }
    if !(cfg.holdout > 0.0 && cfg.holdout < 1.0) {
        return Err(UfoError::Config("probe holdout must lie in (0, 1)".into()));
    }
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let (positives, negatives) = (pos.len(), neg.len());
    let mut rng = stream("probe-split", seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    if positives < 2 || negatives < 2 {
        return Err(UfoError::DegenerateProbe(format!(
            "{positives} positive and {negatives} negative patches; both classes are needed in each split"
        )));
    }
    let cut = |n: usize| ((n as f64 * cfg.holdout).round() as usize).clamp(1, n - 1);
    let (kp, kn) = (cut(pos.len()), cut(neg.len()));
    let test: Vec<usize> = pos[..kp].iter().chain(&neg[..kn]).copied().collect();
    let train: Vec<usize> = pos[kp..].iter().chain(&neg[kn..]).copied().collect();
    let (train_pos, train_neg) = (pos.len() - kp, neg.len() - kn);

    let d = features.cols();
    let mut mean = vec![0.0; d];
    for &i in &train {
        for (m, x) in mean.iter_mut().zip(features.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut sd = vec![0.0; d];
    for &i in &train {
        for ((s, x), m) in sd.iter_mut().zip(features.row(i)).zip(&mean) {
            *s += (x - m).powi(2);
        }
    }
    for s in &mut sd {
        *s = (*s / train.len() as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let standard = |i: usize| -> Vec<f64> {
        features.row(i).iter().zip(&mean).zip(&sd).map(|((x, m), s)| (x - m) / s).collect()
    };
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| standard(i)).collect();
    let n = train.len() as f64;
    let (cw_pos, cw_neg) = (n / (2.0 * train_pos as f64), n / (2.0 * train_neg as f64));

    let mut weights = vec![0.0; d];
    let mut bias = 0.0;
    for _ in 0..cfg.iterations {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &i) in xs.iter().zip(&train) {
            let z = bias + x.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>();
            let (y, c) = if labels[i] { (1.0, cw_pos) } else { (0.0, cw_neg) };
            let r = c * (sigmoid(z) - y);
            for (g, a) in gw.iter_mut().zip(x) {
                *g += r * a;
            }
            gb += r;
        }
        for (w, g) in weights.iter_mut().zip(&gw) {
            *w -= cfg.learning_rate * (g / n + cfg.l2 * *w);
        }
        bias -= cfg.learning_rate * gb / n;
    }

    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for &i in &test {
        let x = standard(i);
        let z = bias + x.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>();
        match (z >= 0.0, labels[i]) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ProbeReport {
        f1: ratio(2 * tp, 2 * tp + fp + fneg),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
        positives,
        negatives,
        train_size: train.len(),
        test_size: test.len(),
        weight_norm: weights.iter().map(|w| w * w).sum::<f64>().sqrt(),
        bias,
    })
}

/// Level-1 patch embeddings of every window with their irregularity labels.
///
/// A patch is irregular when a calendar slot inside it was missing. With
/// observed-time contexts that shows up as a span longer than `w − 1`
/// sampling intervals; with regular contexts as a masked row.
pub fn probe_dataset(model: &Model, windows: &[TimeSeriesWindow]) -> Result<(DenseArray, Vec<bool>)> {
    let w = model.config().patch_len;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for win in windows {
        let (emb, spans) = model.patch_embeddings(win)?;
        for (p, span) in spans.iter().enumerate() {
            let (a, b) = (span[0], span[span.len() - 1]);
            let stretched = win.context_times[b] - win.context_times[a] > (w - 1) as f64 + 1e-9;
            let label = stretched || span.iter().any(|&i| !win.context_mask[i]);
            labels.push(label);
            rows.push(emb.row(p).to_vec());
        }
    }
    if rows.is_empty() {
        return Err(UfoError::DegenerateProbe("no patches to probe".into()));
    }
    Ok((DenseArray::from_rows(&rows)?, labels))
}

pub fn irregularity_probe(model: &Model, windows: &[TimeSeriesWindow], seed: u64) -> Result<ProbeReport> {
    let (features, labels) = probe_dataset(model, windows)?;
    fit_probe(&features, &labels, seed, &ProbeConfig::default())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// Wall-clock seconds of each measured batch (warm-up excluded).
    pub per_batch: Vec<f64>,
    pub seconds_per_batch: f64,
    pub seconds_per_sequence: f64,
    pub batch_size: usize,
    pub threads: usize,
}

/// Times single-sample forward passes over `batches` batches of
/// `batch_size` windows after one warm-up batch. Windows are reused
/// cyclically; each batch is split evenly across `threads` workers.
pub fn timing(
    model: &Model,
    windows: &[PreparedWindow],
    batches: usize,
    batch_size: usize,
    threads: usize,
) -> Result<TimingReport> {
    if windows.is_empty() || batches == 0 || batch_size == 0 {
        return Err(UfoError::invalid("timing needs windows, batches and a batch size"));
    }
    let pool = pool(threads)?;
    let chunk = batch_size.div_ceil(threads.max(1));
    let mut per_batch = Vec::with_capacity(batches);
    for b in 0..=batches {
        let batch: Vec<&PreparedWindow> = (0..batch_size)
            .map(|i| &windows[(b * batch_size + i) % windows.len()])
            .collect();
        let start = Instant::now();
        pool.install(|| {
            batch
                .par_chunks(chunk)
                .map(|part| model.sample_batch(part, b as u64).map(|_| ()))
                .collect::<Result<Vec<()>>>()
        })?;
        let secs = start.elapsed().as_secs_f64();
        if b > 0 {
            per_batch.push(secs.max(f64::MIN_POSITIVE));
        }
    }
    let mean = per_batch.iter().sum::<f64>() / batches as f64;
    Ok(TimingReport {
        per_batch,
        seconds_per_batch: mean,
        seconds_per_sequence: mean / batch_size as f64,
        batch_size,
        threads,
    })
}

/// Level-0 inputs of one timing sequence: embeddings, times, covariates.
#[derive(Clone, Debug)]
pub struct TimingInput {
    pub values: DenseArray,
    pub times: Vec<f64>,
    pub covariates: DenseArray,
}

/// `batch` seeded sequences of `length` hourly steps and width `d`.
pub fn timing_inputs(batch: usize, length: usize, d: usize, seed: u64) -> Vec<TimingInput> {
    let stamps: Vec<i64> = (0..length as i64).map(|k| k * 3600).collect();
    let covariates = time_covariates(&stamps).values;
    (0..batch)
        .map(|b| TimingInput {
            values: seeded_normal(length, d, "timing-input", seed.wrapping_add(b as u64)),
            times: (0..length).map(|k| k as f64).collect(),
            covariates: covariates.clone(),
        })
        .collect()
}

/// Terminal state of every patch. Each task integrates the patches of
/// `chunk` sequences in lockstep on its own tape.
pub fn patched_downsample(
    store: &ParamStore,
    params: &NcdeDownParams,
    solver: &SolverConfig,
    inputs: &[TimingInput],
    w: usize,
    chunk: usize,
    threads: usize,
) -> Result<Vec<DenseArray>> {
    let parts = pool(threads)?.install(|| {
        inputs
            .par_chunks(chunk.max(1))
            .map(|part| {
                let sets = part
                    .iter()
                    .map(|s| PatchSet::new(w, s.times.clone(), s.covariates.clone()))
                    .collect::<Result<Vec<_>>>()?;
                let values: Vec<f64> = part.iter().flat_map(|s| s.values.data().iter().copied()).collect();
                let d = part[0].values.cols();
                let mut tape = Tape::new();
                let bound = store.bind_frozen(&mut tape);
                let x = tape.constant(DenseArray::from_vec(values.len() / d, d, values)?);
                let out = downsample_tape(&mut tape, x, &PatchSet::concat(&sets)?, params, &bound, solver)?;
                let out = tape.value(out);
                let per = out.rows() / part.len();
                part.iter()
                    .enumerate()
                    .map(|(k, _)| {
                        DenseArray::from_vec(per, out.cols(), out.data()[k * per * out.cols()..(k + 1) * per * out.cols()].to_vec())
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// Dense row-vector SwiGLU field with weights laid out for contiguous
/// accumulation.
struct SequentialField {
    gate: DenseArray,
    value: DenseArray,
    output: DenseArray,
    init_weight: DenseArray,
    init_bias: Vec<f64>,
}

impl SequentialField {
    fn new(store: &ParamStore, params: &NcdeDownParams) -> Self {
        let f = params.field.values(store);
        Self {
            gate: f.gate,
            value: f.value,
            output: f.output,
            init_weight: store.get(params.init_weight).clone(),
            init_bias: store.get(params.init_bias).row(0).to_vec(),
        }
    }

    fn eval(&self, u: &[f64], out: &mut [f64]) {
        let hidden = self.gate.cols();
        let mut g = vec![0.0; hidden];
        let mut v = vec![0.0; hidden];
        for (i, ui) in u.iter().enumerate() {
            for ((gj, vj), (a, b)) in g.iter_mut().zip(v.iter_mut()).zip(self.gate.row(i).iter().zip(self.value.row(i))) {
                *gj += ui * a;
                *vj += ui * b;
            }
        }
        out.fill(0.0);
        for (j, (gj, vj)) in g.iter().zip(&v).enumerate() {
            let h = swish(*gj) * vj;
            for (o, w) in out.iter_mut().zip(self.output.row(j)) {
                *o += h * w;
            }
        }
    }
}

/// Reference integrator: one trajectory across the whole sequence with
/// `steps` uniform RK4 steps. The control at time `t` is the smoother over
/// the `control_len` consecutive observations whose block contains `t`, so
/// a step costs the same as in the patched path.
pub fn sequential_downsample(
    store: &ParamStore,
    params: &NcdeDownParams,
    solver: &SolverConfig,
    input: &TimingInput,
    control_len: usize,
    steps: usize,
) -> Result<Vec<f64>> {
    let n = input.times.len();
    if control_len == 0 || n < control_len || steps == 0 {
        return Err(UfoError::invalid("sequential reference needs a control block and steps"));
    }
    let field = SequentialField::new(store, params);
    let (c, din) = (input.covariates.cols(), input.values.cols());
    let d = field.output.cols();
    let times = &input.times;
    let control = |t: f64, u: &mut Vec<f64>| {
        let k = times.partition_point(|&s| s <= t).saturating_sub(1);
        let start = (k / control_len * control_len).min(n - control_len);
        let wts = smoothing_weights(&times[start..start + control_len], t, &solver.kernel);
        u.clear();
        u.resize(c + din, 0.0);
        for (i, wi) in wts.iter().enumerate() {
            for (o, x) in u[..c].iter_mut().zip(input.covariates.row(start + i)) {
                *o += wi * x;
            }
            for (o, x) in u[c..].iter_mut().zip(input.values.row(start + i)) {
                *o += wi * x;
            }
        }
    };
    let mut u = Vec::with_capacity(c + din + d);
    control(times[0], &mut u);
    let mut z: Vec<f64> = field.init_bias.clone();
    for (i, xi) in u[c..].iter().enumerate() {
        for (o, w) in z.iter_mut().zip(field.init_weight.row(i)) {
            *o += xi * w;
        }
    }
    z.iter_mut().for_each(|x| *x = swish(*x));

    let h = (times[n - 1] - times[0]) / steps as f64;
    let mut ks = vec![vec![0.0; d]; 4];
    let mut zs = vec![0.0; d];
    let eval = |t: f64, state: &[f64], out: &mut [f64], u: &mut Vec<f64>| {
        control(t, u);
        u.extend_from_slice(state);
        field.eval(u, out);
    };
    for s in 0..steps {
        let t = times[0] + s as f64 * h;
        let [k1, k2, k3, k4] = &mut ks[..] else { unreachable!() };
        eval(t, &z, k1, &mut u);
        for i in 0..d {
            zs[i] = z[i] + 0.5 * h * k1[i];
        }
        eval(t + 0.5 * h, &zs, k2, &mut u);
        for i in 0..d {
            zs[i] = z[i] + 0.5 * h * k2[i];
        }
        eval(t + 0.5 * h, &zs, k3, &mut u);
        for i in 0..d {
            zs[i] = z[i] + h * k3[i];
        }
        eval(t + h, &zs, k4, &mut u);
        for i in 0..d {
            z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(UfoError::IntegrationDiverged { time: t + h });
        }
    }
    Ok(z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub patched_seconds: f64,
    pub sequential_seconds: f64,
    /// `sequential_seconds / patched_seconds`
    pub speedup: f64,
    pub rk4_steps_per_sequence: usize,
    pub batch: usize,
    pub length: usize,
    pub threads: usize,
}

/// Level-0 CDE downsampling of `batch` sequences of `length` steps, patched
/// and parallel versus the sequential single-trajectory reference, at the
/// same number of RK4 steps per sequence.
///
/// Cost depends only on shapes, so the field output is damped by
/// `1 / length`; otherwise an untrained field can blow up over the long
/// reference trajectory.
pub fn ncde_speedup(model: &Model, length: usize, batch: usize, threads: usize, seed: u64) -> Result<SpeedupReport> {
    let params = model
        .ncde_level0()
        .ok_or_else(|| UfoError::Config("the speedup study needs the ncde resampler".into()))?;
    let cfg = model.config();
    let w = cfg.patch_len;
    let length = length / w * w;
    if length < w || batch == 0 {
        return Err(UfoError::invalid("speedup study needs at least one patch and one sequence"));
    }
    let inputs = timing_inputs(batch, length, cfg.hidden, seed);
    let mut store = model.params().clone();
    store.get_mut(params.field.output).scale_assign(1.0 / length as f64);
    let store = &store;
    let steps = length / w * (w - 1) * cfg.solver.steps_per_interval;

    // warm-up outside the measured interval
    patched_downsample(store, &params, &cfg.solver, &inputs[..1], w, 1, threads)?;
    let start = Instant::now();
    patched_downsample(store, &params, &cfg.solver, &inputs, w, 1, threads)?;
    let patched_seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);

    let start = Instant::now();
    for input in &inputs {
        sequential_downsample(store, &params, &cfg.solver, input, w, steps)?;
    }
    let sequential_seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    Ok(SpeedupReport {
        patched_seconds,
        sequential_seconds,
        speedup: sequential_seconds / patched_seconds,
        rk4_steps_per_sequence: steps,
        batch,
        length,
        threads,
    })
}
