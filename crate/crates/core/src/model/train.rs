//! NCRPS training, evaluation and the persistence yardstick.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::forward::group_by_context;
use super::{Model, PreparedWindow};
use crate::data::TimeSeriesWindow;
use crate::error::{Result, UfoError};
use crate::scoring::{ncrps, ncrps_loss, persistence_forecast, ScoreReport};
use crate::tensorops::{check_gradients, seeded_normal, stream, Bound, DenseArray, GradCheckReport, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Adaptive-moment optimizer state, one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<DenseArray>,
    v: Vec<DenseArray>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.values().iter().map(|p| DenseArray::zeros(p.rows(), p.cols())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Clips `grads` to the configured global norm and applies one update.
    /// Returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut ParamStore, grads: &mut [DenseArray]) -> f64 {
        let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            let s = self.config.clip_norm / norm;
            for g in grads.iter_mut() {
                g.scale_assign(s);
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
            ..
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (k, p) in params.values_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            }
        }
        norm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds window shuffling and the training latent draws.
    pub seed: u64,
    /// Epochs without validation improvement before stopping; `0` never
    /// stops early.
    pub patience: usize,
    /// Samples per window when scoring the validation split.
    pub val_samples: usize,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            seed: 0,
            patience: 5,
            val_samples: 16,
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Pooled validation NCRPS; `NaN` without validation windows.
    pub val_ncrps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub steps: u64,
}

/// Standard-normal blocks for successive context groups of one batch.
fn latent_noise(seed: u64, d: usize) -> impl FnMut(usize) -> DenseArray {
    let mut draw = 0u64;
    move |rows| {
        draw += 1;
        seeded_normal(rows, d, "train-latent", seed.wrapping_add(draw << 32))
    }
}

impl Model {
    /// Mean NCRPS of `S = train_samples` decoded paths per window, given
    /// the stacked standard-normal draws of each context group.
    pub(crate) fn loss_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[&PreparedWindow],
        mut noise: impl FnMut(usize) -> DenseArray,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(UfoError::invalid("empty batch"));
        }
        let s = self.config.train_samples;
        let total = batch.len() as f64;
        let mut loss: Option<Var> = None;
        for group in group_by_context(batch) {
            let x = tape.constant(Self::stacked_inputs(&group)?);
            let eps = noise(group.len() * s * self.latent_len());
            let fw = self.forward_tape(tape, bound, x, &group, s, &eps, None)?;
            let mut truth = Vec::with_capacity(group.len() * self.config.horizon * self.config.channels);
            for pw in &group {
                truth.extend_from_slice(pw.truth.data());
            }
            let truth = DenseArray::from_vec(group.len() * self.config.horizon, self.config.channels, truth)?;
            let part = ncrps_loss(tape, fw, &truth, group.len(), s)?;
            let part = tape.scale(part, group.len() as f64 / total);
            loss = Some(match loss {
                Some(l) => tape.add(l, part),
                None => part,
            });
        }
        Ok(loss.expect("non-empty batch"))
    }

    /// Loss and parameter gradients for fixed latent draws.
    pub fn loss_and_gradients(&self, batch: &[&PreparedWindow], latent_seed: u64) -> Result<(f64, Vec<DenseArray>)> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let loss = self.loss_tape(&mut tape, &bound, batch, latent_noise(latent_seed, self.config.hidden))?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(UfoError::TrainingDiverged(format!("loss is {value}")));
        }
        let grads = tape.backward(loss)?;
        Ok((value, bound.gradients(&grads)))
    }

    /// Central-difference check of every parameter gradient of the
    /// training loss, with the latent draws of `latent_seed` held fixed.
    pub fn check_loss_gradients(&self, batch: &[&PreparedWindow], latent_seed: u64, step: f64) -> Result<GradCheckReport> {
        check_gradients(self.store.values(), step, |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            self.loss_tape(tape, &bound, batch, latent_noise(latent_seed, self.config.hidden))
        })
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    pub fn train_step(&mut self, batch: &[&PreparedWindow], opt: &mut Adam, latent_seed: u64) -> Result<f64> {
        let (loss, mut grads) = self.loss_and_gradients(batch, latent_seed)?;
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            return Err(UfoError::TrainingDiverged(format!(
                "non-finite gradient for '{}' at step {} (loss {loss})",
                self.store.iter().nth(k).map_or("?", |(name, _)| name),
                opt.steps()
            )));
        }
        opt.update(&mut self.store, &mut grads);
        if self.store.values().iter().any(|p| !p.is_finite()) {
            return Err(UfoError::TrainingDiverged(format!(
                "parameters became non-finite at step {}",
                opt.steps()
            )));
        }
        Ok(loss)
    }

    /// Pooled NCRPS of `n_samples`-member forecasts over `windows`.
    pub fn evaluate(&self, windows: &[PreparedWindow], n_samples: usize, seed: u64) -> Result<ScoreReport> {
        if windows.is_empty() {
            return Err(UfoError::invalid("no windows to evaluate"));
        }
        let reports = windows
            .iter()
            .enumerate()
            .map(|(i, pw)| {
                let ens = self.forecast_prepared(pw, n_samples, seed.wrapping_add(i as u64))?;
                ncrps(&ens.samples, &pw.truth)
            })
            .collect::<Result<Vec<_>>>()?;
        ScoreReport::pooled(&reports)
    }

    /// Trains with shuffled mini-batches, keeping the parameters of the
    /// epoch with the best validation score.
    pub fn fit(
        &mut self,
        train: &[PreparedWindow],
        val: &[PreparedWindow],
        cfg: &TrainConfig,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(UfoError::Config("no training windows".into()));
        }
        if cfg.batch_size == 0 || cfg.epochs == 0 {
            return Err(UfoError::Config("epochs and batch_size must be positive".into()));
        }
        let mut opt = Adam::new(cfg.optimizer, &self.store);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = stream("train-shuffle", cfg.seed);
        let mut best = (f64::INFINITY, 0usize, self.store.clone());
        let mut epochs = Vec::new();
        let mut since_best = 0;
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&PreparedWindow> = chunk.iter().map(|&i| &train[i]).collect();
                let seed = cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(opt.steps());
                sum += self.train_step(&batch, &mut opt, seed)?;
                batches += 1;
            }
            let val_ncrps = if val.is_empty() {
                f64::NAN
            } else {
                self.evaluate(val, cfg.val_samples, cfg.seed)?.aggregate
            };
            let record = EpochRecord {
                epoch,
                train_loss: sum / batches as f64,
                val_ncrps,
            };
            on_epoch(&record);
            epochs.push(record);
            // without validation the latest parameters are kept
            let score = if val.is_empty() { -(epoch as f64) } else { val_ncrps };
            if score < best.0 {
                best = (score, epoch, self.store.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience > 0 && since_best >= cfg.patience {
                    break;
                }
            }
        }
        let (best_val, best_epoch, store) = best;
        self.store = store;
        Ok(TrainReport {
            epochs,
            best_epoch,
            best_val: if val.is_empty() { f64::NAN } else { best_val },
            steps: opt.steps(),
        })
    }
}

/// Pooled NCRPS of the persistence forecast, scored as a one-member
/// ensemble.
pub fn persistence_score(windows: &[TimeSeriesWindow]) -> Result<ScoreReport> {
    if windows.is_empty() {
        return Err(UfoError::invalid("no windows to score"));
    }
    let reports = windows
        .iter()
        .map(|w| ncrps(&[persistence_forecast(&w.last_observed(), w.horizon_len())], &w.horizon_values))
        .collect::<Result<Vec<_>>>()?;
    ScoreReport::pooled(&reports)
}
