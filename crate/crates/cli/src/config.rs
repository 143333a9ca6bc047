//! Run configuration files (TOML).
//!
//! Relative paths are resolved against the directory of the config file.
//! Command-line flags override the fields they name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ufo_core::data::{
    inject_block_missing, load_csv, make_windows, split_ranges, synth_dataset, ContextMode, Dataset, SynthKind,
    SynthSpec, TimeSeriesWindow, WindowSpec,
};
use ufo_core::model::{AdamConfig, ModelConfig, TrainConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub irregularity: IrregularityConfig,
    pub seeds: Seeds,
}

/// Every random stream of a run. All fields are required.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Synthetic data generation.
    pub data: u64,
    /// Choice of removed days.
    pub injection: u64,
    pub model_init: u64,
    /// Mini-batch shuffling and training latent draws.
    pub training: u64,
    /// Latent draws of evaluation, forecasting and attention export.
    pub latent: u64,
    /// Held-out split of the irregularity probe.
    pub probe: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// CSV file; exactly one of `path` and `synth` must be given.
    pub path: Option<PathBuf>,
    pub synth: Option<SynthBlock>,
    /// Step between consecutive window anchors.
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthBlock {
    pub kind: SynthKind,
    pub rows: usize,
    pub channels: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub val_samples: usize,
    pub optimizer: AdamConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            patience: t.patience,
            val_samples: t.val_samples,
            optimizer: t.optimizer,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    #[default]
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub samples: usize,
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            split: Split::Test,
        }
    }
}

/// How contexts with missing rows reach the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    /// Observed times for the CDE resampler, forward-filled grid otherwise.
    #[default]
    Auto,
    Observed,
    Regular,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrregularityConfig {
    /// Fraction of calendar days removed from the model inputs.
    pub fraction: f64,
    pub representation: Representation,
}

/// The series a run works on: targets, and inputs with removed days.
pub struct RunData {
    pub truth: Dataset,
    pub inputs: Dataset,
    pub removed_days: Vec<i64>,
}

impl RunConfig {
    /// Reads, resolves and validates a config file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config '{}': {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::usage(format!("config '{}': {e}", path.display())))?;
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                cfg.data.path = Some(base.join(p));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let field = |f: &str, m: String| CliError::usage(format!("{f}: {m}"));
        match (&self.data.path, &self.data.synth) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(field("data", "give exactly one of `path` and `synth`".into()));
            }
            (Some(p), None) if !p.is_file() => {
                return Err(field("data.path", format!("file '{}' does not exist", p.display())));
            }
            (None, Some(s)) if s.rows == 0 || s.channels == 0 => {
                return Err(field("data.synth", "rows and channels must be positive".into()));
            }
            _ => {}
        }
        if self.data.stride == 0 {
            return Err(field("data.stride", "must be positive".into()));
        }
        self.model.validate().map_err(|e| field("model", e.to_string()))?;
        if self.training.epochs == 0 || self.training.batch_size == 0 || self.training.val_samples == 0 {
            return Err(field("training", "epochs, batch_size and val_samples must be positive".into()));
        }
        if self.evaluation.samples == 0 {
            return Err(field("evaluation.samples", "must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.irregularity.fraction) {
            return Err(field("irregularity.fraction", "must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// The canonical serialized form whose hash identifies the run.
    pub fn canonical(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::internal(format!("serializing config: {e}")))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            seed: self.seeds.training,
            patience: self.training.patience,
            val_samples: self.training.val_samples,
            optimizer: self.training.optimizer,
        }
    }

    pub fn load_data(&self) -> Result<RunData, CliError> {
        let truth = match (&self.data.path, &self.data.synth) {
            (Some(p), _) => load_csv(p)?,
            (None, Some(s)) => synth_dataset(&SynthSpec {
                kind: s.kind,
                rows: s.rows,
                channels: s.channels,
                seed: self.seeds.data,
                noise: s.noise,
            })?,
            (None, None) => return Err(CliError::usage("data: no source given")),
        };
        if self.irregularity.fraction > 0.0 {
            let inj = inject_block_missing(&truth, self.irregularity.fraction, self.seeds.injection)?;
            Ok(RunData {
                truth,
                inputs: inj.dataset,
                removed_days: inj.removed_days,
            })
        } else {
            Ok(RunData {
                inputs: truth.clone(),
                truth,
                removed_days: Vec::new(),
            })
        }
    }

    /// Context representation used with `model`.
    pub fn context_mode(&self, model: &ModelConfig) -> ContextMode {
        match self.irregularity.representation {
            Representation::Auto => model.resampler.context_mode(),
            Representation::Observed => ContextMode::Observed,
            Representation::Regular => ContextMode::Regular,
        }
    }

    /// Windows of one chronological split.
    pub fn windows(&self, data: &RunData, model: &ModelConfig, split: Split) -> Result<Vec<TimeSeriesWindow>, CliError> {
        let spec = WindowSpec {
            context: model.context,
            horizon: model.horizon,
            stride: self.data.stride,
            mode: self.context_mode(model),
        };
        let [train, val, test] = split_ranges(data.truth.len());
        let range = match split {
            Split::Train => train,
            Split::Val => val,
            Split::Test => test,
        };
        Ok(make_windows(&data.truth, &data.inputs, &spec, range, 0)?)
    }
}

/// Lower-case hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
