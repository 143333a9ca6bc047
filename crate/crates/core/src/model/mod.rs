//! The full forecaster: input projection, encoder hierarchy, diagonal
//! Gaussian latent, decoder hierarchy with skip connections, output head and
//! reversible instance normalization.
//!
//! Level `m` of the encoder holds `T_m = T_eff / w^m` positions, where
//! `T_eff` is the number of usable context rows left-truncated to a multiple
//! of `w^M`. The decoder mirrors it over the horizon with `L_m = L / w^m`.

mod checkpoint;
mod forward;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{EncoderStack, REVIN_EPS, SIGMA_FLOOR, ForecastEnsemble, LatentGaussian, PreparedWindow, RevinStats};
pub use train::{persistence_score, Adam, AdamConfig, EpochRecord, TrainConfig, TrainReport};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cde::{ConvDownParams, ConvUpParams, GruParams, NcdeDownParams, NcdeUpParams, SolverConfig};
use crate::data::{ContextMode, COVARIATE_DIM};
use crate::error::{Result, UfoError};
use crate::refiner::RefinerParams;
use crate::tensorops::{stream, DenseArray, ParamId, ParamStore};

/// Which operator moves embeddings between levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResamplerKind {
    Ncde,
    Rnn,
    Conv,
}

impl ResamplerKind {
    /// The CDE resampler reads observations at their true times; the
    /// baselines need a regular grid and see forward-filled rows.
    pub fn context_mode(self) -> ContextMode {
        match self {
            ResamplerKind::Ncde => ContextMode::Observed,
            ResamplerKind::Rnn | ResamplerKind::Conv => ContextMode::Regular,
        }
    }
}

impl FromStr for ResamplerKind {
    type Err = UfoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ncde" => Ok(Self::Ncde),
            "rnn" => Ok(Self::Rnn),
            "conv" => Ok(Self::Conv),
            other => Err(UfoError::invalid(format!(
                "unknown resampler '{other}' (expected ncde, rnn, conv)"
            ))),
        }
    }
}

impl fmt::Display for ResamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResamplerKind::Ncde => "ncde",
            ResamplerKind::Rnn => "rnn",
            ResamplerKind::Conv => "conv",
        })
    }
}

/// Which encoder features the decoder cross-attends to at each level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipSource {
    /// `R_enc(x^(m))`, the refined features that also feed the downsampler.
    #[default]
    PostRefiner,
    /// `x^(m)` as produced by the level below.
    PreRefiner,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Observed channels `d_x`.
    pub channels: usize,
    /// Context length `T`.
    pub context: usize,
    /// Horizon length `L`.
    pub horizon: usize,
    /// Number of downsampling levels `M`.
    pub levels: usize,
    /// Patch length `w`.
    pub patch_len: usize,
    /// Embedding width `d`.
    pub hidden: usize,
    /// Width `c` of the time covariates driving the resamplers.
    pub covariates: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    /// Hidden width of the SwiGLU vector fields.
    pub field_hidden: usize,
    pub solver: SolverConfig,
    pub resampler: ResamplerKind,
    pub skip: SkipSource,
    pub train_samples: usize,
    pub eval_samples: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            context: 64,
            horizon: 64,
            levels: 2,
            patch_len: 4,
            hidden: 32,
            covariates: COVARIATE_DIM,
            blocks: 2,
            heads: 4,
            ff_hidden: 64,
            field_hidden: 32,
            solver: SolverConfig::default(),
            resampler: ResamplerKind::Ncde,
            skip: SkipSource::PostRefiner,
            train_samples: 16,
            eval_samples: 100,
        }
    }
}

impl ModelConfig {
    /// `w^M`, the row count of one top-level position.
    pub fn block_len(&self) -> usize {
        self.patch_len.saturating_pow(self.levels as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(UfoError::Config(m));
        if self.levels < 1 {
            return bad("levels must be at least 1".into());
        }
        if self.patch_len < 2 {
            return bad(format!("patch_len must be at least 2, got {}", self.patch_len));
        }
        if self.channels == 0 || self.hidden == 0 || self.ff_hidden == 0 || self.field_hidden == 0 {
            return bad("channels and all widths must be positive".into());
        }
        if self.covariates != COVARIATE_DIM {
            return bad(format!("covariates must be {COVARIATE_DIM} (day, week, month, year pairs)"));
        }
        if self.hidden < self.covariates {
            return bad(format!("hidden ({}) must be >= covariates ({})", self.hidden, self.covariates));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden ({}) must be divisible by heads ({})", self.hidden, self.heads));
        }
        let block = self
            .patch_len
            .checked_pow(self.levels as u32)
            .ok_or_else(|| UfoError::Config("patch_len^levels overflows".into()))?;
        if self.context < block {
            return bad(format!("context {} is shorter than w^M = {block}", self.context));
        }
        if self.horizon < block || self.horizon % block != 0 {
            return bad(format!("horizon {} must be a positive multiple of w^M = {block}", self.horizon));
        }
        if self.horizon / block > self.context / block {
            return bad("horizon needs more top-level positions than the context provides".into());
        }
        if self.train_samples == 0 || self.eval_samples == 0 {
            return bad("sample counts must be positive".into());
        }
        if self.solver.steps_per_interval == 0 {
            return bad("solver.steps_per_interval must be positive".into());
        }
        self.solver.kernel.validate().map_err(|e| UfoError::Config(e.to_string()))
    }
}

/// Parameters of one resampling step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Resampler {
    NcdeDown(NcdeDownParams),
    NcdeUp(NcdeUpParams),
    ConvDown(ConvDownParams),
    ConvUp(ConvUpParams),
    Gru(GruParams),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn init(store: &mut ParamStore, prefix: &str, rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            weight: store.add_uniform(format!("{prefix}.weight"), rows, cols, 1.0, rng),
            bias: store.add(format!("{prefix}.bias"), DenseArray::zeros(1, cols)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub input: Linear,
    /// `DS^(m)` for `m = 0..M`.
    pub down: Vec<Resampler>,
    /// `US^(m)` for `m = 0..M`.
    pub up: Vec<Resampler>,
    /// Refiners of levels `1..M`; index 0 is level 1.
    pub enc_refiners: Vec<RefinerParams>,
    pub dec_refiners: Vec<RefinerParams>,
    pub top_gain: ParamId,
    pub top_bias: ParamId,
    pub mu: Linear,
    pub sigma: Linear,
    pub output: Linear,
}

/// A forecaster with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

impl Model {
    /// Fresh parameters drawn from stream `"model-init"` under `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream("model-init", seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let (d, c, w) = (config.hidden, config.covariates, config.patch_len);
        let input = Linear::init(s, "input", config.channels, d, rng);
        let mut down = Vec::new();
        let mut up = Vec::new();
        for m in 0..config.levels {
            let (dp, up_p) = (format!("enc.{m}.down"), format!("dec.{m}.up"));
            let (dn, u) = match config.resampler {
                ResamplerKind::Ncde => (
                    Resampler::NcdeDown(NcdeDownParams::init(s, &dp, d, d, c, config.field_hidden, rng)),
                    Resampler::NcdeUp(NcdeUpParams::init(s, &up_p, d, c, config.field_hidden, rng)),
                ),
                ResamplerKind::Conv => (
                    Resampler::ConvDown(ConvDownParams::init(s, &dp, w, d, d, rng)),
                    Resampler::ConvUp(ConvUpParams::init(s, &up_p, w, d, rng)),
                ),
                ResamplerKind::Rnn => (
                    Resampler::Gru(GruParams::init(s, &dp, d, d, rng)),
                    Resampler::Gru(GruParams::init(s, &up_p, c, d, rng)),
                ),
            };
            down.push(dn);
            up.push(u);
        }
        let mut enc_refiners = Vec::new();
        let mut dec_refiners = Vec::new();
        for m in 1..config.levels {
            enc_refiners.push(RefinerParams::init_encoder(
                s,
                &format!("enc.{m}.refine"),
                d,
                config.heads,
                config.blocks,
                config.ff_hidden,
                rng,
            )?);
            dec_refiners.push(RefinerParams::init_decoder(
                s,
                &format!("dec.{m}.refine"),
                d,
                config.heads,
                config.blocks,
                config.ff_hidden,
                rng,
            )?);
        }
        let top_gain = s.add("top.norm.gain", DenseArray::filled(1, d, 1.0));
        let top_bias = s.add("top.norm.bias", DenseArray::zeros(1, d));
        let mu = Linear::init(s, "top.mu", d, d, rng);
        let sigma = Linear::init(s, "top.sigma", d, d, rng);
        let output = Linear::init(s, "output", d, config.channels, rng);
        let layout = Layout {
            input,
            down,
            up,
            enc_refiners,
            dec_refiners,
            top_gain,
            top_bias,
            mu,
            sigma,
            output,
        };
        Ok(Self { config, store, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Ids of every refiner output projection.
    pub fn refiner_output_projections(&self) -> Vec<ParamId> {
        self.layout
            .enc_refiners
            .iter()
            .chain(&self.layout.dec_refiners)
            .flat_map(RefinerParams::output_projections)
            .collect()
    }

    /// The bottom-level CDE downsampler, if the model uses one.
    pub(crate) fn ncde_level0(&self) -> Option<NcdeDownParams> {
        match self.layout.down.first() {
            Some(Resampler::NcdeDown(p)) => Some(*p),
            _ => None,
        }
    }
}
