//! `synth`, `train`, `evaluate` and `forecast`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use ufo_core::data::{
    format_timestamp, future_window, inject_block_missing, load_csv, synth_dataset, write_csv, SynthKind, SynthSpec,
};
use ufo_core::model::{load_checkpoint, persistence_score, write_checkpoint, Model, PreparedWindow};
use ufo_core::scoring::ScoreReport;

use crate::config::{sha256_hex, RunConfig, RunData, Split};
use crate::error::CliError;
use crate::manifest::RunOutputs;

pub fn csv_bytes(
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
    footer: &[String],
) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::internal(format!("csv: {e}"));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    let mut out = w.into_inner().map_err(|e| CliError::internal(e.to_string()))?;
    for line in footer {
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

pub fn seeds_of(cfg: &RunConfig) -> BTreeMap<String, u64> {
    let s = cfg.seeds;
    BTreeMap::from([
        ("data".to_string(), s.data),
        ("injection".to_string(), s.injection),
        ("model_init".to_string(), s.model_init),
        ("training".to_string(), s.training),
        ("latent".to_string(), s.latent),
        ("probe".to_string(), s.probe),
    ])
}

/// Writes the outputs with the canonical config alongside.
pub fn finish_run(mut outputs: RunOutputs, cfg: &RunConfig) -> Result<(), CliError> {
    let canonical = cfg.canonical()?;
    let hash = sha256_hex(canonical.as_bytes());
    outputs.add("config.toml", canonical);
    outputs.finish(hash, seeds_of(cfg))?;
    Ok(())
}

/// Loads a checkpoint and checks that it fits the run's data.
pub fn load_model(path: &Path, data: &RunData) -> Result<Model, CliError> {
    let model = load_checkpoint(path)?;
    if model.config().channels != data.truth.channels() {
        return Err(CliError::usage(format!(
            "checkpoint expects {} channels, the data has {}",
            model.config().channels,
            data.truth.channels()
        )));
    }
    Ok(model)
}

pub fn prepare_all(model: &Model, windows: &[ufo_core::data::TimeSeriesWindow]) -> Result<Vec<PreparedWindow>, CliError> {
    Ok(windows.iter().map(|w| model.prepare(w)).collect::<ufo_core::Result<Vec<_>>>()?)
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "sine-mix")]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 4096)]
    pub rows: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of calendar days to blank out.
    #[arg(long, default_value_t = 0.0)]
    pub missing_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub missing_seed: u64,
}

#[derive(Serialize)]
struct SynthRecord {
    kind: SynthKind,
    rows: usize,
    channels: usize,
    noise: f64,
    seed: u64,
    missing_fraction: f64,
    missing_seed: u64,
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let mut outputs = RunOutputs::new(&args.out, "synth");
    if !(0.0..1.0).contains(&args.missing_fraction) {
        return Err(CliError::usage("--missing-fraction must lie in [0, 1)"));
    }
    let mut ds = synth_dataset(&SynthSpec {
        kind: args.kind,
        rows: args.rows,
        channels: args.channels,
        seed: args.seed,
        noise: args.noise,
    })?;
    if args.missing_fraction > 0.0 {
        let inj = inject_block_missing(&ds, args.missing_fraction, args.missing_seed)?;
        let rows = inj.removed_days.iter().map(|d| vec![d.to_string()]);
        outputs.add("removed_days.csv", csv_bytes(&["day"], rows, &[])?);
        ds = inj.dataset;
    }
    let mut buf = Vec::new();
    write_csv(&ds, &mut buf)?;
    outputs.add("data.csv", buf);
    let record = SynthRecord {
        kind: args.kind,
        rows: args.rows,
        channels: args.channels,
        noise: args.noise,
        seed: args.seed,
        missing_fraction: args.missing_fraction,
        missing_seed: args.missing_seed,
    };
    let canonical = toml::to_string(&record).map_err(|e| CliError::internal(e.to_string()))?;
    let seeds = BTreeMap::from([("data".to_string(), args.seed), ("injection".to_string(), args.missing_seed)]);
    outputs.finish(sha256_hex(canonical.as_bytes()), seeds)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `training.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides `seeds.training`.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let mut outputs = RunOutputs::new(&args.out, "train");
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(e) = args.epochs {
        cfg.training.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seeds.training = s;
    }
    cfg.validate()?;
    let data = cfg.load_data()?;
    let mut model = Model::new(cfg.model.clone(), cfg.seeds.model_init)?;
    let train = prepare_all(&model, &cfg.windows(&data, &cfg.model, Split::Train)?)?;
    let val = prepare_all(&model, &cfg.windows(&data, &cfg.model, Split::Val)?)?;
    if train.is_empty() {
        return Err(CliError::usage("the training split yields no windows"));
    }
    let mut log = vec![];
    let report = model.fit(&train, &val, &cfg.train_config(), |e| {
        eprintln!("epoch {:>3}  train {:.6}  val {:.6}", e.epoch, e.train_loss, e.val_ncrps);
        log.push(vec![e.epoch.to_string(), e.train_loss.to_string(), e.val_ncrps.to_string()]);
    })?;
    eprintln!("best epoch {} (val {:.6})", report.best_epoch, report.best_val);
    let mut ckpt = Vec::new();
    write_checkpoint(&model, &mut ckpt)?;
    outputs.add("model.ckpt", ckpt);
    outputs.add("train_log.csv", csv_bytes(&["epoch", "train_loss", "val_ncrps"], log, &[])?);
    if !data.removed_days.is_empty() {
        let rows = data.removed_days.iter().map(|d| vec![d.to_string()]);
        outputs.add("removed_days.csv", csv_bytes(&["day"], rows, &[])?);
    }
    finish_run(outputs, &cfg)
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `evaluation.samples`.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Overrides `evaluation.split`.
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Overrides `seeds.latent`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn score_rows(label: &str, report: &ScoreReport, names: &[String]) -> Vec<Vec<String>> {
    let mut rows: Vec<Vec<String>> = report
        .channels
        .iter()
        .zip(&report.denominators)
        .zip(names)
        .map(|((v, d), n)| vec![label.to_string(), n.clone(), d.to_string(), v.to_string()])
        .collect();
    rows.push(vec![label.to_string(), "mean".into(), String::new(), report.aggregate.to_string()]);
    rows
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let mut outputs = RunOutputs::new(&args.out, "evaluate");
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(n) = args.samples {
        cfg.evaluation.samples = n;
    }
    if let Some(s) = args.split {
        cfg.evaluation.split = s.into();
    }
    if let Some(s) = args.seed {
        cfg.seeds.latent = s;
    }
    cfg.validate()?;
    let data = cfg.load_data()?;
    let model = load_model(&args.checkpoint, &data)?;
    let windows = cfg.windows(&data, model.config(), cfg.evaluation.split)?;
    if windows.is_empty() {
        return Err(CliError::usage("the evaluation split yields no windows"));
    }
    let prepared = prepare_all(&model, &windows)?;
    let score = model.evaluate(&prepared, cfg.evaluation.samples, cfg.seeds.latent)?;
    let baseline = persistence_score(&windows)?;
    eprintln!(
        "ncrps {:.6} over {} windows (persistence {:.6})",
        score.aggregate,
        windows.len(),
        baseline.aggregate
    );
    let names = &data.truth.channels;
    let mut rows = score_rows("model", &score, names);
    rows.extend(score_rows("persistence", &baseline, names));
    outputs.add("scores.csv", csv_bytes(&["forecaster", "channel", "denominator", "ncrps"], rows, &[])?);
    finish_run(outputs, &cfg)
}

#[derive(Args, Debug)]
pub struct ForecastArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV whose last rows form the context.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Serialize)]
struct ForecastRecord {
    checkpoint_sha256: String,
    input_sha256: String,
    samples: usize,
    seed: u64,
}

pub fn forecast(args: &ForecastArgs) -> Result<(), CliError> {
    let mut outputs = RunOutputs::new(&args.out, "forecast");
    let read = |p: &Path, what: &str| {
        std::fs::read(p).map_err(|e| CliError::usage(format!("{what} '{}': {e}", p.display())))
    };
    let ckpt_bytes = read(&args.checkpoint, "checkpoint")?;
    let input_bytes = read(&args.input, "input")?;
    let model = ufo_core::model::read_checkpoint(ckpt_bytes.as_slice())?;
    let ds = load_csv(&args.input)?;
    let cfg = model.config();
    if ds.channels() != cfg.channels {
        return Err(CliError::usage(format!(
            "checkpoint expects {} channels, the input has {}",
            cfg.channels,
            ds.channels()
        )));
    }
    let window = future_window(&ds, cfg.context, cfg.horizon, cfg.resampler.context_mode())?;
    let ens = model.forecast(&window, args.samples, args.seed)?;
    let mut rows = Vec::with_capacity(args.samples * cfg.horizon * cfg.channels);
    for (s, sample) in ens.samples.iter().enumerate() {
        for t in 0..cfg.horizon {
            for (j, name) in ds.channels.iter().enumerate() {
                rows.push(vec![
                    s.to_string(),
                    t.to_string(),
                    name.clone(),
                    sample.get(t, j).to_string(),
                    format_timestamp(ens.timestamps[t]),
                ]);
            }
        }
    }
    outputs.add(
        "ensemble.csv",
        csv_bytes(&["sample", "step", "channel", "value", "timestamp"], rows, &[])?,
    );
    let record = ForecastRecord {
        checkpoint_sha256: sha256_hex(&ckpt_bytes),
        input_sha256: sha256_hex(&input_bytes),
        samples: args.samples,
        seed: args.seed,
    };
    let canonical = toml::to_string(&record).map_err(|e| CliError::internal(e.to_string()))?;
    outputs.finish(
        sha256_hex(canonical.as_bytes()),
        BTreeMap::from([("latent".to_string(), args.seed)]),
    )?;
    Ok(())
}
