//! `analyze` subcommands.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Subcommand};
use serde::Serialize;
use ufo_core::analysis::{cv_study, irregularity_probe, ncde_speedup, sensitivity, timing, worker_count};
use ufo_core::data::load_csv;
use ufo_core::model::ResamplerKind;

use crate::commands::{csv_bytes, load_model, prepare_all, seeds_of, SplitArg};
use crate::config::{sha256_hex, RunConfig, Split};
use crate::error::CliError;
use crate::manifest::RunOutputs;

#[derive(Subcommand, Debug)]
pub enum AnalyzeCommand {
    /// Coefficient of variation of patch time gaps per level.
    Cv(CvArgs),
    /// Gradient norm of the mean forecast per context position.
    Sensitivity(SensitivityArgs),
    /// Logistic probe for irregular patches on level-0 embeddings.
    Probe(ProbeArgs),
    /// Inference time per sequence and the CDE speedup study.
    Timing(TimingArgs),
    /// Attention weights of one forward pass.
    Attention(AttentionArgs),
}

pub fn run(cmd: &AnalyzeCommand) -> Result<(), CliError> {
    match cmd {
        AnalyzeCommand::Cv(a) => cv(a),
        AnalyzeCommand::Sensitivity(a) => sensitivity_cmd(a),
        AnalyzeCommand::Probe(a) => probe(a),
        AnalyzeCommand::Timing(a) => timing_cmd(a),
        AnalyzeCommand::Attention(a) => attention(a),
    }
}

/// Hash of a run's config together with the command's own arguments.
fn run_hash(cfg: &RunConfig, extra: &impl Serialize) -> Result<String, CliError> {
    let args = toml::to_string(extra).map_err(|e| CliError::internal(e.to_string()))?;
    Ok(sha256_hex(format!("{}\n{args}", cfg.canonical()?).as_bytes()))
}

fn checkpoint_hash(path: &PathBuf) -> Result<String, CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::usage(format!("checkpoint '{}': {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Args, Debug)]
pub struct CvArgs {
    /// CSV dataset.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Patch length.
    #[arg(long)]
    pub w: usize,
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct CvRecord {
    dataset_sha256: String,
    w: usize,
    levels: usize,
}

fn cv(args: &CvArgs) -> Result<(), CliError> {
    let mut outputs = RunOutputs::new(&args.out, "analyze cv");
    let bytes = std::fs::read(&args.dataset)
        .map_err(|e| CliError::usage(format!("dataset '{}': {e}", args.dataset.display())))?;
    let ds = load_csv(&args.dataset)?;
    let cvs = cv_study(&ds, args.w, args.levels)?;
    let rows = cvs.iter().enumerate().map(|(l, v)| vec![l.to_string(), v.to_string()]);
    outputs.add("cv.csv", csv_bytes(&["level", "cv"], rows, &[])?);
    let record = CvRecord {
        dataset_sha256: sha256_hex(&bytes),
        w: args.w,
        levels: args.levels,
    };
    let canonical = toml::to_string(&record).map_err(|e| CliError::internal(e.to_string()))?;
    outputs.finish(sha256_hex(canonical.as_bytes()), BTreeMap::new())?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct SensitivityArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Use at most this many windows, taken evenly across the split.
    #[arg(long, default_value_t = 64)]
    pub max_windows: usize,
}

#[derive(Serialize)]
struct SensitivityRecord {
    checkpoint_sha256: String,
    split: Split,
    max_windows: usize,
}

fn spread<T: Clone>(items: Vec<T>, max: usize) -> Vec<T> {
    if items.len() <= max || max == 0 {
        return items;
    }
    (0..max).map(|i| items[i * items.len() / max].clone()).collect()
}

fn sensitivity_cmd(args: &SensitivityArgs) -> Result<(), CliError> {
    let mut outputs = RunOutputs::new(&args.out, "analyze sensitivity");
    let cfg = RunConfig::load(&args.config)?;
    let data = cfg.load_data()?;
    let model = load_model(&args.checkpoint, &data)?;
    let windows = spread(cfg.windows(&data, model.config(), args.split.into())?, args.max_windows);
    let report = sensitivity(&model, &windows)?;
    eprintln!("R^2 {:.4} over {} windows", report.r_squared, report.windows);
    let rows = report.norms.iter().enumerate().map(|(i, n)| vec![i.to_string(), n.to_string()]);
    let footer = [format!("# r_squared={}", report.r_squared)];
    outputs.add("sensitivity.csv", csv_bytes(&["position", "norm"], rows, &footer)?);
    let hash = run_hash(
        &cfg,
        &SensitivityRecord {
            checkpoint_sha256: checkpoint_hash(&args.checkpoint)?,
            split: args.split.into(),
            max_windows: args.max_windows,
        },
    )?;
    outputs.finish(hash, seeds_of(&cfg))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// One or more checkpoints; each gets its own probe.
    #[arg(long, required = true, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Serialize)]
struct ProbeRecord {
    checkpoints_sha256: Vec<String>,
    split: Split,
}

fn probe(args: &ProbeArgs) -> Result<(), CliError> {
    let mut outputs = RunOutputs::new(&args.out, "analyze probe");
    let cfg = RunConfig::load(&args.config)?;
    let data = cfg.load_data()?;
    let mut rows = Vec::new();
    let mut hashes = Vec::new();
    for path in &args.checkpoint {
        let model = load_model(path, &data)?;
        let windows = cfg.windows(&data, model.config(), args.split.into())?;
        let r = irregularity_probe(&model, &windows, cfg.seeds.probe)?;
        eprintln!("{}: F1 {:.4}", path.display(), r.f1);
        rows.push(vec![
            path.display().to_string(),
            r.f1.to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.positives.to_string(),
            r.negatives.to_string(),
        ]);
        hashes.push(checkpoint_hash(path)?);
    }
    let header = ["checkpoint", "f1", "precision", "recall", "positives", "negatives"];
    outputs.add("probe.csv", csv_bytes(&header, rows, &[])?);
    let hash = run_hash(
        &cfg,
        &ProbeRecord {
            checkpoints_sha256: hashes,
            split: args.split.into(),
        },
    )?;
    outputs.finish(hash, seeds_of(&cfg))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct TimingArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub batches: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Sequence length of the CDE speedup study; 0 skips it.
    #[arg(long, default_value_t = 720)]
    pub speedup_length: usize,
    #[arg(long, default_value_t = 32)]
    pub speedup_batch: usize,
}

#[derive(Serialize)]
struct TimingRecord {
    checkpoint_sha256: String,
    batches: usize,
    batch_size: usize,
    speedup_length: usize,
    speedup_batch: usize,
}

fn timing_cmd(args: &TimingArgs) -> Result<(), CliError> {
    let mut outputs = RunOutputs::new(&args.out, "analyze timing");
    let cfg = RunConfig::load(&args.config)?;
    let data = cfg.load_data()?;
    let model = load_model(&args.checkpoint, &data)?;
    let threads = worker_count();
    let windows = prepare_all(&model, &cfg.windows(&data, model.config(), Split::Test)?)?;
    let report = timing(&model, &windows, args.batches, args.batch_size, threads)?;
    eprintln!(
        "{:.6} s per sequence on {threads} threads (batch {})",
        report.seconds_per_sequence, report.batch_size
    );
    let mut rows = vec![
        vec!["seconds_per_sequence".to_string(), report.seconds_per_sequence.to_string()],
        vec!["seconds_per_batch".to_string(), report.seconds_per_batch.to_string()],
        vec!["batch_size".to_string(), report.batch_size.to_string()],
        vec!["threads".to_string(), threads.to_string()],
    ];
    if args.speedup_length > 0 && model.config().resampler == ResamplerKind::Ncde {
        let s = ncde_speedup(&model, args.speedup_length, args.speedup_batch, threads, cfg.seeds.latent)?;
        eprintln!(
            "patched {:.4} s, sequential {:.4} s, speedup {:.2}x",
            s.patched_seconds, s.sequential_seconds, s.speedup
        );
        rows.extend([
            vec!["patched_seconds".to_string(), s.patched_seconds.to_string()],
            vec!["sequential_seconds".to_string(), s.sequential_seconds.to_string()],
            vec!["speedup".to_string(), s.speedup.to_string()],
            vec!["rk4_steps_per_sequence".to_string(), s.rk4_steps_per_sequence.to_string()],
        ]);
    }
    outputs.add_timing("timing.csv", csv_bytes(&["metric", "value"], rows, &[])?);
    let hash = run_hash(
        &cfg,
        &TimingRecord {
            checkpoint_sha256: checkpoint_hash(&args.checkpoint)?,
            batches: args.batches,
            batch_size: args.batch_size,
            speedup_length: args.speedup_length,
            speedup_batch: args.speedup_batch,
        },
    )?;
    outputs.finish(hash, seeds_of(&cfg))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct AttentionArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Index of the window within the split.
    #[arg(long, default_value_t = 0)]
    pub window: usize,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Serialize)]
struct AttentionArgsRecord {
    checkpoint_sha256: String,
    window: usize,
    split: Split,
}

fn attention(args: &AttentionArgs) -> Result<(), CliError> {
    let mut outputs = RunOutputs::new(&args.out, "analyze attention");
    let cfg = RunConfig::load(&args.config)?;
    let data = cfg.load_data()?;
    let model = load_model(&args.checkpoint, &data)?;
    let windows = cfg.windows(&data, model.config(), args.split.into())?;
    let window = windows.get(args.window).ok_or_else(|| {
        CliError::usage(format!("--window {} out of range ({} windows)", args.window, windows.len()))
    })?;
    let records = model.export_attention(window, cfg.seeds.latent)?;
    let rows = records.iter().map(|r| {
        let kind = match r.kind {
            ufo_core::refiner::AttentionKind::SelfAttention => "self",
            ufo_core::refiner::AttentionKind::Cross => "cross",
        };
        let weights: Vec<String> = r.weights.iter().map(|w| w.to_string()).collect();
        vec![
            r.stack.clone(),
            r.level.to_string(),
            r.block.to_string(),
            kind.to_string(),
            r.head.to_string(),
            r.rows.to_string(),
            r.cols.to_string(),
            weights.join(" "),
        ]
    });
    let header = ["stack", "level", "block", "kind", "head", "rows", "cols", "weights"];
    outputs.add("attention.csv", csv_bytes(&header, rows, &[])?);
    let hash = run_hash(
        &cfg,
        &AttentionArgsRecord {
            checkpoint_sha256: checkpoint_hash(&args.checkpoint)?,
            window: args.window,
            split: args.split.into(),
        },
    )?;
    outputs.finish(hash, seeds_of(&cfg))?;
    Ok(())
}
