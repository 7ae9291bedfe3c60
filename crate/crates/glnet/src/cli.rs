//! Subcommands of the `glnet` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use glnet_core::coarse2fine::{crop_to_box, DEFAULT_TOLERANCE};
use glnet_core::data::SynthSpec;
use glnet_core::inference::{InferConfig, Mode};
use glnet_core::metrics::{binary_iou, isic_threshold, ConfusionMatrix};
use glnet_core::model::GlNet;
use glnet_core::training::{run_local_only, run_phase1, run_phase2, run_phase3, train, Phase, TrainSet, TrainState};
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{load_config, PhaseSel, TrainConfig};
use crate::dataset::{list_images, load_dataset, write_synthetic, SynthKind, SynthManifest};
use crate::error::{Error, Result};
use crate::imageio::{read_mask, write_atomic};
use crate::infer::{infer_dataset, CoarseToFine, InferOptions, ManifestEntry};
use crate::sweep::{sweep, write_outputs, Axis, SweepConfig, TradeoffRecord};

/// Environment variable that turns on progress messages on stderr.
pub const VERBOSE_ENV: &str = "GLNET_VERBOSE";

fn verbose() -> bool {
    std::env::var_os(VERBOSE_ENV).is_some_and(|v| !v.is_empty() && v != "0")
}

macro_rules! progress {
    ($($t:tt)*) => {
        if verbose() {
            eprintln!($($t)*);
        }
    };
}

#[derive(Debug, Parser)]
#[command(name = "glnet", version, about = "Global-local segmentation of ultra-high resolution images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset split with a regeneration manifest.
    Synthesize(SynthArgs),
    /// Run training phases and write per-phase checkpoints and loss curves.
    Train(TrainArgs),
    /// Segment every image of a directory.
    Infer(InferArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Measure accuracy against peak memory over a swept size.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Context,
    Lesion,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long, default_value_t = 1024)]
    pub canvas: usize,
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    /// Index of the first generated sample (splits of one seed use disjoint
    /// ranges).
    #[arg(long, default_value_t = 0)]
    pub first: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Kind::Context)]
    pub kind: Kind,
    /// Patch side the data will be cut into; the canvas must hold one.
    #[arg(long, default_value_t = 128)]
    pub patch: usize,
    #[arg(long, default_value_t = 0.01)]
    pub min_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    pub max_fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Key-value config file; built-in defaults without one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `1`, `2`, `3`, `all` or `local` (the local-only baseline).
    #[arg(long)]
    pub phase: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` override of any config entry; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of PNG images (or a split directory with `images/`).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "glnet-bidir")]
    pub mode: String,
    /// Coarse global pass, relaxed foreground box, fine pass inside it.
    #[arg(long)]
    pub coarse_to_fine: bool,
    /// Model for the coarse pass; the main checkpoint when absent.
    #[arg(long)]
    pub coarse_checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub overlap: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Miou,
    Isic,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth masks (or a split directory with `masks/`).
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value_t = Metric::Miou)]
    pub metric: Metric,
    /// Number of classes; one more than the largest label seen when absent.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Class excluded from mIoU.
    #[arg(long)]
    pub ignore: Option<u8>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub axis: Option<String>,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<usize>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synthesize(a) => cmd_synthesize(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Eval(a) => {
            let report = cmd_eval(&a)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            Ok(())
        }
        Command::Sweep(a) => cmd_sweep(&a).map(|_| ()),
    }
}

pub fn cmd_synthesize(a: &SynthArgs) -> Result<SynthManifest> {
    let kind = match a.kind {
        Kind::Context => SynthKind::Context {
            spec: SynthSpec::desk(a.canvas, a.seed),
        },
        Kind::Lesion => SynthKind::Lesion {
            canvas: a.canvas,
            min_fraction: a.min_fraction,
            max_fraction: a.max_fraction,
            seed: a.seed,
        },
    };
    kind.validate(a.patch)?;
    let m = write_synthetic(&kind, a.first, a.n, &a.out, &a.split)?;
    progress!("wrote {} samples to {}", m.count, a.out.join(&a.split).display());
    Ok(m)
}

/// The resolved training config for `a`.
pub fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut set = a.set.clone();
    let quoted = |p: &Path| format!("{:?}", p.display().to_string());
    if let Some(p) = &a.phase {
        set.push(format!("phases={p:?}"));
    }
    if let Some(d) = &a.data {
        set.push(format!("data={}", quoted(d)));
    }
    if let Some(o) = &a.out {
        set.push(format!("out={}", quoted(o)));
    }
    if let Some(s) = a.seed {
        set.push(format!("seed={s}"));
    }
    load_config(a.config.as_deref(), &set)
}

fn phase_file(out: &Path, name: &str, ext: &str) -> PathBuf {
    out.join(format!("{name}.{ext}"))
}

fn phase_stem(phase: Phase) -> &'static str {
    match phase {
        Phase::Global => "phase1",
        Phase::GlobalToLocal => "phase2",
        Phase::Bidirectional => "phase3",
        Phase::LocalOnly => "local",
    }
}

fn loss_csv(state: &TrainState<f32>, phase: Phase) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["phase", "epoch", "step", "loss"]).map_err(|e| Error::Config(format!("csv: {e}")))?;
    for r in state.history.iter().filter(|r| r.phase == phase) {
        w.write_record([
            phase.name().to_string(),
            r.epoch.to_string(),
            r.step.to_string(),
            r.loss.to_string(),
        ])
        .map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
}

fn save_phase(cfg: &TrainConfig, phase: Phase, model: &GlNet<f32>, state: &TrainState<f32>) -> Result<()> {
    let stem = phase_stem(phase);
    checkpoint::save(&phase_file(&cfg.out, stem, "ckpt"), model, &cfg.infer())?;
    write_atomic(&phase_file(&cfg.out, stem, "losses.csv"), &loss_csv(state, phase)?)?;
    progress!("{} done: {}", phase.name(), phase_file(&cfg.out, stem, "ckpt").display());
    Ok(())
}

fn load_previous(cfg: &TrainConfig, stem: &str, needed_for: &str) -> Result<GlNet<f32>> {
    let path = phase_file(&cfg.out, stem, "ckpt");
    let ck = match checkpoint::load(&path) {
        Err(Error::MissingCheckpoint(p)) => {
            return Err(Error::Config(format!("{needed_for} needs the {stem} checkpoint {}", p.display())))
        }
        other => other?,
    };
    if ck.model.config() != &cfg.branch() || ck.model.plan != cfg.share()? {
        return Err(Error::Config(format!("{} was built with a different model config", path.display())));
    }
    Ok(ck.model)
}

fn train_set(cfg: &TrainConfig) -> Result<TrainSet<f32>> {
    let data = load_dataset(&cfg.data, &cfg.split, cfg.classes)?;
    let mut samples = data.samples()?;
    if cfg.boxed {
        let mut boxed = Vec::with_capacity(samples.len());
        for s in &samples {
            if let Some(b) = crop_to_box(s, cfg.patch, cfg.tolerance)? {
                boxed.push(b);
            }
        }
        samples = boxed;
    }
    Ok(TrainSet::new(samples, &cfg.plan())?)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a)?;
    let phase = cfg.phase()?;
    // fail on a missing predecessor before touching the data
    let resumed = match phase {
        PhaseSel::Two => Some(load_previous(&cfg, "phase1", "phase 2")?),
        PhaseSel::Three => Some(load_previous(&cfg, "phase2", "phase 3")?),
        _ => None,
    };
    let set = train_set(&cfg)?;
    let plan = cfg.plan();
    let resolved = toml::to_string(&cfg).map_err(|e| Error::Config(format!("{e}")))?;
    write_atomic(&cfg.out.join("config.toml"), resolved.as_bytes())?;
    let share = cfg.share()?;
    let fresh = || GlNet::<f32>::new(cfg.branch(), share, cfg.lambda, cfg.seed);
    let mut state = TrainState::new(set.len());
    match phase {
        PhaseSel::All => {
            let mut model = fresh()?;
            train(&mut model, &set, &plan, &mut state, |p, m, s| {
                save_phase(&cfg, p, m, s).map_err(|e| glnet_core::Error::Config(e.to_string()))
            })?;
        }
        PhaseSel::One => {
            let mut model = fresh()?;
            run_phase1(&mut model, &set, &plan, &mut state)?;
            save_phase(&cfg, Phase::Global, &model, &state)?;
        }
        PhaseSel::Two => {
            let mut model = resumed.expect("loaded above");
            run_phase2(&mut model, &set, &plan, &mut state)?;
            save_phase(&cfg, Phase::GlobalToLocal, &model, &state)?;
        }
        PhaseSel::Three => {
            let mut model = resumed.expect("loaded above");
            run_phase3(&mut model, &set, &plan, &mut state)?;
            save_phase(&cfg, Phase::Bidirectional, &model, &state)?;
        }
        PhaseSel::Local => {
            let mut model = fresh()?;
            run_local_only(&mut model, &set, &plan, &mut state)?;
            save_phase(&cfg, Phase::LocalOnly, &model, &state)?;
        }
    }
    Ok(())
}

pub fn cmd_infer(a: &InferArgs) -> Result<()> {
    let mode: Mode = a.mode.parse()?;
    let Checkpoint { model, infer } = checkpoint::load(&a.checkpoint)?;
    let coarse = a.coarse_checkpoint.as_deref().map(checkpoint::load).transpose()?;
    let config = InferConfig {
        patch: a.patch.unwrap_or(infer.patch),
        overlap: a.overlap.unwrap_or(infer.overlap),
    };
    if config.overlap >= config.patch {
        return Err(Error::Config(format!("overlap {} must be below patch {}", config.overlap, config.patch)));
    }
    let opts = InferOptions {
        mode,
        config,
        coarse_to_fine: a.coarse_to_fine.then(|| CoarseToFine {
            coarse: coarse.as_ref().map(|c| &c.model),
            tolerance: a.tolerance,
        }),
    };
    let entries = infer_dataset(&model, &a.input, &opts, &a.out)?;
    report_failures(&entries)
}

fn report_failures(entries: &[ManifestEntry]) -> Result<()> {
    let failed: Vec<String> = entries
        .iter()
        .filter_map(|e| e.error.as_ref().map(|err| format!("{}: {err}", e.id)))
        .collect();
    progress!("segmented {} of {} images", entries.len() - failed.len(), entries.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Dataset(format!("{} of {} images failed; {}", failed.len(), entries.len(), failed.join("; "))))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub metric: &'static str,
    pub value: f64,
    pub images: usize,
    /// Per-class IoU (mIoU) or per-image IoU (ISIC), in file order.
    pub detail: Vec<Option<f64>>,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport> {
    let gts = list_images(&{
        let masks = a.gt.join("masks");
        if masks.is_dir() {
            masks
        } else {
            a.gt.clone()
        }
    })?;
    if gts.is_empty() {
        return Err(glnet_core::Error::EmptyDataset.into());
    }
    let mut pairs = Vec::with_capacity(gts.len());
    for (id, gt_path) in &gts {
        let pred_path = a.pred.join(format!("{id}.png"));
        if !pred_path.is_file() {
            return Err(Error::Dataset(format!("missing prediction {}", pred_path.display())));
        }
        let (p, g) = (read_mask(&pred_path)?, read_mask(gt_path)?);
        if (p.h, p.w) != (g.h, g.w) {
            return Err(Error::Dataset(format!("size mismatch between {} and {}", pred_path.display(), gt_path.display())));
        }
        pairs.push((p, g));
    }
    match a.metric {
        Metric::Miou => {
            let seen = pairs.iter().map(|(p, g)| p.max_label().max(g.max_label()) as usize + 1).max().unwrap_or(1);
            let classes = a.classes.unwrap_or(seen.max(2));
            let mut cm = ConfusionMatrix::new(classes);
            for (p, g) in &pairs {
                cm.add(p, g)?;
            }
            Ok(EvalReport {
                metric: "miou",
                value: cm.miou(a.ignore)?,
                images: pairs.len(),
                detail: cm.ious(a.ignore),
            })
        }
        Metric::Isic => {
            let ious = pairs.iter().map(|(p, g)| binary_iou(p, g)).collect::<glnet_core::Result<Vec<f64>>>()?;
            let value = ious.iter().map(|&v| isic_threshold(v)).sum::<f64>() / ious.len() as f64;
            Ok(EvalReport {
                metric: "isic",
                value,
                images: pairs.len(),
                detail: ious.into_iter().map(Some).collect(),
            })
        }
    }
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<Vec<TradeoffRecord>> {
    let text = std::fs::read_to_string(&a.config).map_err(|e| Error::Config(format!("{}: {e}", a.config.display())))?;
    let mut cfg = SweepConfig::parse(&text)?;
    if let Some(axis) = &a.axis {
        cfg.axis = axis.parse::<Axis>()?;
    }
    if let Some(values) = &a.values {
        cfg.values = values.clone();
    }
    if let Some(out) = &a.out {
        cfg.out = out.clone();
    }
    let rows = sweep(&cfg)?;
    write_outputs(&cfg.out, &rows, cfg.axis)?;
    progress!("{} sweep rows written to {}.csv", rows.len(), cfg.out.display());
    Ok(rows)
}
