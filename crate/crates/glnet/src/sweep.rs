//! Accuracy-versus-peak-memory sweeps over global image size or patch size.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use glnet_core::inference::{infer_image, InferConfig, Mode};
use glnet_core::metrics::ConfusionMatrix;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{load_dataset, SegDataset};
use crate::error::{Error, Result};
use crate::imageio::write_atomic;
use crate::memory::{measure_once, measure_peak_memory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Side of the downsampled global image; one checkpoint per value.
    GlobalSize,
    /// Inference patch side.
    PatchSize,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::GlobalSize => "global_size",
            Axis::PatchSize => "patch_size",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global_size" => Ok(Axis::GlobalSize),
            "patch_size" => Ok(Axis::PatchSize),
            _ => Err(Error::Config(format!("unknown axis {s:?} (global_size, patch_size)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepModel {
    pub label: String,
    pub mode: String,
    /// Checkpoint path; `{value}` is replaced by the swept value.
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub data: PathBuf,
    #[serde(default = "test_split")]
    pub split: String,
    pub classes: usize,
    #[serde(default)]
    pub ignore: Option<u8>,
    pub axis: Axis,
    pub values: Vec<usize>,
    /// Overlap for patch-size sweeps; the checkpoint's otherwise.
    #[serde(default)]
    pub overlap: Option<usize>,
    pub models: Vec<SweepModel>,
    /// Output prefix: `<out>.csv`, `<out>.json` and `<out>.svg`.
    pub out: PathBuf,
}

fn test_split() -> String {
    "test".into()
}

impl SweepConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: SweepConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{e}")))?;
        for m in &cfg.models {
            m.mode.parse::<Mode>()?;
        }
        if cfg.values.is_empty() {
            return Err(Error::Config("a sweep needs at least one value".into()));
        }
        Ok(cfg)
    }
}

/// One measurement row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRecord {
    pub config: String,
    pub mode: String,
    pub axis: String,
    pub value: usize,
    pub miou: Option<f64>,
    /// Transient working set of one image's inference, in bytes.
    pub peak_bytes: Option<u64>,
    pub seconds: Option<f64>,
    /// Process heap at the peak, including what was live before.
    pub raw_peak_bytes: Option<u64>,
    /// `ok`, or `skipped: <reason>`.
    pub status: String,
}

struct Measured {
    miou: f64,
    peak: u64,
    raw_peak: u64,
    seconds: f64,
}

fn evaluate(model: &glnet_core::model::GlNet<f32>, mode: Mode, cfg: &InferConfig, data: &SegDataset, ignore: Option<u8>) -> Result<Measured> {
    let mut cm = ConfusionMatrix::new(data.classes);
    let (mut peak, mut raw_peak) = (0, 0);
    let start = Instant::now();
    for i in 0..data.len() {
        let sample = data.sample(i)?;
        let run = || infer_image(model, &sample.image, mode, cfg);
        let (seg, reading) = if i == 0 {
            measure_peak_memory(run)?
        } else {
            measure_once(run).ok_or(Error::Unsupported("the counting allocator is not installed"))?
        };
        let seg = seg?;
        peak = peak.max(reading.delta);
        raw_peak = raw_peak.max(reading.raw_peak);
        cm.add(&seg.mask, &sample.mask)?;
    }
    Ok(Measured {
        miou: cm.miou(ignore)?,
        peak,
        raw_peak,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn skipped(m: &SweepModel, axis: Axis, value: usize, reason: impl std::fmt::Display) -> TradeoffRecord {
    TradeoffRecord {
        config: m.label.clone(),
        mode: m.mode.clone(),
        axis: axis.name().into(),
        value,
        miou: None,
        peak_bytes: None,
        seconds: None,
        raw_peak_bytes: None,
        status: format!("skipped: {reason}"),
    }
}

/// Measures every (model, value) pair. Rows come back sorted by peak memory,
/// skipped rows last.
pub fn sweep(cfg: &SweepConfig) -> Result<Vec<TradeoffRecord>> {
    let data = load_dataset(&cfg.data, &cfg.split, cfg.classes)?;
    let mut rows = Vec::new();
    for m in &cfg.models {
        let mode: Mode = m.mode.parse()?;
        for &value in &cfg.values {
            let path = PathBuf::from(m.checkpoint.replace("{value}", &value.to_string()));
            let ck = match checkpoint::load(&path) {
                Ok(ck) => ck,
                Err(Error::MissingCheckpoint(p)) => {
                    rows.push(skipped(m, cfg.axis, value, format_args!("missing checkpoint {}", p.display())));
                    continue;
                }
                Err(e) => return Err(e),
            };
            let infer = match cfg.axis {
                Axis::GlobalSize => {
                    let trained = ck.model.config().input_h;
                    if trained != value {
                        rows.push(skipped(m, cfg.axis, value, format_args!("checkpoint global size is {trained}")));
                        continue;
                    }
                    ck.infer
                }
                Axis::PatchSize => InferConfig {
                    patch: value,
                    overlap: cfg.overlap.unwrap_or(ck.infer.overlap),
                },
            };
            if let Err(e) = mode.check(ck.model.stage) {
                rows.push(skipped(m, cfg.axis, value, e));
                continue;
            }
            match evaluate(&ck.model, mode, &infer, &data, cfg.ignore) {
                Ok(r) => rows.push(TradeoffRecord {
                    config: m.label.clone(),
                    mode: m.mode.clone(),
                    axis: cfg.axis.name().into(),
                    value,
                    miou: Some(r.miou),
                    peak_bytes: Some(r.peak),
                    seconds: Some(r.seconds),
                    raw_peak_bytes: Some(r.raw_peak),
                    status: "ok".into(),
                }),
                Err(e @ Error::Unsupported(_)) => return Err(e),
                Err(e) if e.is_usage() => rows.push(skipped(m, cfg.axis, value, e)),
                Err(e) => return Err(e),
            }
        }
    }
    rows.sort_by_key(|r| (r.peak_bytes.is_none(), r.peak_bytes));
    Ok(rows)
}

pub fn to_csv(rows: &[TradeoffRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
}

/// Plot-ready `(memory, mIoU)` point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub label: String,
    pub value: usize,
    pub peak_mb: f64,
    pub miou: f64,
}

pub fn points(rows: &[TradeoffRecord]) -> Vec<Point> {
    rows.iter()
        .filter_map(|r| {
            Some(Point {
                label: r.config.clone(),
                value: r.value,
                peak_mb: r.peak_bytes? as f64 / (1024.0 * 1024.0),
                miou: r.miou?,
            })
        })
        .collect()
}

const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Static scatter chart of mIoU against peak memory, one colour per label,
/// each point annotated with its swept value.
pub fn render_svg(points: &[Point], axis: Axis) -> String {
    let (w, h, m) = (640.0, 420.0, 60.0);
    let max_mb = points.iter().map(|p| p.peak_mb).fold(0.0, f64::max).max(1e-3) * 1.1;
    let x = |mb: f64| m + mb / max_mb * (w - 2.0 * m);
    let y = |miou: f64| h - m - miou * (h - 2.0 * m);
    let mut labels: Vec<&str> = Vec::new();
    for p in points {
        if !labels.contains(&p.label.as_str()) {
            labels.push(&p.label);
        }
    }
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, m - 6.0, y(v) + 4.0);
        let mb = max_mb * v;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{mb:.1}</text>"#, x(mb), h - m + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">peak memory (MB)</text>"#, w / 2.0, h - 18.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">mIoU</text>"#, h / 2.0, h / 2.0);
    for p in points {
        let i = labels.iter().position(|l| *l == p.label).unwrap_or(0);
        let c = PALETTE[i % PALETTE.len()];
        let (px, py) = (x(p.peak_mb), y(p.miou));
        let _ = writeln!(s, r#"<circle cx="{px:.1}" cy="{py:.1}" r="4" fill="{c}"/>"#);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}={}</text>"#, px + 6.0, py - 6.0, axis.name(), p.value);
    }
    for (i, l) in labels.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let ly = m + 14.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{c}"/>"#, w - m - 120.0, ly - 9.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, w - m - 104.0, escape(l));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<prefix>.csv`, `<prefix>.json` (plot points) and `<prefix>.svg`.
pub fn write_outputs(prefix: &Path, rows: &[TradeoffRecord], axis: Axis) -> Result<()> {
    let with = |ext: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    let pts = points(rows);
    write_atomic(&with(".csv"), &to_csv(rows)?)?;
    write_atomic(&with(".json"), &serde_json::to_vec_pretty(&pts).expect("points serialize"))?;
    write_atomic(&with(".svg"), render_svg(&pts, axis).as_bytes())
}
