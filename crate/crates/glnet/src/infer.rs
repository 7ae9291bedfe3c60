//! Directory-level inference with a JSON-lines manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use glnet_core::coarse2fine::{coarse_segment, fine_segment, relax_bbox, FgBox};
use glnet_core::inference::{infer_image, InferConfig, Mode};
use glnet_core::model::GlNet;
use glnet_core::tiling::{PixelRect, TileGrid};
use glnet_core::{Mask, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::list_images;
use crate::error::{Error, Result};
use crate::imageio::{read_rgb, write_atomic, write_mask};
use crate::memory::{measure_once, MemoryReading};

/// Two-stage settings: the coarse pass runs the global branch of `coarse`
/// (the fine model itself when `None`).
#[derive(Clone, Debug)]
pub struct CoarseToFine<'m> {
    pub coarse: Option<&'m GlNet<f32>>,
    pub tolerance: f64,
}

#[derive(Clone, Debug)]
pub struct InferOptions<'m> {
    pub mode: Mode,
    pub config: InferConfig,
    pub coarse_to_fine: Option<CoarseToFine<'m>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    /// Relaxed foreground box of the coarse mask.
    pub fg_box: Option<FgBox>,
    /// Region the fine pass actually segmented.
    pub segmented: Option<PixelRect>,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub mode: String,
    pub mask: Option<PathBuf>,
    pub grid: Option<TileGrid>,
    pub seconds: f64,
    pub memory: Option<MemoryReading>,
    pub coarse_to_fine: Option<BoxRecord>,
    pub error: Option<String>,
}

/// Segments one image; the grid and box record describe what ran.
pub fn segment(model: &GlNet<f32>, image: &Tensor<f32>, opts: &InferOptions) -> Result<(Mask, TileGrid, Option<BoxRecord>)> {
    let s = image.shape();
    match &opts.coarse_to_fine {
        None => {
            let seg = infer_image(model, image, opts.mode, &opts.config)?;
            Ok((seg.mask, seg.grid, None))
        }
        Some(c2f) => {
            let coarse = coarse_segment(c2f.coarse.unwrap_or(model), image)?;
            let fg_box = relax_bbox(&coarse, 1.0, c2f.tolerance);
            let (mask, segmented) = fine_segment(model, image, fg_box.as_ref(), opts.mode, &opts.config)?;
            let frame = segmented.unwrap_or(PixelRect::full(s.h, s.w));
            let grid = opts.config.grid(frame.height, frame.width)?;
            Ok((mask, grid, Some(BoxRecord { fg_box, segmented })))
        }
    }
}

fn run_one(model: &GlNet<f32>, path: &Path, out_mask: &Path, opts: &InferOptions) -> Result<(TileGrid, Option<BoxRecord>, Option<MemoryReading>)> {
    let image = read_rgb(path)?;
    let (result, memory) = match measure_once(|| segment(model, &image, opts)) {
        Some((r, m)) => (r, Some(m)),
        None => (segment(model, &image, opts), None),
    };
    let (mask, grid, boxes) = result?;
    write_mask(out_mask, &mask)?;
    Ok((grid, boxes, memory))
}

/// Segments every image of `input` into `out/<id>.png` and writes
/// `out/manifest.jsonl`. Failures are recorded per file; the batch goes on.
pub fn infer_dataset(model: &GlNet<f32>, input: &Path, opts: &InferOptions, out: &Path) -> Result<Vec<ManifestEntry>> {
    opts.mode.check(model.stage)?;
    let images = list_images(input)?;
    let mut entries = Vec::with_capacity(images.len());
    for (id, path) in images {
        let mask_path = out.join(format!("{id}.png"));
        let start = Instant::now();
        let result = run_one(model, &path, &mask_path, opts);
        let seconds = start.elapsed().as_secs_f64();
        let mut entry = ManifestEntry {
            id,
            mode: opts.mode.name().to_string(),
            mask: None,
            grid: None,
            seconds,
            memory: None,
            coarse_to_fine: None,
            error: None,
        };
        match result {
            Ok((grid, boxes, memory)) => {
                entry.mask = Some(mask_path);
                entry.grid = Some(grid);
                entry.memory = memory;
                entry.coarse_to_fine = boxes;
            }
            Err(e) => entry.error = Some(e.to_string()),
        }
        entries.push(entry);
    }
    let mut lines = Vec::new();
    for e in &entries {
        serde_json::to_writer(&mut lines, e).map_err(|err| Error::format(out, err))?;
        lines.push(b'\n');
    }
    write_atomic(&out.join("manifest.jsonl"), &lines)?;
    Ok(entries)
}
