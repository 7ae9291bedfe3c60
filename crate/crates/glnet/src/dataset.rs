//! Datasets on disk: `root/{split}/images/*.png` with same-named
//! `root/{split}/masks/*.png`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use glnet_core::data::{generate_lesion, generate_synthetic, Sample, SynthSpec};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{dimensions, read_mask, read_rgb, write_atomic, write_mask, write_rgb};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    /// File stem shared by the image and its mask.
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegDataset {
    pub root: PathBuf,
    pub split: String,
    pub classes: usize,
    /// Sorted by id.
    pub pairs: Vec<Pair>,
}

impl SegDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sample(&self, i: usize) -> Result<Sample<f32>> {
        let p = &self.pairs[i];
        let image = read_rgb(&p.image)?;
        let mask = read_mask(&p.mask)?;
        Sample::new(image, mask).map_err(|e| Error::Dataset(format!("{}: {e}", p.id)))
    }

    pub fn samples(&self) -> Result<Vec<Sample<f32>>> {
        (0..self.len()).map(|i| self.sample(i)).collect()
    }
}

/// PNG files of `dir` keyed by file stem.
fn png_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png || !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

/// Images of an inference input: `dir/images/*.png` when that directory
/// exists, else `dir/*.png`, sorted by stem.
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let images = dir.join("images");
    let dir = if images.is_dir() { images.as_path() } else { dir };
    Ok(png_files(dir)?.into_iter().collect())
}

/// Loads and validates `root/split`: every image needs a same-sized mask
/// with labels below `classes`.
pub fn load_dataset(root: &Path, split: &str, classes: usize) -> Result<SegDataset> {
    let base = root.join(split);
    let images = png_files(&base.join("images"))?;
    let masks = png_files(&base.join("masks"))?;
    if let Some((_, path)) = images.iter().find(|(id, _)| !masks.contains_key(*id)) {
        return Err(Error::Dataset(format!("image without mask: {}", path.display())));
    }
    if let Some((_, path)) = masks.iter().find(|(id, _)| !images.contains_key(*id)) {
        return Err(Error::Dataset(format!("mask without image: {}", path.display())));
    }
    let mut pairs = Vec::with_capacity(images.len());
    for (id, image) in images {
        let mask = masks[&id].clone();
        let (ih, iw) = dimensions(&image)?;
        let m = read_mask(&mask)?;
        if (m.h, m.w) != (ih, iw) {
            return Err(Error::Dataset(format!(
                "size mismatch: {} is {ih}x{iw}, {} is {}x{}",
                image.display(),
                mask.display(),
                m.h,
                m.w
            )));
        }
        if let Some(&bad) = m.data.iter().find(|&&v| v as usize >= classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {classes} classes in {}",
                mask.display()
            )));
        }
        pairs.push(Pair { id, image, mask });
    }
    Ok(SegDataset {
        root: root.to_path_buf(),
        split: split.to_string(),
        classes,
        pairs,
    })
}

/// What a synthetic split contains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SynthKind {
    /// Multi-class context benchmark.
    Context { spec: SynthSpec },
    /// Binary single-lesion images with foreground share drawn from
    /// `[min_fraction, max_fraction]`.
    Lesion {
        canvas: usize,
        min_fraction: f64,
        max_fraction: f64,
        seed: u64,
    },
}

impl SynthKind {
    pub fn classes(&self) -> usize {
        match self {
            SynthKind::Context { .. } => SynthSpec::CLASSES,
            SynthKind::Lesion { .. } => 2,
        }
    }

    pub fn validate(&self, patch: usize) -> Result<()> {
        match self {
            SynthKind::Context { spec } => Ok(spec.validate(patch)?),
            SynthKind::Lesion {
                canvas,
                min_fraction,
                max_fraction,
                ..
            } => {
                if *canvas < patch {
                    return Err(glnet_core::Error::CanvasTooSmall { canvas: *canvas, patch }.into());
                }
                if !(0.0 < *min_fraction && min_fraction <= max_fraction && *max_fraction < 1.0) {
                    return Err(Error::Config(format!(
                        "lesion fractions must satisfy 0 < {min_fraction} <= {max_fraction} < 1"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Sample `index` of the generator.
    pub fn generate(&self, index: usize) -> Result<Sample<f32>> {
        match self {
            SynthKind::Context { spec } => Ok(generate_synthetic(spec, index)?),
            SynthKind::Lesion {
                canvas,
                min_fraction,
                max_fraction,
                seed,
            } => {
                // golden-ratio sequence spreads fractions evenly over the range
                let u = (index as f64 * 0.618_033_988_749_895).fract();
                let fraction = min_fraction + u * (max_fraction - min_fraction);
                let s = seed.wrapping_mul(1_000_003).wrapping_add(index as u64);
                Ok(generate_lesion(*canvas, *canvas, fraction, s)?)
            }
        }
    }
}

/// Regeneration record written next to a synthetic split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub generator: SynthKind,
    pub classes: usize,
    /// Generator indices `first .. first + count`.
    pub first: usize,
    pub count: usize,
    pub ids: Vec<String>,
}

/// Writes samples `first .. first + count` to `root/split` with a
/// `manifest.json`.
pub fn write_synthetic(kind: &SynthKind, first: usize, count: usize, root: &Path, split: &str) -> Result<SynthManifest> {
    let base = root.join(split);
    let mut ids = Vec::with_capacity(count);
    for index in first..first + count {
        let sample = kind.generate(index)?;
        let id = format!("{index:05}");
        write_rgb(&base.join("images").join(format!("{id}.png")), &sample.image)?;
        write_mask(&base.join("masks").join(format!("{id}.png")), &sample.mask)?;
        ids.push(id);
    }
    let manifest = SynthManifest {
        generator: kind.clone(),
        classes: kind.classes(),
        first,
        count,
        ids,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&base.join("manifest.json"), &json)?;
    Ok(manifest)
}
