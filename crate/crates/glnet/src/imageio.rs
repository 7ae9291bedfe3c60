//! PNG images and masks, and crash-safe file writes.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use glnet_core::data::{image_from_rgb8, image_to_rgb8};
use glnet_core::{Mask, Tensor};
use image::codecs::png::PngEncoder;
use image::{ColorType, DynamicImage, ImageEncoder};

use crate::error::{Error, Result};

/// `path` with `.partial` appended.
pub fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

/// Writes to `<path>.partial`, then renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let tmp = partial_path(path);
    fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(Error::io(path))?
        .with_guessed_format()
        .map_err(Error::io(path))?
        .decode()
        .map_err(|e| Error::format(path, e))
}

/// Image dimensions from the file header, without decoding pixels.
pub fn dimensions(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::format(path, e))?;
    Ok((h as usize, w as usize))
}

fn encode(path: &Path, pixels: &[u8], w: usize, h: usize, color: ColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(Cursor::new(&mut out))
        .write_image(pixels, w as u32, h as u32, color.into())
        .map_err(|e| Error::format(path, e))?;
    Ok(out)
}

/// Reads an image as a `3 × h × w` tensor in [0, 1].
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(image_from_rgb8(h as usize, w as usize, img.as_raw())?)
}

pub fn write_rgb(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.c != 3 {
        return Err(Error::format(path, format!("expected an RGB tensor, got {}", s)));
    }
    write_atomic(path, &encode(path, &image_to_rgb8(image), s.w, s.h, ColorType::Rgb8)?)
}

/// Reads a single-channel mask of class indices.
pub fn read_mask(path: &Path) -> Result<Mask> {
    match open(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            Ok(Mask::from_vec(h as usize, w as usize, img.into_raw())?)
        }
        other => Err(Error::format(
            path,
            format!("mask must be 8-bit single-channel, found {:?}", other.color()),
        )),
    }
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let bytes = encode(path, &mask.data, mask.w, mask.h, ColorType::L8)?;
    write_atomic(path, &bytes)
}
