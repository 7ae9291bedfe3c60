//! Overlapped patch decomposition of images and feature maps, the inverse
//! merge, and the relative-coordinate mapping used to move a patch rectangle
//! between frames of different resolution.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};

/// Pixel rectangle: `(top, left, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PixelRect {
    pub const fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        PixelRect {
            top,
            left,
            height,
            width,
        }
    }

    pub const fn full(h: usize, w: usize) -> Self {
        PixelRect::new(0, 0, h, w)
    }

    pub const fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub const fn right(&self) -> usize {
        self.left + self.width
    }

    pub const fn area(&self) -> usize {
        self.height * self.width
    }

    pub const fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.bottom() && x >= self.left && x < self.right()
    }

    pub fn check_inside(&self, h: usize, w: usize) -> Result<()> {
        if self.bottom() > h || self.right() > w {
            return Err(Error::OutOfBounds {
                rect: (self.top, self.left, self.height, self.width),
                h,
                w,
            });
        }
        Ok(())
    }
}

/// A rectangle expressed as fractions of its frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeRect {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

impl RelativeRect {
    pub const FULL: RelativeRect = RelativeRect {
        top: 0.0,
        left: 0.0,
        height: 1.0,
        width: 1.0,
    };
}

// Absorbs representation error of `k / n * n` so exact pixel boundaries
// survive a round trip.
const SNAP: f64 = 1e-9;

pub fn rect_to_relative(rect: PixelRect, frame_h: usize, frame_w: usize) -> Result<RelativeRect> {
    if frame_h == 0 || frame_w == 0 {
        return Err(Error::ZeroFrame);
    }
    rect.check_inside(frame_h, frame_w)?;
    let (fh, fw) = (frame_h as f64, frame_w as f64);
    Ok(RelativeRect {
        top: rect.top as f64 / fh,
        left: rect.left as f64 / fw,
        height: rect.height as f64 / fh,
        width: rect.width as f64 / fw,
    })
}

/// Maps a relative rectangle onto a `frame_h × frame_w` frame.
///
/// The origin is floored and the far edge ceiled, then the result is clamped
/// to the frame, so the pixel rectangle always covers the relative region.
pub fn relative_to_rect(rel: RelativeRect, frame_h: usize, frame_w: usize) -> Result<PixelRect> {
    if frame_h == 0 || frame_w == 0 {
        return Err(Error::ZeroFrame);
    }
    let axis = |start: f64, extent: f64, frame: usize| -> (usize, usize) {
        let f = frame as f64;
        let lo = Float::floor(start * f + SNAP).max(0.0) as usize;
        let hi = (Float::ceil((start + extent) * f - SNAP).max(0.0) as usize).min(frame);
        let lo = lo.min(frame.saturating_sub(1));
        (lo, hi.max(lo))
    };
    let (top, bottom) = axis(rel.top, rel.height, frame_h);
    let (left, right) = axis(rel.left, rel.width, frame_w);
    Ok(PixelRect::new(top, left, bottom - top, right - left))
}

/// Deterministic overlapped tiling of an image, row-major by `(top, left)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub image_h: usize,
    pub image_w: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub overlap: usize,
    pub row_starts: Vec<usize>,
    pub col_starts: Vec<usize>,
    pub rects: Vec<PixelRect>,
}

fn axis_starts(image: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut starts = vec![0];
    loop {
        let last = *starts.last().expect("starts is never empty");
        if last + patch >= image {
            break;
        }
        starts.push((last + stride).min(image - patch));
    }
    starts
}

/// Builds the patch grid: starts at `0, stride, 2·stride, …` with the last
/// start clamped to `image − patch`.
pub fn build_grid(
    image_h: usize,
    image_w: usize,
    patch_h: usize,
    patch_w: usize,
    overlap: usize,
) -> Result<TileGrid> {
    if patch_h > image_h || patch_w > image_w {
        return Err(Error::PatchExceedsImage {
            patch_h,
            patch_w,
            image_h,
            image_w,
        });
    }
    let min_patch = patch_h.min(patch_w);
    if overlap >= min_patch {
        return Err(Error::DegenerateStride {
            overlap,
            patch: min_patch,
        });
    }
    let row_starts = axis_starts(image_h, patch_h, patch_h - overlap);
    let col_starts = axis_starts(image_w, patch_w, patch_w - overlap);
    let rects = row_starts
        .iter()
        .flat_map(|&top| {
            col_starts
                .iter()
                .map(move |&left| PixelRect::new(top, left, patch_h, patch_w))
        })
        .collect();
    Ok(TileGrid {
        image_h,
        image_w,
        patch_h,
        patch_w,
        overlap,
        row_starts,
        col_starts,
        rects,
    })
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.row_starts.len()
    }

    pub fn cols(&self) -> usize {
        self.col_starts.len()
    }

    /// Row and column of patch `index` in the grid.
    pub fn position(&self, index: usize) -> (usize, usize) {
        (index / self.cols(), index % self.cols())
    }

    pub fn relative(&self, index: usize) -> RelativeRect {
        rect_to_relative(self.rects[index], self.image_h, self.image_w)
            .expect("grid rects lie inside the image")
    }

    /// Crops every patch of `array`, in grid order.
    pub fn crop_all<T: Real>(&self, array: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_frame(array.shape())?;
        self.rects.iter().map(|&r| array.crop(r)).collect()
    }

    fn check_frame(&self, s: Shape) -> Result<()> {
        if s.h != self.image_h || s.w != self.image_w {
            return Err(Error::Shape(alloc::format!(
                "array {}x{} does not match grid frame {}x{}",
                s.h,
                s.w,
                self.image_h,
                self.image_w
            )));
        }
        Ok(())
    }
}

/// How overlapping patch values are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Blend {
    /// Arithmetic mean of every patch covering the pixel.
    Average,
    /// The value of the patch whose center is nearest (ties: lowest index).
    CenterPriority,
}

/// Max number of starts covering any coordinate of one axis.
fn max_cover(starts: &[usize], patch: usize) -> usize {
    (0..starts.len())
        .map(|i| starts[i..].iter().take_while(|&&s| s < starts[i] + patch).count())
        .max()
        .unwrap_or(1)
}

/// Caller-owned accumulator that merges per-patch arrays into a full frame.
///
/// In average mode each patch writes into a slot chosen by its grid row and
/// column residues, and the final mean sums the slots in a fixed order, so the
/// result is bit-identical whatever order patches arrive in.
pub struct MergeBuffer<'g, T> {
    grid: &'g TileGrid,
    channels: usize,
    blend: Blend,
    slots_r: usize,
    slots_c: usize,
    values: Vec<T>,
    filled: Vec<bool>,
    owner: Vec<u32>,
}

impl<'g, T: Real> MergeBuffer<'g, T> {
    pub fn new(grid: &'g TileGrid, channels: usize, blend: Blend) -> Self {
        let plane = grid.image_h * grid.image_w;
        let (slots_r, slots_c, values, filled, owner) = match blend {
            Blend::Average => {
                let sr = max_cover(&grid.row_starts, grid.patch_h);
                let sc = max_cover(&grid.col_starts, grid.patch_w);
                let n = sr * sc;
                (
                    sr,
                    sc,
                    vec![T::zero(); n * channels * plane],
                    vec![false; n * plane],
                    Vec::new(),
                )
            }
            Blend::CenterPriority => (
                1,
                1,
                vec![T::zero(); channels * plane],
                Vec::new(),
                vec![u32::MAX; plane],
            ),
        };
        MergeBuffer {
            grid,
            channels,
            blend,
            slots_r,
            slots_c,
            values,
            filled,
            owner,
        }
    }

    pub fn grid(&self) -> &'g TileGrid {
        self.grid
    }

    /// Clears every accumulated patch, keeping the allocation.
    pub fn reset(&mut self) {
        self.values.fill(T::zero());
        self.filled.fill(false);
        self.owner.fill(u32::MAX);
    }

    /// Adds the array predicted for patch `index`.
    pub fn accumulate(&mut self, index: usize, patch: &Tensor<T>) -> Result<()> {
        let grid = self.grid;
        let rect = *grid.rects.get(index).ok_or_else(|| {
            Error::IncompletePatchCover(alloc::format!("patch index {} outside grid", index))
        })?;
        let ps = patch.shape();
        if ps.c != self.channels || ps.h != rect.height || ps.w != rect.width {
            return Err(Error::Shape(alloc::format!(
                "patch {} does not match {}x{}x{}",
                ps,
                self.channels,
                rect.height,
                rect.width
            )));
        }
        let (h, w) = (grid.image_h, grid.image_w);
        let plane = h * w;
        match self.blend {
            Blend::Average => {
                let (r, c) = grid.position(index);
                let slot = (r % self.slots_r) * self.slots_c + c % self.slots_c;
                let base = slot * self.channels * plane;
                for ch in 0..self.channels {
                    for y in 0..rect.height {
                        let dst = base + ch * plane + (rect.top + y) * w + rect.left;
                        let src = &patch.channel(ch)[y * rect.width..(y + 1) * rect.width];
                        self.values[dst..dst + rect.width].copy_from_slice(src);
                    }
                }
                for y in 0..rect.height {
                    let dst = slot * plane + (rect.top + y) * w + rect.left;
                    self.filled[dst..dst + rect.width].fill(true);
                }
            }
            Blend::CenterPriority => {
                let centre = |i: usize| {
                    let r = grid.rects[i];
                    (2 * r.top + r.height, 2 * r.left + r.width)
                };
                let dist = |i: usize, y: usize, x: usize| {
                    let (cy, cx) = centre(i);
                    let dy = (2 * y + 1).abs_diff(cy);
                    let dx = (2 * x + 1).abs_diff(cx);
                    (dy * dy + dx * dx, i)
                };
                for y in rect.top..rect.bottom() {
                    for x in rect.left..rect.right() {
                        let p = y * w + x;
                        let cur = self.owner[p];
                        let wins = cur == u32::MAX || dist(index, y, x) < dist(cur as usize, y, x);
                        if wins {
                            self.owner[p] = index as u32;
                            for ch in 0..self.channels {
                                self.values[ch * plane + p] =
                                    patch.at(ch, y - rect.top, x - rect.left);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Produces the merged frame; fails if a pixel received no patch.
    pub fn finish(&self) -> Result<Tensor<T>> {
        let (h, w) = (self.grid.image_h, self.grid.image_w);
        let plane = h * w;
        let shape = Shape::new(self.channels, h, w);
        match self.blend {
            Blend::Average => {
                let slots = self.slots_r * self.slots_c;
                let mut out = Tensor::zeros(shape);
                let data = out.data_mut();
                for p in 0..plane {
                    // running mean: identical contributions reproduce the value exactly
                    let mut count = 0usize;
                    for s in 0..slots {
                        if self.filled[s * plane + p] {
                            count += 1;
                            let k = T::from_usize(count).expect("small count");
                            for ch in 0..self.channels {
                                let v = self.values[(s * self.channels + ch) * plane + p];
                                let m = &mut data[ch * plane + p];
                                *m = if count == 1 { v } else { *m + (v - *m) / k };
                            }
                        }
                    }
                    if count == 0 {
                        return Err(Error::IncompletePatchCover(alloc::format!(
                            "pixel ({}, {}) received no patch",
                            p / w,
                            p % w
                        )));
                    }
                }
                Ok(out)
            }
            Blend::CenterPriority => {
                if let Some(p) = self.owner.iter().position(|&o| o == u32::MAX) {
                    return Err(Error::IncompletePatchCover(alloc::format!(
                        "pixel ({}, {}) received no patch",
                        p / w,
                        p % w
                    )));
                }
                Tensor::from_vec(shape, self.values.clone())
            }
        }
    }
}

/// Merges `patches` (one per grid rect, in grid order) into a full frame.
pub fn merge<T: Real>(patches: &[Tensor<T>], grid: &TileGrid, blend: Blend) -> Result<Tensor<T>> {
    if patches.len() != grid.len() {
        return Err(Error::Shape(alloc::format!(
            "{} patches for a grid of {}",
            patches.len(),
            grid.len()
        )));
    }
    let channels = patches.first().map(|p| p.shape().c).unwrap_or(1);
    let mut buf = MergeBuffer::new(grid, channels, blend);
    for (i, p) in patches.iter().enumerate() {
        buf.accumulate(i, p)?;
    }
    buf.finish()
}
