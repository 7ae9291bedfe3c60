//! Two-stage segmentation for small foreground objects: a coarse global
//! pass, a foreground box relaxed until it holds about as much background
//! as foreground, and a fine patchwise pass inside the box.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{downsample_image, Sample};
use crate::error::Result;
use crate::inference::{infer_image, InferConfig, Mode};
use crate::model::GlNet;
use crate::scalar::Real;
use crate::tensor::{Mask, Tensor};
use crate::tiling::PixelRect;

pub const DEFAULT_TOLERANCE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FgBox {
    pub rect: PixelRect,
    /// Foreground over background pixels inside `rect` (infinite without
    /// background).
    pub ratio: f64,
    pub iterations: usize,
}

/// Global branch alone: downsample, forward, argmax, nearest upsample.
pub fn coarse_segment<T: Real>(model: &GlNet<T>, image: &Tensor<T>) -> Result<Mask> {
    Mode::GlobalOnly.check(model.stage)?;
    let cfg = model.config();
    let s = image.shape();
    let x = downsample_image(image, cfg.input_h, cfg.input_w)?;
    let f = model.context_branch().features(&x, &[])?;
    Ok(f.logits.argmax_channels().resize_nearest(s.h, s.w))
}

/// Summed-area table of foreground (non-zero) pixels.
struct Integral {
    w: usize,
    sums: Vec<u32>,
}

impl Integral {
    fn new(mask: &Mask) -> Self {
        let w = mask.w + 1;
        let mut sums = alloc::vec![0u32; (mask.h + 1) * w];
        for y in 0..mask.h {
            let mut row = 0u32;
            for x in 0..mask.w {
                row += u32::from(mask.at(y, x) != 0);
                sums[(y + 1) * w + x + 1] = sums[y * w + x + 1] + row;
            }
        }
        Integral { w, sums }
    }

    fn count(&self, r: PixelRect) -> u64 {
        let at = |y: usize, x: usize| u64::from(self.sums[y * self.w + x]);
        at(r.bottom(), r.right()) + at(r.top, r.left) - at(r.top, r.right()) - at(r.bottom(), r.left)
    }
}

fn ratio(fg: u64, area: usize) -> f64 {
    let bg = area as u64 - fg;
    if bg == 0 {
        f64::INFINITY
    } else {
        fg as f64 / bg as f64
    }
}

/// Tight bounding box of the non-zero pixels.
pub fn tight_box(mask: &Mask) -> Option<PixelRect> {
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..mask.h {
        for x in 0..mask.w {
            if mask.at(y, x) != 0 {
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
        }
    }
    (y0 != usize::MAX).then(|| PixelRect::new(y0, x0, y1 - y0, x1 - x0))
}

/// One growth step along an axis: one pixel per side, a clamped side's
/// share moved to the opposite side.
fn grow_axis(lo: usize, hi: usize, frame: usize) -> (usize, usize) {
    let mut want = 2usize;
    let (mut lo, mut hi) = (lo, hi);
    if lo > 0 {
        lo -= 1;
        want -= 1;
    }
    if hi < frame {
        hi += 1;
        want -= 1;
    }
    if want > 0 && lo > 0 {
        lo -= 1;
        want -= 1;
    }
    if want > 0 && hi < frame {
        hi += 1;
    }
    (lo, hi)
}

/// Grows the tight foreground box until the in-box foreground:background
/// ratio is at most `target_ratio · (1 + tolerance)` or the box fills the
/// image. Non-zero labels count as foreground. `None` when there is no
/// foreground.
pub fn relax_bbox(mask: &Mask, target_ratio: f64, tolerance: f64) -> Option<FgBox> {
    let mut rect = tight_box(mask)?;
    let integral = Integral::new(mask);
    let fg = integral.count(rect);
    let limit = target_ratio * (1.0 + tolerance);
    let mut iterations = 0;
    loop {
        let r = ratio(fg, rect.area());
        let full = rect.height == mask.h && rect.width == mask.w;
        if r <= limit || full {
            return Some(FgBox {
                rect,
                ratio: r,
                iterations,
            });
        }
        let (top, bottom) = grow_axis(rect.top, rect.bottom(), mask.h);
        let (left, right) = grow_axis(rect.left, rect.right(), mask.w);
        rect = PixelRect::new(top, left, bottom - top, right - left);
        iterations += 1;
    }
}

/// `rect` enlarged to at least `patch × patch`, centred and clamped to the
/// frame (never larger than the frame).
pub fn grow_to_patch(rect: PixelRect, patch: usize, h: usize, w: usize) -> PixelRect {
    let axis = |start: usize, len: usize, frame: usize| -> (usize, usize) {
        let target = len.max(patch).min(frame);
        let extra = target - len;
        let lo = start.saturating_sub(extra / 2 + extra % 2);
        let lo = lo.min(frame - target);
        (lo, target)
    };
    let (top, height) = axis(rect.top, rect.height, h);
    let (left, width) = axis(rect.left, rect.width, w);
    PixelRect::new(top, left, height, width)
}

/// Patchwise inference inside `fg_box` (grown to the patch size), pasted
/// into an all-background mask. Without a box, everything is background.
pub fn fine_segment<T: Real>(
    model: &GlNet<T>,
    image: &Tensor<T>,
    fg_box: Option<&FgBox>,
    mode: Mode,
    cfg: &InferConfig,
) -> Result<(Mask, Option<PixelRect>)> {
    let s = image.shape();
    let mut out = Mask::new(s.h, s.w);
    let Some(b) = fg_box else {
        return Ok((out, None));
    };
    b.rect.check_inside(s.h, s.w)?;
    let rect = grow_to_patch(b.rect, cfg.patch, s.h, s.w);
    let sub = image.crop(rect)?;
    let seg = infer_image(model, &sub, mode, cfg)?;
    out.paste(&seg.mask, rect.top, rect.left)?;
    Ok((out, Some(rect)))
}

/// Training pair for a fine-stage model: the sample cropped to its relaxed
/// ground-truth box, grown to the patch size. `None` without foreground.
pub fn crop_to_box<T: Real>(sample: &Sample<T>, patch: usize, tolerance: f64) -> Result<Option<Sample<T>>> {
    let Some(b) = relax_bbox(&sample.mask, 1.0, tolerance) else {
        return Ok(None);
    };
    let rect = grow_to_patch(b.rect, patch, sample.height(), sample.width());
    Ok(Some(Sample::new(sample.image.crop(rect)?, sample.mask.crop(rect)?)?))
}

/// Coarse pass with `coarse`, then the fine pass with `fine`.
pub fn coarse_to_fine<T: Real>(
    coarse: &GlNet<T>,
    fine: &GlNet<T>,
    image: &Tensor<T>,
    mode: Mode,
    cfg: &InferConfig,
    tolerance: f64,
) -> Result<(Mask, Option<FgBox>)> {
    let c = coarse_segment(coarse, image)?;
    let b = relax_bbox(&c, 1.0, tolerance);
    let (mask, _) = fine_segment(fine, image, b.as_ref(), mode, cfg)?;
    Ok((mask, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::data::generate_lesion;
    use crate::metrics::binary_iou;
    use crate::model::{BranchConfig, SharePlan, Stage};
    use proptest::prelude::*;

    fn square(n: usize, top: usize, left: usize, side: usize) -> Mask {
        let mut m = Mask::new(n, n);
        for y in top..top + side {
            for x in left..left + side {
                m.set(y, x, 1);
            }
        }
        m
    }

    #[test]
    fn centred_square_relaxes_to_ratio_one() {
        let b = relax_bbox(&square(1000, 450, 450, 100), 1.0, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(b.rect.height, b.rect.width);
        assert!((138..=146).contains(&b.rect.height), "{:?}", b);
        assert!(b.ratio <= 1.1 && b.ratio > 0.9);
        assert_eq!(b.iterations, (b.rect.height - 100) / 2);
    }

    #[test]
    fn degenerate_masks() {
        assert_eq!(relax_bbox(&Mask::new(20, 30), 1.0, 0.1), None);
        let b = relax_bbox(&Mask::filled(20, 30, 1), 1.0, 0.1).unwrap();
        assert_eq!(b.rect, PixelRect::full(20, 30));
        assert!(b.ratio.is_infinite());
        // a corner square grows away from the clamped sides
        let b = relax_bbox(&square(200, 0, 0, 20), 1.0, 0.1).unwrap();
        assert_eq!((b.rect.top, b.rect.left), (0, 0));
        assert!(b.ratio <= 1.1);
    }

    #[test]
    fn patch_growth_is_centred_and_clamped() {
        assert_eq!(grow_to_patch(PixelRect::new(50, 50, 10, 10), 32, 200, 200), PixelRect::new(39, 39, 32, 32));
        assert_eq!(grow_to_patch(PixelRect::new(0, 190, 10, 10), 32, 200, 200), PixelRect::new(0, 168, 32, 32));
        assert_eq!(grow_to_patch(PixelRect::new(5, 5, 60, 60), 32, 200, 200), PixelRect::new(5, 5, 60, 60));
        assert_eq!(grow_to_patch(PixelRect::new(0, 0, 5, 5), 32, 20, 40), PixelRect::new(0, 0, 20, 32));
    }

    fn model(stage: Stage) -> GlNet<f32> {
        let cfg = BranchConfig {
            input_channels: 3,
            encoder: vec![4, 6, 8],
            convs_per_stage: 1,
            pyramid: 6,
            classes: 2,
            input_h: 32,
            input_w: 32,
            tap_stages: (0..4).collect(),
        };
        let mut m = GlNet::new(cfg, SharePlan::DEEP_BIDIR, 0.15, 3).unwrap();
        m.stage = stage;
        m
    }

    #[test]
    fn constant_logits_give_constant_masks() {
        let mut m = model(Stage::Global);
        let x = generate_lesion(96, 96, 0.05, 1).unwrap().image;
        let features = m.global.feature_params();
        let head: Vec<usize> = (0..m.global.params().len()).filter(|i| !features.contains(i)).collect();
        // the classifier bias alone decides the class
        let (w, b) = (head[0], head[1]);
        m.global.params_mut()[w].data_mut().fill(0.0);
        m.global.params_mut()[b].data_mut().copy_from_slice(&[1.0, -1.0]);
        assert_eq!(coarse_segment(&m, &x).unwrap(), Mask::new(96, 96));
        m.global.params_mut()[b].data_mut().copy_from_slice(&[-1.0, 1.0]);
        assert_eq!(coarse_segment(&m, &x).unwrap(), Mask::filled(96, 96, 1));
        assert!(coarse_segment(&model(Stage::Untrained), &x).is_err());
    }

    #[test]
    fn blob_survives_the_coarse_round_trip() {
        let m = square(128, 40, 40, 48);
        let back = m.resize_nearest(32, 32).resize_nearest(128, 128);
        assert!(binary_iou(&back, &m).unwrap() >= 0.8);
    }

    #[test]
    fn fine_stage_stays_inside_the_box() {
        let m = model(Stage::GlobalToLocal);
        let sample = generate_lesion(96, 96, 0.05, 2).unwrap();
        let cfg = InferConfig { patch: 32, overlap: 8 };
        let b = relax_bbox(&sample.mask, 1.0, 0.1).unwrap();
        let (mask, rect) = fine_segment(&m, &sample.image, Some(&b), Mode::GlobalToLocal, &cfg).unwrap();
        let rect = rect.unwrap();
        for y in 0..96 {
            for x in 0..96 {
                if !rect.contains(y, x) {
                    assert_eq!(mask.at(y, x), 0);
                }
            }
        }
        let (empty, none) = fine_segment(&m, &sample.image, None, Mode::GlobalToLocal, &cfg).unwrap();
        assert_eq!((empty, none), (Mask::new(96, 96), None));
        // a full-image box is plain inference
        let full = FgBox { rect: PixelRect::full(96, 96), ratio: 0.0, iterations: 0 };
        let (mask, _) = fine_segment(&m, &sample.image, Some(&full), Mode::GlobalToLocal, &cfg).unwrap();
        assert_eq!(mask, infer_image(&m, &sample.image, Mode::GlobalToLocal, &cfg).unwrap().mask);
    }

    #[test]
    fn fine_training_crops_hold_the_lesion() {
        let s = generate_lesion(120, 120, 0.04, 3).unwrap();
        let c = crop_to_box(&s, 32, 0.1).unwrap().unwrap();
        assert_eq!(c.mask.count(1), s.mask.count(1));
        let empty = Sample::new(s.image.clone(), Mask::new(120, 120)).unwrap();
        assert!(crop_to_box(&empty, 32, 0.1).unwrap().is_none());
    }

    proptest! {
        #[test]
        fn relaxed_box_contains_foreground_and_improves_ratio(
            n in 20usize..80,
            seeds in proptest::collection::vec((0usize..80, 0usize..80, 1usize..12), 1..4),
        ) {
            let mut m = Mask::new(n, n);
            for &(y, x, s) in &seeds {
                for yy in (y % n)..((y % n) + s).min(n) {
                    for xx in (x % n)..((x % n) + s).min(n) {
                        m.set(yy, xx, 1);
                    }
                }
            }
            let fg = m.count(1);
            let b = relax_bbox(&m, 1.0, 0.1).unwrap();
            let tight = tight_box(&m).unwrap();
            prop_assert!(b.rect.top <= tight.top && b.rect.left <= tight.left);
            prop_assert!(b.rect.bottom() >= tight.bottom() && b.rect.right() >= tight.right());
            prop_assert!(b.rect.bottom() <= n && b.rect.right() <= n);
            let whole = ratio(fg as u64, n * n);
            if 2 * fg < n * n {
                prop_assert!(b.ratio >= whole);
                if ratio(fg as u64, tight.area()) > 1.1 {
                    prop_assert!(b.ratio <= 1.1);
                }
            }
        }
    }
}
