//! Full-image segmentation: patchwise two-branch inference with feature
//! sharing, logit stitching and mask emission, plus the single-branch
//! baselines.
//!
//! The source image is only ever read: the global input is produced by a
//! streaming downsample and patches are cropped one at a time, so in the
//! patch modes the model's working set depends on the patch size, not on the
//! source size. Merged logits accumulate in a caller-owned [`MergeBuffer`].

use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::downsample_image;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{crop_resize, Features, GlNet, Stage, TapCanvas};
use crate::ops::resize_bilinear;
use crate::scalar::Real;
use crate::tensor::{Mask, Shape, Tensor};
use crate::tiling::{build_grid, Blend, MergeBuffer, PixelRect, RelativeRect, TileGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Downsample, global forward, upsample.
    GlobalOnly,
    /// Local branch alone on every patch.
    LocalOnly,
    /// Global maps injected into the local branch, aggregated per patch.
    GlobalToLocal,
    /// Global→local plus merged local maps injected into the global branch.
    Bidirectional,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::GlobalOnly, Mode::LocalOnly, Mode::GlobalToLocal, Mode::Bidirectional];

    pub fn name(self) -> &'static str {
        match self {
            Mode::GlobalOnly => "global-only",
            Mode::LocalOnly => "local-only",
            Mode::GlobalToLocal => "glnet-g2l",
            Mode::Bidirectional => "glnet-bidir",
        }
    }

    /// Whether a model trained to `stage` can run in this mode.
    pub fn check(self, stage: Stage) -> Result<()> {
        let ok = match self {
            Mode::GlobalOnly => matches!(stage, Stage::Global | Stage::GlobalToLocal | Stage::Bidirectional),
            Mode::LocalOnly => stage == Stage::LocalOnly,
            Mode::GlobalToLocal => stage == Stage::GlobalToLocal,
            Mode::Bidirectional => stage == Stage::Bidirectional,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ModeMismatch {
                mode: self.name(),
                phase: match stage {
                    Stage::Untrained => "untrained",
                    Stage::Global => "global",
                    Stage::GlobalToLocal => "g2l",
                    Stage::Bidirectional => "bidir",
                    Stage::LocalOnly => "local",
                },
            })
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(alloc::format!("unknown mode {:?}", s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferConfig {
    pub patch: usize,
    pub overlap: usize,
}

impl InferConfig {
    pub fn grid(&self, h: usize, w: usize) -> Result<TileGrid> {
        build_grid(h, w, self.patch, self.patch, self.overlap)
    }
}

/// Stitched logits and the mask derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation<T> {
    pub logits: Tensor<T>,
    pub mask: Mask,
    pub grid: TileGrid,
}

fn global_input<T: Real>(model: &GlNet<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let cfg = model.config();
    downsample_image(image, cfg.input_h, cfg.input_w)
}

fn check_order(order: Option<&[usize]>, n: usize) -> Result<Vec<usize>> {
    match order {
        None => Ok((0..n).collect()),
        Some(o) => {
            let mut seen = vec![false; n];
            for &i in o {
                if i >= n || core::mem::replace(&mut seen[i], true) {
                    return Err(Error::IncompletePatchCover(alloc::format!(
                        "patch order is not a permutation of 0..{}",
                        n
                    )));
                }
            }
            if o.len() != n {
                return Err(Error::IncompletePatchCover(alloc::format!(
                    "patch order lists {} of {} patches",
                    o.len(),
                    n
                )));
            }
            Ok(o.to_vec())
        }
    }
}

/// Aggregated logits of one patch, resized to the patch.
fn aggregate<T: Real>(model: &GlNet<T>, local: &Features<T>, global: &Features<T>, rect: PixelRect, rel: RelativeRect) -> Result<Tensor<T>> {
    let last = model.config().last_tap();
    let lt = local.last_tap();
    let ls = lt.shape();
    let gt = crop_resize(global.last_tap(), rel, ls.h, ls.w, last)?;
    let mut g = Graph::new();
    let a = g.constant(lt.clone());
    let b = g.constant(gt);
    let out = model.agg.forward(&mut g, a, b, false)?;
    resize_bilinear(&g.take_value(out), rect.height, rect.width)
}

/// Runs `model` on `image` in `mode`, adding one logit patch per grid rect to
/// `buf`. `order` optionally fixes the patch processing order.
pub fn infer_into<T: Real>(
    model: &GlNet<T>,
    image: &Tensor<T>,
    mode: Mode,
    order: Option<&[usize]>,
    buf: &mut MergeBuffer<'_, T>,
) -> Result<()> {
    mode.check(model.stage)?;
    let grid = buf.grid();
    let s = image.shape();
    if s.h != grid.image_h || s.w != grid.image_w {
        return Err(Error::Shape(alloc::format!(
            "image {} against a grid for {}x{}",
            s,
            grid.image_h,
            grid.image_w
        )));
    }
    let order = check_order(order, grid.len())?;
    match mode {
        Mode::GlobalOnly => {
            let x = global_input(model, image)?;
            let f = model.context_branch().features(&x, &[])?;
            let full = resize_bilinear(&f.logits, s.h, s.w)?;
            for &i in &order {
                buf.accumulate(i, &full.crop(grid.rects[i])?)?;
            }
        }
        Mode::LocalOnly => {
            for &i in &order {
                let rect = grid.rects[i];
                let f = model.local.features(&image.crop(rect)?, &[])?;
                buf.accumulate(i, &resize_bilinear(&f.logits, rect.height, rect.width)?)?;
            }
        }
        Mode::GlobalToLocal | Mode::Bidirectional => {
            let x = global_input(model, image)?;
            let ctx = model.context_branch().features(&x, &[])?;
            let global = if mode == Mode::Bidirectional && model.plan.local_to_global() {
                let shared = model.shared_taps();
                let shapes = model.global_tap_shapes();
                let mut canvases: Vec<TapCanvas<T>> = shared.iter().map(|&l| TapCanvas::new(l, shapes[l])).collect();
                for &i in &order {
                    let rect = grid.rects[i];
                    let rel = grid.relative(i);
                    let inj = model.local_injection(&ctx, rel, rect.height, rect.width)?;
                    let f = model.local.features(&image.crop(rect)?, &inj)?;
                    for (canvas, &l) in canvases.iter_mut().zip(&shared) {
                        canvas.add(i, &f.taps[l], rel)?;
                    }
                }
                let mut inj = vec![None; shapes.len() - 1];
                for (canvas, &l) in canvases.into_iter().zip(&shared) {
                    inj[l] = Some(canvas.finish()?);
                }
                model.global.features(&x, &inj)?
            } else if mode == Mode::Bidirectional {
                model.global.features(&x, &[])?
            } else {
                ctx.clone()
            };
            for &i in &order {
                let rect = grid.rects[i];
                let inj = model.local_injection(&ctx, grid.relative(i), rect.height, rect.width)?;
                let f = model.local.features(&image.crop(rect)?, &inj)?;
                buf.accumulate(i, &aggregate(model, &f, &global, rect, grid.relative(i))?)?;
            }
        }
    }
    Ok(())
}

/// Segments `image`: stitched logits (mean over overlaps) and their argmax.
pub fn infer_image<T: Real>(model: &GlNet<T>, image: &Tensor<T>, mode: Mode, cfg: &InferConfig) -> Result<Segmentation<T>> {
    let s = image.shape();
    let grid = cfg.grid(s.h, s.w)?;
    let mut buf = MergeBuffer::new(&grid, model.config().classes, Blend::Average);
    infer_into(model, image, mode, None, &mut buf)?;
    let logits = buf.finish()?;
    let mask = logits.argmax_channels();
    Ok(Segmentation { logits, mask, grid })
}

/// Shape of the logits [`infer_image`] produces.
pub fn output_shape<T: Real>(model: &GlNet<T>, h: usize, w: usize) -> Shape {
    Shape::new(model.config().classes, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::model::{BranchConfig, SharePlan};
    use crate::tiling::merge;

    fn config() -> BranchConfig {
        BranchConfig {
            input_channels: 3,
            encoder: vec![4, 6, 8],
            convs_per_stage: 1,
            pyramid: 6,
            classes: 3,
            input_h: 32,
            input_w: 32,
            tap_stages: (0..4).collect(),
        }
    }

    /// A model with non-zero injection projections, as after training.
    fn trained(stage: Stage) -> GlNet<f64> {
        let mut m = GlNet::<f64>::new(config(), SharePlan::DEEP_BIDIR, 0.15, 2).unwrap();
        for branch in [&mut m.global, &mut m.local] {
            for l in 0..config().num_taps() - 1 {
                let (w, _) = branch.injection_params(l);
                let p = &mut branch.params_mut()[w];
                for (k, v) in p.data_mut().iter_mut().enumerate() {
                    *v = 0.05 * ((k % 7) as f64 - 3.0);
                }
            }
        }
        m.context = Some(m.global.clone());
        m.global.params_mut()[0].data_mut()[0] += 0.3;
        m.stage = stage;
        m
    }

    fn image(n: usize) -> Tensor<f64> {
        generate_synthetic(&SynthSpec::desk(n, 5), 0).unwrap().image.cast()
    }

    #[test]
    fn mode_rules() {
        assert!(Mode::GlobalOnly.check(Stage::Untrained).is_err());
        assert!(Mode::GlobalOnly.check(Stage::Bidirectional).is_ok());
        assert!(Mode::LocalOnly.check(Stage::GlobalToLocal).is_err());
        assert!(Mode::GlobalToLocal.check(Stage::Bidirectional).is_err());
        assert!(Mode::Bidirectional.check(Stage::GlobalToLocal).is_err());
        assert_eq!("glnet-bidir".parse::<Mode>().unwrap(), Mode::Bidirectional);
        assert!("glnet".parse::<Mode>().is_err());
        let m = trained(Stage::Global);
        let cfg = InferConfig { patch: 32, overlap: 8 };
        assert!(matches!(
            infer_image(&m, &image(64), Mode::GlobalToLocal, &cfg),
            Err(Error::ModeMismatch { .. })
        ));
    }

    #[test]
    fn single_patch_stitching_is_identity() {
        let m = trained(Stage::GlobalToLocal);
        let x = image(32);
        let cfg = InferConfig { patch: 32, overlap: 8 };
        let seg = infer_image(&m, &x, Mode::GlobalToLocal, &cfg).unwrap();
        let ctx = m.global.features(&x, &[]).unwrap();
        let inj = m.local_injection(&ctx, seg.grid.relative(0), 32, 32).unwrap();
        let f = m.local.features(&x, &inj).unwrap();
        let direct = aggregate(&m, &f, &ctx, seg.grid.rects[0], seg.grid.relative(0)).unwrap();
        assert_eq!(seg.logits, direct);
        assert_eq!(seg.mask, direct.argmax_channels());
    }

    #[test]
    fn patch_order_does_not_matter() {
        let x = image(80);
        let cfg = InferConfig { patch: 32, overlap: 8 };
        let grid = cfg.grid(80, 80).unwrap();
        let n = grid.len();
        let reversed: Vec<usize> = (0..n).rev().collect();
        let shuffled: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect();
        for (mode, stage) in [
            (Mode::GlobalToLocal, Stage::GlobalToLocal),
            (Mode::Bidirectional, Stage::Bidirectional),
            (Mode::LocalOnly, Stage::LocalOnly),
        ] {
            let m = trained(stage);
            let run = |order: Option<&[usize]>| {
                let mut buf = MergeBuffer::new(&grid, 3, Blend::Average);
                infer_into(&m, &x, mode, order, &mut buf).unwrap();
                buf.finish().unwrap()
            };
            let base = run(None);
            assert_eq!(base, run(Some(&reversed)));
            assert_eq!(base, run(Some(&shuffled)));
        }
        let m = trained(Stage::GlobalToLocal);
        let mut buf = MergeBuffer::new(&grid, 3, Blend::Average);
        assert!(infer_into(&m, &x, Mode::GlobalToLocal, Some(&[0, 0]), &mut buf).is_err());
    }

    #[test]
    fn zero_projection_reproduces_the_plain_local_branch() {
        let mut m = GlNet::<f64>::new(config(), SharePlan::DEEP_BIDIR, 0.15, 2).unwrap();
        m.stage = Stage::GlobalToLocal;
        let x = image(64);
        let cfg = InferConfig { patch: 32, overlap: 8 };
        let grid = cfg.grid(64, 64).unwrap();
        let ctx = m.global.features(&global_input(&m, &x).unwrap(), &[]).unwrap();
        for i in 0..grid.len() {
            let rect = grid.rects[i];
            let patch = x.crop(rect).unwrap();
            let inj = m.local_injection(&ctx, grid.relative(i), 32, 32).unwrap();
            assert!(inj.iter().all(|t| t.is_some()));
            let shared = m.local.features(&patch, &inj).unwrap();
            let plain = m.local.features(&patch, &[]).unwrap();
            assert_eq!(shared, plain);
        }
        // the local-only mode on the same weights runs the plain branch
        m.stage = Stage::LocalOnly;
        let seg = infer_image(&m, &x, Mode::LocalOnly, &cfg).unwrap();
        let patches: Vec<Tensor<f64>> = grid
            .rects
            .iter()
            .map(|&r| {
                let f = m.local.features(&x.crop(r).unwrap(), &[]).unwrap();
                resize_bilinear(&f.logits, r.height, r.width).unwrap()
            })
            .collect();
        assert_eq!(seg.logits, merge(&patches, &grid, Blend::Average).unwrap());
    }

    #[test]
    fn global_only_matches_upsampled_global_logits() {
        let m = trained(Stage::Global);
        let x = image(64);
        let cfg = InferConfig { patch: 32, overlap: 8 };
        let seg = infer_image(&m, &x, Mode::GlobalOnly, &cfg).unwrap();
        let f = m.context_branch().features(&global_input(&m, &x).unwrap(), &[]).unwrap();
        assert_eq!(seg.logits, resize_bilinear(&f.logits, 64, 64).unwrap());
        assert_eq!(seg.logits.shape(), output_shape(&m, 64, 64));
    }

    #[test]
    fn every_mode_covers_every_pixel() {
        let x = image(72);
        let cfg = InferConfig { patch: 32, overlap: 4 };
        for (mode, stage) in [
            (Mode::GlobalOnly, Stage::Global),
            (Mode::LocalOnly, Stage::LocalOnly),
            (Mode::GlobalToLocal, Stage::GlobalToLocal),
            (Mode::Bidirectional, Stage::Bidirectional),
        ] {
            let seg = infer_image(&trained(stage), &x, mode, &cfg).unwrap();
            assert_eq!((seg.mask.h, seg.mask.w), (72, 72));
            assert!(seg.logits.all_finite());
            assert!(seg.mask.max_label() < 3);
        }
    }
}
