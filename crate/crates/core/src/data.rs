//! Samples, the low-resolution / patch decomposition of a dataset, and the
//! synthetic benchmark generators.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Mask, Shape, Tensor};
use crate::tiling::TileGrid;

/// An RGB image (`3×H×W`, values in `[0, 1]`) with its class-index mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub mask: Mask,
}

impl<T: Real> Sample<T> {
    pub fn new(image: Tensor<T>, mask: Mask) -> Result<Self> {
        let s = image.shape();
        if s.h != mask.h || s.w != mask.w {
            return Err(Error::Shape(alloc::format!(
                "image {} with a {}x{} mask",
                s,
                mask.h,
                mask.w
            )));
        }
        Ok(Sample { image, mask })
    }

    pub fn height(&self) -> usize {
        self.mask.h
    }

    pub fn width(&self) -> usize {
        self.mask.w
    }
}

/// Interleaved 8-bit RGB to a planar `3×H×W` tensor in `[0, 1]`.
pub fn image_from_rgb8<T: Real>(h: usize, w: usize, rgb: &[u8]) -> Result<Tensor<T>> {
    if rgb.len() != 3 * h * w {
        return Err(Error::Shape(alloc::format!(
            "{} bytes for a {}x{} RGB image",
            rgb.len(),
            h,
            w
        )));
    }
    let full = T::lit(255.0);
    Ok(Tensor::from_fn(Shape::new(3, h, w), |c, y, x| {
        T::from_u8(rgb[(y * w + x) * 3 + c]).expect("byte fits") / full
    }))
}

/// Planar tensor to interleaved 8-bit RGB (values are clamped and rounded).
pub fn image_to_rgb8<T: Real>(image: &Tensor<T>) -> Vec<u8> {
    let s = image.shape();
    let mut out = vec![0u8; 3 * s.plane()];
    for c in 0..s.c.min(3) {
        for (p, &v) in image.channel(c).iter().enumerate() {
            let v = v.to_f64().unwrap_or(0.0).clamp(0.0, 1.0);
            out[p * 3 + c] = Float::round(v * 255.0) as u8;
        }
    }
    out
}

/// Separable triangle-filter weights for one axis of a downsample.
struct AxisFilter {
    start: Vec<usize>,
    weights: Vec<Vec<f64>>,
}

impl AxisFilter {
    fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let support = scale.max(1.0);
        let mut start = Vec::with_capacity(output);
        let mut weights = Vec::with_capacity(output);
        for i in 0..output {
            let centre = (i as f64 + 0.5) * scale;
            let lo = Float::floor(centre - support).max(0.0) as usize;
            let hi = (Float::ceil(centre + support) as usize).min(input);
            let mut w: Vec<f64> = (lo..hi)
                .map(|j| (1.0 - Float::abs((j as f64 + 0.5 - centre) / support)).max(0.0))
                .collect();
            let total: f64 = w.iter().sum();
            for v in &mut w {
                *v /= total;
            }
            start.push(lo);
            weights.push(w);
        }
        AxisFilter { start, weights }
    }
}

/// Antialiased bilinear (triangle filter) downsample, streamed one output row
/// at a time to `sink(channel, row, values)`.
///
/// Working memory is one output row per channel, whatever the source size.
pub fn downsample_image_into<T: Real>(
    image: &Tensor<T>,
    h: usize,
    w: usize,
    mut sink: impl FnMut(usize, usize, &[T]),
) -> Result<()> {
    let s = image.shape();
    if h == 0 || w == 0 || s.h == 0 || s.w == 0 {
        return Err(Error::ZeroFrame);
    }
    if h > s.h || w > s.w {
        return Err(Error::Config(alloc::format!(
            "cannot downsample {}x{} to the larger {}x{}",
            s.h,
            s.w,
            h,
            w
        )));
    }
    let fy = AxisFilter::new(s.h, h);
    let fx = AxisFilter::new(s.w, w);
    let mut acc = vec![0.0f64; w];
    let mut row = vec![T::zero(); w];
    for c in 0..s.c {
        let plane = image.channel(c);
        for y in 0..h {
            acc.fill(0.0);
            for (dy, &wy) in fy.weights[y].iter().enumerate() {
                let src = &plane[(fy.start[y] + dy) * s.w..(fy.start[y] + dy + 1) * s.w];
                for (x, a) in acc.iter_mut().enumerate() {
                    let taps = &src[fx.start[x]..fx.start[x] + fx.weights[x].len()];
                    let v: f64 = taps
                        .iter()
                        .zip(&fx.weights[x])
                        .map(|(p, wx)| p.to_f64().unwrap_or(0.0) * wx)
                        .sum();
                    *a += wy * v;
                }
            }
            for (r, a) in row.iter_mut().zip(&acc) {
                *r = T::lit(*a);
            }
            sink(c, y, &row);
        }
    }
    Ok(())
}

pub fn downsample_image<T: Real>(image: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.h == h && s.w == w {
        return Ok(image.clone());
    }
    let mut out = Tensor::zeros(Shape::new(s.c, h, w));
    downsample_image_into(image, h, w, |c, y, row| {
        let at = (c * h + y) * w;
        out.data_mut()[at..at + w].copy_from_slice(row);
    })?;
    Ok(out)
}

/// The downsampled pair `(I^lr, S^lr)`: filtered image, nearest-neighbour mask.
pub fn make_lowres<T: Real>(sample: &Sample<T>, h: usize, w: usize) -> Result<Sample<T>> {
    let image = downsample_image(&sample.image, h, w)?;
    let mask = sample.mask.resize_nearest(h, w);
    Sample::new(image, mask)
}

/// Every patch of `grid`, in grid order.
pub fn make_patches<T: Real>(sample: &Sample<T>, grid: &TileGrid) -> Result<Vec<Sample<T>>> {
    if grid.image_h != sample.height() || grid.image_w != sample.width() {
        return Err(Error::Shape(alloc::format!(
            "grid for {}x{} applied to a {}x{} sample",
            grid.image_h,
            grid.image_w,
            sample.height(),
            sample.width()
        )));
    }
    grid.rects
        .iter()
        .map(|&r| Sample::new(sample.image.crop(r)?, sample.mask.crop(r)?))
        .collect()
}

/// Parameters of the synthetic context benchmark.
///
/// The canvas is split in two halves (left/right or top/bottom, per image).
/// Each half's open background carries one of two colour tints, and every
/// region whose centroid lies in that half takes class `1 + tint`. Regions of
/// both classes share one texture generator, so a window that sees no open
/// background cannot tell them apart. Region outlines carry a fine radial
/// jitter, and small holes and specks are scattered around, all below the
/// resolution the whole canvas keeps after downsampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub canvas: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    /// Region radius range as fractions of the canvas side.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Peak radial jitter of region outlines, in pixels.
    pub jag_amplitude: f64,
    /// Wavelength of the outline jitter along the boundary, in pixels.
    pub jag_wavelength: f64,
    /// Approximate share of region area punched out as holes.
    pub hole_fraction: f64,
    /// Approximate share of open background covered by specks.
    pub speck_fraction: f64,
    /// Radius range of holes and specks, in pixels.
    pub island_radius: (f64, f64),
    /// Colour offset of the background tints.
    pub tint: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub const CLASSES: usize = 3;

    pub fn desk(canvas: usize, seed: u64) -> Self {
        SynthSpec {
            canvas,
            min_regions: 2,
            max_regions: 3,
            min_radius: 0.11,
            max_radius: 0.19,
            jag_amplitude: 5.0,
            jag_wavelength: 14.0,
            hole_fraction: 0.2,
            speck_fraction: 0.06,
            island_radius: (3.0, 6.0),
            tint: 0.1,
            seed,
        }
    }

    /// Checks the spec against the patch size it will be cut into.
    pub fn validate(&self, patch: usize) -> Result<()> {
        if self.canvas < patch {
            return Err(Error::CanvasTooSmall {
                canvas: self.canvas,
                patch,
            });
        }
        let ok = self.min_regions >= 1
            && self.min_regions <= self.max_regions
            && self.min_radius > 0.0
            && self.min_radius <= self.max_radius
            && self.max_radius < 0.25
            && self.jag_amplitude >= 0.0
            && self.jag_wavelength > 0.0
            && (0.0..0.6).contains(&self.hole_fraction)
            && (0.0..0.6).contains(&self.speck_fraction)
            && self.island_radius.0 > 0.0
            && self.island_radius.0 <= self.island_radius.1
            && (0.0..=0.3).contains(&self.tint);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(alloc::format!("invalid synthetic spec {:?}", self)))
        }
    }
}

struct Region {
    cy: f64,
    cx: f64,
    radius: f64,
    /// (frequency, amplitude in px, phase)
    harmonics: Vec<(f64, f64, f64)>,
    class: u8,
}

impl Region {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let d2 = dy * dy + dx * dx;
        let reach = self.radius + self.harmonics.iter().map(|h| Float::abs(h.1)).sum::<f64>();
        if d2 > reach * reach {
            return false;
        }
        let theta = Float::atan2(dy, dx);
        let r = self.radius
            + self
                .harmonics
                .iter()
                .map(|&(f, a, p)| a * Float::sin(f * theta + p))
                .sum::<f64>();
        d2 < r * r
    }
}

fn disc(cy: f64, cx: f64, r: f64, h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
    let y0 = Float::floor(cy - r).max(0.0) as usize;
    let y1 = (Float::ceil(cy + r).max(0.0) as usize).min(h);
    let x0 = Float::floor(cx - r).max(0.0) as usize;
    let x1 = (Float::ceil(cx + r).max(0.0) as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            if dy * dy + dx * dx < r * r {
                f(y, x);
            }
        }
    }
}

/// Noise field: `0` white, otherwise box-blurred with the given radius.
fn noise(rng: &mut ChaCha8Rng, h: usize, w: usize, blur: usize) -> Vec<f64> {
    let white: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>() - 0.5).collect();
    if blur == 0 {
        return white;
    }
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        let norm = 1.0 / (2 * blur + 1) as f64;
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in 0..=2 * blur {
                    let (yy, xx) = if horizontal {
                        (y, (x + d).saturating_sub(blur).min(w - 1))
                    } else {
                        ((y + d).saturating_sub(blur).min(h - 1), x)
                    };
                    s += src[yy * w + xx];
                }
                out[y * w + x] = s * norm;
            }
        }
        out
    };
    let blurred = pass(&pass(&white, true), false);
    // rescale so the blurred field keeps roughly unit range
    let gain = Float::sqrt((2 * blur + 1) as f64);
    blurred.into_iter().map(|v| v * gain).collect()
}

fn quantise(v: f64) -> f32 {
    Float::round(v.clamp(0.0, 1.0) * 255.0) as f32 / 255.0
}

/// Generates sample `index` of the benchmark described by `spec`.
pub fn generate_synthetic(spec: &SynthSpec, index: usize) -> Result<Sample<f32>> {
    spec.validate(1)?;
    let n = spec.canvas;
    let nf = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));

    let vertical_split = rng.random::<bool>();
    let tints = [rng.random_range(0..2u8), rng.random_range(0..2u8)];
    let half_of = |y: f64, x: f64| -> usize {
        let v = if vertical_split { x } else { y };
        usize::from(v >= nf / 2.0)
    };

    let mut regions = Vec::new();
    for half in 0..2 {
        let count = rng.random_range(spec.min_regions..=spec.max_regions);
        for _ in 0..count {
            let radius = rng.random_range(spec.min_radius..=spec.max_radius) * nf;
            let reach = radius * 1.08 + spec.jag_amplitude * 2.0;
            // along the split axis the region stays inside its half
            let lo = half as f64 * nf / 2.0 + reach;
            let hi = (half as f64 + 1.0) * nf / 2.0 - reach;
            let along = if lo < hi { rng.random_range(lo..hi) } else { (lo + hi) / 2.0 };
            let across = rng.random_range(radius * 0.6..nf - radius * 0.6);
            let (cy, cx) = if vertical_split { (across, along) } else { (along, across) };
            let mut harmonics = vec![
                (2.0, radius * 0.06, rng.random_range(0.0..6.3)),
                (3.0, radius * 0.04, rng.random_range(0.0..6.3)),
            ];
            if spec.jag_amplitude > 0.0 {
                let f1 = Float::round(2.0 * core::f64::consts::PI * radius / spec.jag_wavelength);
                let f2 = Float::round(f1 * 1.7);
                harmonics.push((f1, spec.jag_amplitude * 0.6, rng.random_range(0.0..6.3)));
                harmonics.push((f2, spec.jag_amplitude * 0.4, rng.random_range(0.0..6.3)));
            }
            regions.push(Region {
                cy,
                cx,
                radius,
                harmonics,
                class: 1 + tints[half],
            });
        }
    }

    let mut mask = Mask::new(n, n);
    for y in 0..n {
        for x in 0..n {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            if let Some(r) = regions.iter().find(|r| r.contains(py, px)) {
                mask.set(y, x, r.class);
            }
        }
    }
    // 0 = open background, 1 = region, 2 = hole (untinted background)
    let mut kind: Vec<u8> = mask.data.iter().map(|&c| u8::from(c != 0)).collect();

    let region_area = kind.iter().filter(|&&k| k == 1).count() as f64;
    let open_area = nf * nf - region_area;
    let (r0, r1) = spec.island_radius;
    let mean_area = core::f64::consts::PI * (r0 * r0 + r0 * r1 + r1 * r1) / 3.0;
    let holes = Float::round(region_area * spec.hole_fraction / mean_area) as usize;
    let specks = Float::round(open_area * spec.speck_fraction / mean_area) as usize;
    let mut placed = 0;
    let mut attempts = 0;
    while placed < holes && attempts < holes * 50 {
        attempts += 1;
        let (y, x) = (rng.random_range(0..n), rng.random_range(0..n));
        if kind[y * n + x] != 1 {
            continue;
        }
        let r = rng.random_range(r0..=r1);
        disc(y as f64 + 0.5, x as f64 + 0.5, r, n, n, |yy, xx| {
            if kind[yy * n + xx] == 1 {
                kind[yy * n + xx] = 2;
                mask.set(yy, xx, 0);
            }
        });
        placed += 1;
    }
    placed = 0;
    attempts = 0;
    while placed < specks && attempts < specks * 50 {
        attempts += 1;
        let (y, x) = (rng.random_range(0..n), rng.random_range(0..n));
        if kind[y * n + x] != 0 {
            continue;
        }
        let half = half_of(y as f64 + 0.5, x as f64 + 0.5);
        let r = rng.random_range(r0..=r1);
        let class = 1 + tints[half];
        disc(y as f64 + 0.5, x as f64 + 0.5, r, n, n, |yy, xx| {
            // specks never cross into the other half
            if kind[yy * n + xx] == 0 && half_of(yy as f64 + 0.5, xx as f64 + 0.5) == half {
                kind[yy * n + xx] = 1;
                mask.set(yy, xx, class);
            }
        });
        placed += 1;
    }

    let fine = noise(&mut rng, n, n, 0);
    let coarse = noise(&mut rng, n, n, 2);
    let grain = noise(&mut rng, n, n, 1);
    let tint_rgb = |t: u8| -> [f64; 3] {
        let s = if t == 0 { spec.tint } else { -spec.tint };
        [s, 0.0, -s]
    };
    let image = Tensor::from_fn(Shape::new(3, n, n), |c, y, x| {
        let p = y * n + x;
        let v = match kind[p] {
            1 => {
                // region texture: high-frequency grain, identical for both classes
                let base = [0.62, 0.52, 0.42][c];
                base + 0.35 * (fine[p] - 0.5 * grain[p])
            }
            k => {
                let base = [0.38, 0.46, 0.36][c];
                let t = if k == 0 {
                    tint_rgb(tints[half_of(y as f64 + 0.5, x as f64 + 0.5)])[c]
                } else {
                    0.0
                };
                base + 0.22 * coarse[p] + t
            }
        };
        quantise(v)
    });
    Sample::new(image, mask)
}

/// A single irregular foreground blob ("lesion") covering roughly
/// `fg_fraction` of an `h × w` canvas, with a matching image.
pub fn generate_lesion(h: usize, w: usize, fg_fraction: f64, seed: u64) -> Result<Sample<f32>> {
    if !(0.0..1.0).contains(&fg_fraction) || h == 0 || w == 0 {
        return Err(Error::Config(alloc::format!(
            "lesion fraction {} on {}x{}",
            fg_fraction,
            h,
            w
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let area = fg_fraction * (h * w) as f64;
    let aspect: f64 = rng.random_range(0.6..1.6);
    let ry = Float::sqrt(area * aspect / core::f64::consts::PI);
    let rx = Float::sqrt(area / aspect / core::f64::consts::PI);
    let cy = rng.random_range(ry.min(h as f64 / 2.0)..=(h as f64 - ry).max(h as f64 / 2.0));
    let cx = rng.random_range(rx.min(w as f64 / 2.0)..=(w as f64 - rx).max(w as f64 / 2.0));
    let phases: [f64; 3] = [rng.random_range(0.0..6.3), rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)];
    let mut mask = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
            let theta = Float::atan2(dy, dx);
            let r = 1.0
                + 0.08 * Float::sin(3.0 * theta + phases[0])
                + 0.05 * Float::sin(5.0 * theta + phases[1])
                + 0.03 * Float::sin(11.0 * theta + phases[2]);
            if dy * dy + dx * dx < r * r {
                mask.set(y, x, 1);
            }
        }
    }
    let grain = noise(&mut rng, h, w, 1);
    let image = Tensor::from_fn(Shape::new(3, h, w), |c, y, x| {
        let p = y * w + x;
        let base = if mask.data[p] == 1 {
            [0.45, 0.3, 0.25][c]
        } else {
            [0.85, 0.68, 0.6][c]
        };
        quantise(base + 0.12 * grain[p])
    });
    Sample::new(image, mask)
}

/// Number of 4-neighbour label changes, a discrete boundary length.
pub fn boundary_length(mask: &Mask) -> usize {
    let mut n = 0;
    for y in 0..mask.h {
        for x in 0..mask.w {
            let v = mask.at(y, x);
            if x + 1 < mask.w && mask.at(y, x + 1) != v {
                n += 1;
            }
            if y + 1 < mask.h && mask.at(y + 1, x) != v {
                n += 1;
            }
        }
    }
    n
}
