//! The two pyramid branches, deep feature-map sharing between them and the
//! aggregation head.
//!
//! Each branch is a miniature feature pyramid: `E` stride-2 encoder stages, a
//! top-down pathway with lateral 1×1 connections and 3×3 smoothing, and a
//! final lateral fusion at the first encoder resolution. A branch exposes
//! `2E − 1` taps in this order:
//!
//! * taps `0..E`: encoder stage outputs (finest first),
//! * taps `E..2E−2`: smoothed top-down maps (coarsest first),
//! * tap `2E−2`: the fused final map, used for aggregation and regularisation.
//!
//! Every tap except the last may receive a shared map from the other branch.
//! The shared map is concatenated to the tap and reduced back to the tap's
//! channel count by a 1×1 projection added residually:
//! `t' = t + P · [t ; s]`. Projections start at zero, so an untrained
//! projection leaves the branch bit-identical to its unshared form.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Owner, ParamKey, Var};
use crate::ops::ConvGeom;
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};
use crate::tiling::{relative_to_rect, PixelRect, RelativeRect, TileGrid};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub input_channels: usize,
    /// Channels of each encoder stage, finest first.
    pub encoder: Vec<usize>,
    /// 3×3 convolutions per encoder stage (the first one has stride 2).
    pub convs_per_stage: usize,
    /// Channels of the top-down pathway and the final tap.
    pub pyramid: usize,
    pub classes: usize,
    /// Input frame of the branch (the global image size, the patch size).
    pub input_h: usize,
    pub input_w: usize,
    /// Taps that take part in sharing, in order.
    pub tap_stages: Vec<usize>,
}

impl BranchConfig {
    /// Desk-scale branch: four encoder stages on a 128×128 frame.
    pub fn desk(classes: usize) -> Self {
        let encoder = vec![8, 16, 24, 32];
        let taps = 2 * encoder.len() - 1;
        BranchConfig {
            input_channels: 3,
            encoder,
            convs_per_stage: 1,
            pyramid: 16,
            classes,
            input_h: 128,
            input_w: 128,
            tap_stages: (0..taps - 1).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.encoder.len() < 2 {
            return bad("a branch needs at least two encoder stages");
        }
        if self.encoder.iter().any(|&c| c == 0) || self.pyramid == 0 || self.input_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.convs_per_stage == 0 {
            return bad("convs_per_stage must be at least 1");
        }
        if self.classes < 2 || self.classes > 255 {
            return bad("classes must be in 2..=255");
        }
        if self.input_h < 1 << self.encoder.len() || self.input_w < 1 << self.encoder.len() {
            return bad("input frame too small for the encoder depth");
        }
        let last = self.num_taps() - 1;
        if self.tap_stages.iter().any(|&t| t >= last) {
            return bad("tap_stages must exclude the final tap");
        }
        if self.tap_stages.windows(2).any(|w| w[0] >= w[1]) {
            return bad("tap_stages must be strictly increasing");
        }
        Ok(())
    }

    pub fn num_taps(&self) -> usize {
        2 * self.encoder.len() - 1
    }

    pub fn last_tap(&self) -> usize {
        self.num_taps() - 1
    }

    /// Encoder stage whose resolution tap `l` shares.
    pub fn tap_stage(&self, l: usize) -> usize {
        let e = self.encoder.len();
        if l < e {
            l
        } else if l < 2 * e - 2 {
            e - 2 - (l - e)
        } else {
            0
        }
    }

    pub fn tap_channels(&self, l: usize) -> usize {
        if l < self.encoder.len() {
            self.encoder[l]
        } else {
            self.pyramid
        }
    }

    /// Spatial size of tap `l` for an `h × w` input.
    pub fn tap_size(&self, l: usize, h: usize, w: usize) -> (usize, usize) {
        let mut size = (h, w);
        for _ in 0..=self.tap_stage(l) {
            size = ((size.0 + 1) / 2, (size.1 + 1) / 2);
        }
        size
    }

    pub fn tap_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        (0..self.num_taps()).map(|l| self.tap_size(l, h, w)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    None,
    GlobalToLocal,
    Bidirectional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Depth {
    /// The first configured tap only.
    Shallow,
    /// Every configured tap.
    Deep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharePlan {
    pub direction: Direction,
    pub depth: Depth,
}

impl SharePlan {
    pub const DEEP_BIDIR: SharePlan = SharePlan {
        direction: Direction::Bidirectional,
        depth: Depth::Deep,
    };

    pub fn shared_taps(&self, cfg: &BranchConfig) -> Vec<usize> {
        match (self.direction, self.depth) {
            (Direction::None, _) => Vec::new(),
            (_, Depth::Deep) => cfg.tap_stages.clone(),
            (_, Depth::Shallow) => cfg.tap_stages.iter().take(1).copied().collect(),
        }
    }

    pub fn global_to_local(&self) -> bool {
        self.direction != Direction::None
    }

    pub fn local_to_global(&self) -> bool {
        self.direction == Direction::Bidirectional
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvSlot {
    w: usize,
    b: usize,
    geom: ConvGeom,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    encoder: Vec<Vec<ConvSlot>>,
    lateral: Vec<ConvSlot>,
    /// Indexed by encoder stage; `None` for the first and last stage.
    smooth: Vec<Option<ConvSlot>>,
    fuse: ConvSlot,
    classifier: ConvSlot,
    inject: Vec<ConvSlot>,
    shapes: Vec<Shape>,
}

impl Layout {
    fn new(cfg: &BranchConfig) -> Self {
        let mut shapes = Vec::new();
        let mut conv = |cin: usize, cout: usize, geom: ConvGeom| {
            shapes.push(Shape::new(cout, cin, geom.kernel * geom.kernel));
            shapes.push(Shape::new(cout, 1, 1));
            ConvSlot {
                w: shapes.len() - 2,
                b: shapes.len() - 1,
                geom,
            }
        };
        let e = cfg.encoder.len();
        let mut encoder = Vec::with_capacity(e);
        let mut cin = cfg.input_channels;
        for &c in &cfg.encoder {
            let mut stage = vec![conv(cin, c, ConvGeom::down(3))];
            for _ in 1..cfg.convs_per_stage {
                stage.push(conv(c, c, ConvGeom::same(3)));
            }
            encoder.push(stage);
            cin = c;
        }
        let lateral = cfg
            .encoder
            .iter()
            .map(|&c| conv(c, cfg.pyramid, ConvGeom::same(1)))
            .collect();
        let smooth = (0..e)
            .map(|s| (s >= 1 && s + 1 < e).then(|| conv(cfg.pyramid, cfg.pyramid, ConvGeom::same(3))))
            .collect();
        let fuse = conv(cfg.pyramid, cfg.pyramid, ConvGeom::same(3));
        let classifier = conv(cfg.pyramid, cfg.classes, ConvGeom::same(3));
        let inject = (0..cfg.num_taps() - 1)
            .map(|l| {
                let c = cfg.tap_channels(l);
                conv(2 * c, c, ConvGeom::same(1))
            })
            .collect();
        Layout {
            encoder,
            lateral,
            smooth,
            fuse,
            classifier,
            inject,
            shapes,
        }
    }
}

/// One pyramid branch: feature extractor plus classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch<T> {
    config: BranchConfig,
    layout: Layout,
    params: Vec<Tensor<T>>,
    version: u64,
}

/// Graph handles produced by a branch forward pass.
#[derive(Clone, Debug)]
pub struct BranchOutput {
    pub taps: Vec<Var>,
    /// Class logits at the final tap's resolution.
    pub logits: Var,
}

/// Detached tap values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Features<T> {
    pub taps: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
}

impl<T: Real> Features<T> {
    pub fn last_tap(&self) -> &Tensor<T> {
        self.taps.last().expect("a branch has taps")
    }
}

fn he_init<T: Real>(shape: Shape, rng: &mut ChaCha8Rng, gain: f64) -> Tensor<T> {
    let fan_in = (shape.h * shape.w).max(1) as f64;
    let normal = Normal::new(0.0, num_traits::Float::sqrt(gain / fan_in)).expect("finite std");
    Tensor::from_fn(shape, |_, _, _| T::lit(normal.sample(rng)))
}

impl<T: Real> Branch<T> {
    /// Randomly initialised branch. Injection projections start at zero.
    pub fn new(config: BranchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inject: Vec<usize> = layout.inject.iter().map(|s| s.w).collect();
        let classifier = layout.classifier.w;
        let params = layout
            .shapes
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                if i % 2 == 1 || inject.contains(&i) {
                    Tensor::zeros(s)
                } else if i == classifier {
                    he_init(s, &mut rng, 1.0)
                } else {
                    he_init(s, &mut rng, 2.0)
                }
            })
            .collect();
        Ok(Branch {
            config,
            layout,
            params,
            version: 0,
        })
    }

    /// Rebuilds a branch from stored parameters.
    pub fn from_params(config: BranchConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.shapes.len()
            || params.iter().zip(&layout.shapes).any(|(p, s)| p.shape() != *s)
        {
            return Err(Error::Shape("parameters do not match the branch layout".into()));
        }
        Ok(Branch {
            config,
            layout,
            params,
            version: 0,
        })
    }

    pub fn config(&self) -> &BranchConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    /// Mutable parameters; bumps the version so tap caches are invalidated.
    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        self.version += 1;
        &mut self.params
    }

    /// Changes whenever the weights may have changed.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Parameter indices of the injection projection of tap `l`.
    pub fn injection_params(&self, l: usize) -> (usize, usize) {
        let s = self.layout.inject[l];
        (s.w, s.b)
    }

    /// Parameter indices that belong to the feature extractor proper (not the
    /// classifier head).
    pub fn feature_params(&self) -> Vec<usize> {
        let c = self.layout.classifier;
        (0..self.params.len()).filter(|&i| i != c.w && i != c.b).collect()
    }

    pub fn cast<U: Real>(&self) -> Branch<U> {
        Branch {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            version: self.version,
        }
    }

    /// Records a forward pass.
    ///
    /// `injected[l]`, when present, is the shared map for tap `l`; it must
    /// match the tap's channels and spatial size.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        input: Var,
        injected: &[Option<Var>],
        owner: Owner,
        trainable: bool,
    ) -> Result<BranchOutput> {
        let cfg = &self.config;
        let s = g.shape(input);
        if s.c != cfg.input_channels {
            return Err(Error::Shape(alloc::format!(
                "branch input {} needs {} channels",
                s,
                cfg.input_channels
            )));
        }
        if injected.len() >= cfg.num_taps() {
            return Err(Error::Shape("the final tap cannot receive shared maps".into()));
        }
        let mut loaded: Vec<Option<Var>> = vec![None; self.params.len()];
        let mut param = |g: &mut Graph<T>, i: usize| -> Var {
            *loaded[i].get_or_insert_with(|| {
                g.param(&self.params[i], ParamKey { owner, index: i }, trainable)
            })
        };
        let mut conv = |g: &mut Graph<T>, x: Var, slot: ConvSlot| -> Result<Var> {
            let w = param(g, slot.w);
            let b = param(g, slot.b);
            g.conv(x, w, b, slot.geom)
        };
        let inject = |g: &mut Graph<T>, conv: &mut dyn FnMut(&mut Graph<T>, Var, ConvSlot) -> Result<Var>, l: usize, t: Var| -> Result<Var> {
            let Some(Some(shared)) = injected.get(l) else {
                return Ok(t);
            };
            let (ts, ss) = (g.shape(t), g.shape(*shared));
            if ts != ss {
                return Err(Error::Shape(alloc::format!(
                    "shared map {} for tap {} of shape {}",
                    ss,
                    l,
                    ts
                )));
            }
            let cat = g.concat(t, *shared)?;
            let delta = conv(g, cat, self.layout.inject[l])?;
            g.add(t, delta)
        };

        let e = cfg.encoder.len();
        let mut taps = Vec::with_capacity(cfg.num_taps());
        let mut x = input;
        for (stage, convs) in self.layout.encoder.iter().enumerate() {
            for &slot in convs {
                let y = conv(g, x, slot)?;
                x = g.relu(y);
            }
            x = inject(g, &mut conv, stage, x)?;
            taps.push(x);
        }
        let mut p = conv(g, taps[e - 1], self.layout.lateral[e - 1])?;
        for stage in (1..e - 1).rev() {
            let lat = conv(g, taps[stage], self.layout.lateral[stage])?;
            let (h, w) = (g.shape(lat).h, g.shape(lat).w);
            let up = g.resize(p, h, w)?;
            let sum = g.add(lat, up)?;
            let smooth = conv(g, sum, self.layout.smooth[stage].expect("inner stage"))?;
            let t = g.relu(smooth);
            p = inject(g, &mut conv, taps.len(), t)?;
            taps.push(p);
        }
        let lat = conv(g, taps[0], self.layout.lateral[0])?;
        let (h, w) = (g.shape(lat).h, g.shape(lat).w);
        let up = g.resize(p, h, w)?;
        let sum = g.add(lat, up)?;
        let fused = conv(g, sum, self.layout.fuse)?;
        let last = g.relu(fused);
        taps.push(last);
        let logits = conv(g, last, self.layout.classifier)?;
        Ok(BranchOutput { taps, logits })
    }

    /// Gradient-free forward returning detached tap values.
    pub fn features(&self, input: &Tensor<T>, injected: &[Option<Tensor<T>>]) -> Result<Features<T>> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let inj: Vec<Option<Var>> = injected
            .iter()
            .map(|t| t.as_ref().map(|t| g.constant(t.clone())))
            .collect();
        let out = self.forward(&mut g, x, &inj, Owner::Global, false)?;
        let taps = out.taps.iter().map(|&v| g.value(v).clone()).collect();
        let logits = g.take_value(out.logits);
        Ok(Features { taps, logits })
    }
}

/// 3×3 fusion of the two branches' final taps into class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationHead<T> {
    pub lambda: f64,
    params: Vec<Tensor<T>>,
    version: u64,
}

impl<T: Real> AggregationHead<T> {
    pub fn new(channels: usize, classes: usize, lambda: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = he_init(Shape::new(classes, 2 * channels, 9), &mut rng, 1.0);
        AggregationHead {
            lambda,
            params: vec![w, Tensor::zeros(Shape::new(classes, 1, 1))],
            version: 0,
        }
    }

    pub fn from_params(lambda: f64, params: Vec<Tensor<T>>) -> Result<Self> {
        if params.len() != 2 || params[0].shape().w != 9 || params[1].shape().c != params[0].shape().c {
            return Err(Error::Shape("aggregation parameters do not match a 3x3 head".into()));
        }
        Ok(AggregationHead {
            lambda,
            params,
            version: 0,
        })
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        self.version += 1;
        &mut self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn cast<U: Real>(&self) -> AggregationHead<U> {
        AggregationHead {
            lambda: self.lambda,
            params: self.params.iter().map(|p| p.cast()).collect(),
            version: self.version,
        }
    }

    /// Logits from `concat(local, global)`; both in the local patch frame.
    pub fn forward(&self, g: &mut Graph<T>, local: Var, global: Var, trainable: bool) -> Result<Var> {
        let (ls, gs) = (g.shape(local), g.shape(global));
        if ls != gs {
            return Err(Error::Shape(alloc::format!(
                "aggregation of {} and {}",
                ls,
                gs
            )));
        }
        if 2 * ls.c != self.params[0].shape().h {
            return Err(Error::Shape(alloc::format!(
                "aggregation head expects {} channels, got {}",
                self.params[0].shape().h,
                2 * ls.c
            )));
        }
        let cat = g.concat(local, global)?;
        let key = |index| ParamKey {
            owner: Owner::Aggregation,
            index,
        };
        let w = g.param(&self.params[0], key(0), trainable);
        let b = g.param(&self.params[1], key(1), trainable);
        g.conv(cat, w, b, ConvGeom::same(3))
    }
}

fn tap_rect(rel: RelativeRect, s: Shape, stage: usize) -> Result<PixelRect> {
    let under = Error::TapUnderResolved { stage, h: s.h, w: s.w };
    match relative_to_rect(rel, s.h, s.w) {
        Ok(r) if r.area() > 0 => Ok(r),
        _ => Err(under),
    }
}

/// Crops `tap` at the relative location of a patch and resizes the crop to
/// `h × w`.
pub fn crop_resize<T: Real>(tap: &Tensor<T>, rel: RelativeRect, h: usize, w: usize, stage: usize) -> Result<Tensor<T>> {
    let s = tap.shape();
    let rect = tap_rect(rel, s, stage)?;
    let crop = tap.crop(rect)?;
    crate::ops::resize_bilinear(&crop, h, w)
}

/// Graph version of [`crop_resize`].
pub fn crop_resize_var<T: Real>(g: &mut Graph<T>, tap: Var, rel: RelativeRect, h: usize, w: usize, stage: usize) -> Result<Var> {
    let s = g.shape(tap);
    let rect = tap_rect(rel, s, stage)?;
    let crop = g.crop(tap, rect)?;
    g.resize(crop, h, w)
}

/// Global→local sharing: each shared global tap is cropped at the patch's
/// relative rectangle and upsampled to the local tap's size.
///
/// Returns one entry per shareable tap; unshared taps are `None`.
pub fn share_global_to_local<T: Real>(
    global_taps: &[Tensor<T>],
    patch_rel: RelativeRect,
    local_sizes: &[(usize, usize)],
    shared: &[usize],
) -> Result<Vec<Option<Tensor<T>>>> {
    let n = local_sizes.len().saturating_sub(1);
    let mut out = vec![None; n];
    for &l in shared {
        let tap = global_taps.get(l).ok_or_else(|| {
            Error::Shape(alloc::format!("global tap {} missing", l))
        })?;
        let (h, w) = local_sizes[l];
        out[l] = Some(crop_resize(tap, patch_rel, h, w, l)?);
    }
    Ok(out)
}

/// Accumulates patch taps into a global-frame canvas, averaging overlaps.
///
/// Contributions are blended in patch-index order when the canvas is
/// finished, so the result does not depend on the order of `add` calls.
#[derive(Clone, Debug)]
pub struct TapCanvas<T> {
    stage: usize,
    shape: Shape,
    parts: Vec<(usize, PixelRect, Tensor<T>)>,
}

impl<T: Real> TapCanvas<T> {
    pub fn new(stage: usize, shape: Shape) -> Self {
        TapCanvas {
            stage,
            shape,
            parts: Vec::new(),
        }
    }

    /// Downsamples patch `index`'s `tap` to the extent of `patch_rel` in the
    /// canvas frame and records it.
    pub fn add(&mut self, index: usize, tap: &Tensor<T>, patch_rel: RelativeRect) -> Result<()> {
        let s = self.shape;
        if tap.shape().c != s.c {
            return Err(Error::Shape(alloc::format!(
                "tap {} for a canvas of {} channels",
                tap.shape(),
                s.c
            )));
        }
        let rect = tap_rect(patch_rel, s, self.stage)?;
        let small = crate::ops::resize_bilinear(tap, rect.height, rect.width)?;
        let at = self.parts.partition_point(|p| p.0 < index);
        if self.parts.get(at).is_some_and(|p| p.0 == index) {
            return Err(Error::Shape(alloc::format!("patch {} added twice", index)));
        }
        self.parts.insert(at, (index, rect, small));
        Ok(())
    }

    pub fn finish(self) -> Result<Tensor<T>> {
        let s = self.shape;
        let plane = s.plane();
        let mut mean = Tensor::zeros(s);
        let mut count = vec![0u32; plane];
        for (_, rect, small) in &self.parts {
            for y in 0..rect.height {
                for x in 0..rect.width {
                    let p = (rect.top + y) * s.w + rect.left + x;
                    count[p] += 1;
                    let k = count[p];
                    let kt = T::from_u32(k).expect("small count");
                    for c in 0..s.c {
                        let v = small.at(c, y, x);
                        let m = &mut mean.data_mut()[c * plane + p];
                        // running mean: identical contributions stay exact
                        *m = if k == 1 { v } else { *m + (v - *m) / kt };
                    }
                }
            }
        }
        if let Some(p) = count.iter().position(|&c| c == 0) {
            return Err(Error::IncompletePatchCover(alloc::format!(
                "tap {} pixel ({}, {}) received no patch",
                self.stage,
                p / s.w,
                p % s.w
            )));
        }
        Ok(mean)
    }
}

/// Local→global sharing: merges one tap per grid patch (in grid order) into
/// canvases of the global taps' sizes.
///
/// `local_taps[i][k]` is patch `i`'s map for shared tap `shared[k]`.
pub fn share_local_to_global<T: Real>(
    local_taps: &[Vec<Tensor<T>>],
    grid: &TileGrid,
    global_shapes: &[Shape],
    shared: &[usize],
) -> Result<Vec<Option<Tensor<T>>>> {
    if local_taps.len() != grid.len() {
        return Err(Error::IncompletePatchCover(alloc::format!(
            "{} patch taps for a grid of {}",
            local_taps.len(),
            grid.len()
        )));
    }
    let mut canvases: Vec<TapCanvas<T>> = shared
        .iter()
        .map(|&l| TapCanvas::new(l, global_shapes[l]))
        .collect();
    for (i, taps) in local_taps.iter().enumerate() {
        if taps.len() != shared.len() {
            return Err(Error::IncompletePatchCover(alloc::format!(
                "patch {} carries {} of {} shared taps",
                i,
                taps.len(),
                shared.len()
            )));
        }
        for (canvas, tap) in canvases.iter_mut().zip(taps) {
            canvas.add(i, tap, grid.relative(i))?;
        }
    }
    let n = global_shapes.len().saturating_sub(1);
    let mut out = vec![None; n];
    for (canvas, &l) in canvases.into_iter().zip(shared) {
        out[l] = Some(canvas.finish()?);
    }
    Ok(out)
}

/// Which training phases a model has completed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Untrained,
    /// Global branch trained alone.
    Global,
    /// Local branch and aggregation trained with global→local sharing.
    GlobalToLocal,
    /// Global branch and aggregation trained with local→global sharing.
    Bidirectional,
    /// Local branch trained alone, without sharing or aggregation.
    LocalOnly,
}

/// The complete two-branch network.
#[derive(Clone, Debug)]
pub struct GlNet<T> {
    pub plan: SharePlan,
    pub global: Branch<T>,
    pub local: Branch<T>,
    /// Frozen copy of the global branch that feeds the local branch once the
    /// global branch resumes training (phase 3).
    pub context: Option<Branch<T>>,
    pub agg: AggregationHead<T>,
    pub stage: Stage,
}

impl<T: Real> GlNet<T> {
    pub fn new(config: BranchConfig, plan: SharePlan, lambda: f64, seed: u64) -> Result<Self> {
        let global = Branch::new(config.clone(), seed.wrapping_mul(3).wrapping_add(1))?;
        let local = Branch::new(config.clone(), seed.wrapping_mul(3).wrapping_add(2))?;
        let agg = AggregationHead::new(config.pyramid, config.classes, lambda, seed.wrapping_mul(3).wrapping_add(3));
        Ok(GlNet {
            plan,
            global,
            local,
            context: None,
            agg,
            stage: Stage::Untrained,
        })
    }

    pub fn config(&self) -> &BranchConfig {
        self.global.config()
    }

    /// Branch whose taps are injected into the local branch.
    pub fn context_branch(&self) -> &Branch<T> {
        self.context.as_ref().unwrap_or(&self.global)
    }

    pub fn shared_taps(&self) -> Vec<usize> {
        self.plan.shared_taps(self.config())
    }

    /// Injection for an `h × w` local patch at `patch_rel`, from context taps.
    pub fn local_injection(
        &self,
        context: &Features<T>,
        patch_rel: RelativeRect,
        h: usize,
        w: usize,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if !self.plan.global_to_local() {
            return Ok(Vec::new());
        }
        let sizes = self.config().tap_sizes(h, w);
        share_global_to_local(&context.taps, patch_rel, &sizes, &self.shared_taps())
    }

    /// Global-frame shapes of every global tap.
    pub fn global_tap_shapes(&self) -> Vec<Shape> {
        let cfg = self.config();
        (0..cfg.num_taps())
            .map(|l| {
                let (h, w) = cfg.tap_size(l, cfg.input_h, cfg.input_w);
                Shape::new(cfg.tap_channels(l), h, w)
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> GlNet<U> {
        GlNet {
            plan: self.plan,
            global: self.global.cast(),
            local: self.local.cast(),
            context: self.context.as_ref().map(|c| c.cast()),
            agg: self.agg.cast(),
            stage: self.stage,
        }
    }
}
