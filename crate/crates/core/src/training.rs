//! Three-phase collaborative training: the global branch alone, then the
//! local branch with global→local sharing, then the global branch with
//! local→global sharing. Minibatch gradients can be accumulated over several
//! minibatches before one optimizer step ("late update").

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_lowres, Sample};
use crate::error::{Error, Result};
use crate::graph::{GradSet, Gradients, Graph, Owner, Var};
use crate::losses::{batch_mean, focal, phase1_objective, phase2_objective, phase3_objective, LossConfig};
use crate::model::{crop_resize, crop_resize_var, share_local_to_global, Branch, Features, GlNet, Stage};
use crate::optim::{Adam, AdamConfig, GradAccumulator};
use crate::scalar::Real;
use crate::tensor::{Mask, Tensor};
use crate::tiling::{build_grid, TileGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Global branch alone on downsampled pairs.
    Global,
    /// Local branch and aggregation, with global maps injected.
    GlobalToLocal,
    /// Global branch and aggregation, with merged local maps injected.
    Bidirectional,
    /// Local branch alone, no sharing (baseline).
    LocalOnly,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Global => "global",
            Phase::GlobalToLocal => "g2l",
            Phase::Bidirectional => "bidir",
            Phase::LocalOnly => "local",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Phase::Global => 1,
            Phase::GlobalToLocal => 2,
            Phase::Bidirectional => 3,
            Phase::LocalOnly => 4,
        }
    }
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Untrained => "untrained",
        Stage::Global => "global",
        Stage::GlobalToLocal => "g2l",
        Stage::Bidirectional => "bidir",
        Stage::LocalOnly => "local",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    /// Epochs of phases 1, 2 and 3.
    pub epochs: [usize; 3],
    /// Epochs of the local-only baseline.
    pub local_only_epochs: usize,
    /// How many times phases 2 and 3 run after phase 1.
    pub repeat: usize,
    pub lr_global: f64,
    pub lr_local: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub accum_period: usize,
    pub loss: LossConfig,
    /// Side of the downsampled global image.
    pub global_size: usize,
    /// Side of the local patches.
    pub patch: usize,
    pub overlap: usize,
    /// Patches drawn per image and epoch in phase 2 and the local-only
    /// baseline; 0 takes all.
    pub patches_per_image: usize,
    /// Patches scored per image and step in phase 3; 0 takes all.
    pub scored_patches: usize,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            epochs: [20, 20, 10],
            local_only_epochs: 20,
            repeat: 1,
            lr_global: 1e-4,
            lr_local: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 6,
            accum_period: 1,
            loss: LossConfig::default(),
            global_size: 128,
            patch: 128,
            overlap: 16,
            patches_per_image: 0,
            scored_patches: 0,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.accum_period < 1 {
            return Err(Error::Config("accumulation period must be at least 1".into()));
        }
        let ok = self.repeat >= 1
            && self.batch_size >= 1
            && self.lr_global >= 0.0
            && self.lr_local >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.global_size >= 1
            && self.patch >= 1
            && self.overlap < self.patch;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(alloc::format!("invalid training plan {:?}", self)))
        }
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

/// Full-resolution samples with their downsampled pairs and patch grids.
#[derive(Clone, Debug)]
pub struct TrainSet<T> {
    pub hr: Vec<Sample<T>>,
    pub lr: Vec<Sample<T>>,
    pub grids: Vec<TileGrid>,
}

impl<T: Real> TrainSet<T> {
    pub fn new(samples: Vec<Sample<T>>, plan: &TrainPlan) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let g = plan.global_size;
        let lr = samples.iter().map(|s| make_lowres(s, g, g)).collect::<Result<Vec<_>>>()?;
        let grids = samples
            .iter()
            .map(|s| build_grid(s.height(), s.width(), plan.patch, plan.patch, plan.overlap))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainSet { hr: samples, lr, grids })
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }

    fn patch(&self, image: usize, index: usize) -> Result<(Tensor<T>, Mask)> {
        let rect = self.grids[image].rects[index];
        Ok((self.hr[image].image.crop(rect)?, self.hr[image].mask.crop(rect)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Progress, loss history and the per-image tap caches.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub phase: Option<Phase>,
    pub epoch: usize,
    pub step: usize,
    pub history: Vec<LossRecord>,
    /// Context-branch features per image, keyed by the branch version.
    context_cache: Vec<Option<(u64, Features<T>)>>,
    /// Merged local taps per image, keyed by (local, context) versions.
    canvas_cache: Vec<Option<((u64, u64), Vec<Option<Tensor<T>>>)>>,
    /// Number of cache fills, for auditing invalidation.
    pub context_computes: usize,
    pub canvas_computes: usize,
}

impl<T: Real> TrainState<T> {
    pub fn new(images: usize) -> Self {
        TrainState {
            phase: None,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            context_cache: vec![None; images],
            canvas_cache: vec![None; images],
            context_computes: 0,
            canvas_computes: 0,
        }
    }

    /// Context features of `image`, recomputed when the context branch changed.
    pub fn context(&mut self, model: &GlNet<T>, set: &TrainSet<T>, image: usize) -> Result<Features<T>> {
        let branch = model.context_branch();
        if let Some((v, f)) = &self.context_cache[image] {
            if *v == branch.version() {
                return Ok(f.clone());
            }
        }
        let f = branch.features(&set.lr[image].image, &[])?;
        self.context_computes += 1;
        self.context_cache[image] = Some((branch.version(), f.clone()));
        Ok(f)
    }

    /// Local→global injection for `image`: gradient-free local forwards over
    /// every patch, merged into global-frame canvases.
    pub fn canvases(&mut self, model: &GlNet<T>, set: &TrainSet<T>, image: usize) -> Result<Vec<Option<Tensor<T>>>> {
        if !model.plan.local_to_global() {
            return Ok(Vec::new());
        }
        let key = (model.local.version(), model.context_branch().version());
        if let Some((k, c)) = &self.canvas_cache[image] {
            if *k == key {
                return Ok(c.clone());
            }
        }
        let ctx = self.context(model, set, image)?;
        let shared = model.shared_taps();
        let grid = &set.grids[image];
        let mut taps = Vec::with_capacity(grid.len());
        for i in 0..grid.len() {
            let (x, _) = set.patch(image, i)?;
            let s = x.shape();
            let inj = model.local_injection(&ctx, grid.relative(i), s.h, s.w)?;
            let f = model.local.features(&x, &inj)?;
            taps.push(shared.iter().map(|&l| f.taps[l].clone()).collect());
        }
        let c = share_local_to_global(&taps, grid, &model.global_tap_shapes(), &shared)?;
        self.canvas_computes += 1;
        self.canvas_cache[image] = Some((key, c.clone()));
        Ok(c)
    }
}

/// Gradients of one training item (or the mean over a minibatch).
#[derive(Clone, Debug)]
pub struct ItemGrads<T> {
    pub loss: f64,
    /// Trained branch followed by the aggregation head (when trained).
    pub trained: GradSet<T>,
    /// Frozen branch, only when the frozen side was recorded for auditing.
    pub frozen: Option<GradSet<T>>,
}

fn collect<T: Real>(grads: &Gradients<T>, owner: Owner, params: &[Tensor<T>]) -> GradSet<T> {
    let mut set = GradSet::zeros_like(params);
    for (key, g) in grads.params() {
        if key.owner == owner {
            if let Some(g) = g {
                set.tensors[key.index].add_assign(g);
            }
        }
    }
    set
}

fn joined<T: Real>(grads: &Gradients<T>, owner: Owner, branch: &[Tensor<T>], agg: Option<&[Tensor<T>]>) -> GradSet<T> {
    let mut set = collect(grads, owner, branch);
    if let Some(agg) = agg {
        set.tensors.extend(collect(grads, Owner::Aggregation, agg).tensors);
    }
    set
}

fn constants<T: Real>(g: &mut Graph<T>, maps: Vec<Option<Tensor<T>>>) -> Vec<Option<Var>> {
    maps.into_iter().map(|t| t.map(|t| g.constant(t))).collect()
}

/// Global branch on one downsampled pair.
pub fn phase1_item<T: Real>(model: &GlNet<T>, sample: &Sample<T>, loss: &LossConfig) -> Result<ItemGrads<T>> {
    let mut g = Graph::new();
    let x = g.constant(sample.image.clone());
    let out = model.global.forward(&mut g, x, &[], Owner::Global, true)?;
    let logits = g.resize(out.logits, sample.height(), sample.width())?;
    let root = phase1_objective(&mut g, logits, &sample.mask, loss)?;
    let grads = g.backward(root);
    Ok(ItemGrads {
        loss: g.value(root).item().to_f64().unwrap_or(f64::NAN),
        trained: collect(&grads, Owner::Global, model.global.params()),
        frozen: None,
    })
}

/// Local branch alone on one patch.
pub fn local_only_item<T: Real>(model: &GlNet<T>, x: &Tensor<T>, mask: &Mask, loss: &LossConfig) -> Result<ItemGrads<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = model.local.forward(&mut g, xv, &[], Owner::Local, true)?;
    let logits = g.resize(out.logits, mask.h, mask.w)?;
    let root = focal(&mut g, logits, mask, loss.gamma)?;
    let grads = g.backward(root);
    Ok(ItemGrads {
        loss: g.value(root).item().to_f64().unwrap_or(f64::NAN),
        trained: collect(&grads, Owner::Local, model.local.params()),
        frozen: None,
    })
}

/// Local branch and aggregation on patch `index` of `image`.
///
/// With `audit`, the context branch runs inside the same graph with its
/// weights registered as differentiable, and its gradients are returned in
/// `frozen`; the coupling penalty then reads the live global tap.
pub fn phase2_item<T: Real>(
    model: &GlNet<T>,
    state: &mut TrainState<T>,
    set: &TrainSet<T>,
    image: usize,
    index: usize,
    loss: &LossConfig,
    audit: bool,
) -> Result<ItemGrads<T>> {
    let (x, mask) = set.patch(image, index)?;
    let rel = set.grids[image].relative(index);
    let last = model.config().last_tap();
    let mut g = Graph::new();
    let (ctx, live_last) = if audit {
        let gx = g.constant(set.lr[image].image.clone());
        let out = model.context_branch().forward(&mut g, gx, &[], Owner::Global, true)?;
        let taps = out.taps.iter().map(|&v| g.value(v).clone()).collect();
        let logits = g.value(out.logits).clone();
        (Features { taps, logits }, Some(out.taps[last]))
    } else {
        (state.context(model, set, image)?, None)
    };
    let s = x.shape();
    let inj = model.local_injection(&ctx, rel, s.h, s.w)?;
    let xv = g.constant(x);
    let inj = constants(&mut g, inj);
    let out = model.local.forward(&mut g, xv, &inj, Owner::Local, true)?;
    let local_last = out.taps[last];
    let ls = g.shape(local_last);
    let global_last = g.constant(crop_resize(ctx.last_tap(), rel, ls.h, ls.w, last)?);
    let agg = model.agg.forward(&mut g, local_last, global_last, true)?;
    let local_up = g.resize(out.logits, s.h, s.w)?;
    let agg_up = g.resize(agg, s.h, s.w)?;
    let penalty_side = match live_last {
        Some(v) => crop_resize_var(&mut g, v, rel, ls.h, ls.w, last)?,
        None => global_last,
    };
    let root = phase2_objective(&mut g, local_up, agg_up, &mask, penalty_side, local_last, loss)?;
    let grads = g.backward(root);
    Ok(ItemGrads {
        loss: g.value(root).item().to_f64().unwrap_or(f64::NAN),
        trained: joined(&grads, Owner::Local, model.local.params(), Some(model.agg.params())),
        frozen: audit.then(|| collect(&grads, Owner::Global, model.context_branch().params())),
    })
}

/// Global branch and aggregation on one image, scored on the given patches.
///
/// With `audit`, the local forwards for the scored patches run inside the
/// graph with differentiable weights, and their gradients land in `frozen`.
pub fn phase3_item<T: Real>(
    model: &GlNet<T>,
    state: &mut TrainState<T>,
    set: &TrainSet<T>,
    image: usize,
    patches: &[usize],
    loss: &LossConfig,
    audit: bool,
) -> Result<ItemGrads<T>> {
    if patches.is_empty() {
        return Err(Error::IncompletePatchCover("no patches to score".into()));
    }
    let canvases = state.canvases(model, set, image)?;
    let ctx = state.context(model, set, image)?;
    let last = model.config().last_tap();
    let mut g = Graph::new();
    let gx = g.constant(set.lr[image].image.clone());
    let inj = constants(&mut g, canvases);
    let gout = model.global.forward(&mut g, gx, &inj, Owner::Global, true)?;
    let mut terms = Vec::with_capacity(patches.len());
    for &i in patches {
        let (x, mask) = set.patch(image, i)?;
        let rel = set.grids[image].relative(i);
        let s = x.shape();
        let local_inj = model.local_injection(&ctx, rel, s.h, s.w)?;
        let local_last = if audit {
            let xv = g.constant(x);
            let iv = constants(&mut g, local_inj);
            let out = model.local.forward(&mut g, xv, &iv, Owner::Local, true)?;
            g.detach(out.taps[last])
        } else {
            let f = model.local.features(&x, &local_inj)?;
            g.constant(f.last_tap().clone())
        };
        let ls = g.shape(local_last);
        let global_last = crop_resize_var(&mut g, gout.taps[last], rel, ls.h, ls.w, last)?;
        let agg = model.agg.forward(&mut g, local_last, global_last, true)?;
        let agg_up = g.resize(agg, s.h, s.w)?;
        let global_up = crop_resize_var(&mut g, gout.logits, rel, s.h, s.w, last)?;
        terms.push(phase3_objective(&mut g, global_up, agg_up, &mask, loss)?);
    }
    let root = batch_mean(&mut g, &terms);
    let grads = g.backward(root);
    Ok(ItemGrads {
        loss: g.value(root).item().to_f64().unwrap_or(f64::NAN),
        trained: joined(&grads, Owner::Global, model.global.params(), Some(model.agg.params())),
        frozen: audit.then(|| collect(&grads, Owner::Local, model.local.params())),
    })
}

/// Minibatch averaging, late-update accumulation and the optimizer steps of
/// one phase.
struct Updater<T> {
    acc: GradAccumulator<T>,
    branch: Adam<T>,
    agg: Option<Adam<T>>,
    split: usize,
}

impl<T: Real> Updater<T> {
    fn new(plan: &TrainPlan, lr: f64, branch: &Branch<T>, agg: Option<&[Tensor<T>]>) -> Result<Self> {
        let config = plan.adam(lr);
        Ok(Updater {
            acc: GradAccumulator::new(plan.accum_period)?,
            branch: Adam::new(config, branch.params()),
            agg: agg.map(|a| Adam::new(config, a)),
            split: branch.params().len(),
        })
    }

    fn push(&mut self, grads: GradSet<T>, branch: &mut Branch<T>, agg: &mut crate::model::AggregationHead<T>) -> Result<()> {
        match self.acc.push(grads) {
            Some(mean) => self.apply(mean, branch, agg),
            None => Ok(()),
        }
    }

    fn flush(&mut self, branch: &mut Branch<T>, agg: &mut crate::model::AggregationHead<T>) -> Result<()> {
        match self.acc.flush() {
            Some(mean) => self.apply(mean, branch, agg),
            None => Ok(()),
        }
    }

    fn apply(&mut self, mut mean: GradSet<T>, branch: &mut Branch<T>, agg: &mut crate::model::AggregationHead<T>) -> Result<()> {
        let tail = mean.tensors.split_off(self.split);
        self.branch.step(branch.params_mut(), &mean)?;
        if let Some(adam) = &mut self.agg {
            adam.step(agg.params_mut(), &GradSet { tensors: tail })?;
        }
        Ok(())
    }
}

fn mean_of<T: Real>(items: Vec<ItemGrads<T>>) -> (f64, GradSet<T>) {
    let n = items.len();
    let mut iter = items.into_iter();
    let first = iter.next().expect("non-empty minibatch");
    let mut loss = first.loss;
    let mut sum = first.trained;
    for it in iter {
        loss += it.loss;
        sum.add(&it.trained);
    }
    if n > 1 {
        sum.scale(T::one() / T::from_usize(n).expect("batch size fits"));
    }
    (loss / n as f64, sum)
}

fn phase_rng(plan: &TrainPlan, phase: Phase, round: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(plan.seed.wrapping_mul(1_000_003) ^ (phase.tag() << 32) ^ round as u64)
}

/// `(image, patch)` pairs for one epoch, shuffled across images.
fn patch_schedule(set: &TrainSet<impl Real>, per_image: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut items = Vec::new();
    for (i, grid) in set.grids.iter().enumerate() {
        let mut idx: Vec<usize> = (0..grid.len()).collect();
        idx.shuffle(rng);
        if per_image > 0 {
            idx.truncate(per_image);
        }
        items.extend(idx.into_iter().map(|j| (i, j)));
    }
    items.shuffle(rng);
    items
}

fn record<T>(state: &mut TrainState<T>, phase: Phase, epoch: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite);
    }
    state.step += 1;
    state.history.push(LossRecord {
        phase,
        epoch,
        step: state.step,
        loss,
    });
    Ok(())
}

fn begin<T>(state: &mut TrainState<T>, phase: Phase) {
    state.phase = Some(phase);
    state.epoch = 0;
    state.step = 0;
}

fn check_images<T: Real>(model: &GlNet<T>, set: &TrainSet<T>) -> Result<()> {
    let cfg = model.config();
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(s) = set.lr.iter().find(|s| s.height() != cfg.input_h || s.width() != cfg.input_w) {
        return Err(Error::Shape(alloc::format!(
            "global input {}x{} for a branch built for {}x{}",
            s.height(),
            s.width(),
            cfg.input_h,
            cfg.input_w
        )));
    }
    Ok(())
}

/// Trains the global branch alone on the downsampled pairs.
pub fn run_phase1<T: Real>(model: &mut GlNet<T>, set: &TrainSet<T>, plan: &TrainPlan, state: &mut TrainState<T>) -> Result<()> {
    plan.validate()?;
    check_images(model, set)?;
    begin(state, Phase::Global);
    let mut rng = phase_rng(plan, Phase::Global, 0);
    let mut up = Updater::new(plan, plan.lr_global, &model.global, None)?;
    for epoch in 0..plan.epochs[0] {
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(plan.batch_size) {
            let items = batch
                .iter()
                .map(|&i| phase1_item(model, &set.lr[i], &plan.loss))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = mean_of(items);
            record(state, Phase::Global, epoch, loss)?;
            up.push(grads, &mut model.global, &mut model.agg)?;
        }
    }
    up.flush(&mut model.global, &mut model.agg)?;
    model.stage = Stage::Global;
    Ok(())
}

/// Trains the local branch and aggregation head with the context branch's
/// maps injected; the global side stays fixed.
pub fn run_phase2<T: Real>(model: &mut GlNet<T>, set: &TrainSet<T>, plan: &TrainPlan, state: &mut TrainState<T>) -> Result<()> {
    run_phase2_round(model, set, plan, state, 0)
}

fn run_phase2_round<T: Real>(
    model: &mut GlNet<T>,
    set: &TrainSet<T>,
    plan: &TrainPlan,
    state: &mut TrainState<T>,
    round: usize,
) -> Result<()> {
    plan.validate()?;
    check_images(model, set)?;
    if !matches!(model.stage, Stage::Global | Stage::GlobalToLocal | Stage::Bidirectional) {
        return Err(Error::ModeMismatch {
            mode: "phase 2",
            phase: stage_name(model.stage),
        });
    }
    begin(state, Phase::GlobalToLocal);
    let mut rng = phase_rng(plan, Phase::GlobalToLocal, round);
    let mut up = Updater::new(plan, plan.lr_local, &model.local, Some(model.agg.params()))?;
    for epoch in 0..plan.epochs[1] {
        state.epoch = epoch;
        let order = patch_schedule(set, plan.patches_per_image, &mut rng);
        for batch in order.chunks(plan.batch_size) {
            let items = batch
                .iter()
                .map(|&(i, j)| phase2_item(model, state, set, i, j, &plan.loss, false))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = mean_of(items);
            record(state, Phase::GlobalToLocal, epoch, loss)?;
            up.push(grads, &mut model.local, &mut model.agg)?;
        }
    }
    up.flush(&mut model.local, &mut model.agg)?;
    if model.stage == Stage::Global {
        model.stage = Stage::GlobalToLocal;
    }
    Ok(())
}

/// Trains the global branch and aggregation head with merged local maps
/// injected; the local branch stays fixed. The global branch as it left
/// phase 2 is kept as the frozen context that feeds the local branch.
pub fn run_phase3<T: Real>(model: &mut GlNet<T>, set: &TrainSet<T>, plan: &TrainPlan, state: &mut TrainState<T>) -> Result<()> {
    run_phase3_round(model, set, plan, state, 0)
}

fn run_phase3_round<T: Real>(
    model: &mut GlNet<T>,
    set: &TrainSet<T>,
    plan: &TrainPlan,
    state: &mut TrainState<T>,
    round: usize,
) -> Result<()> {
    plan.validate()?;
    check_images(model, set)?;
    if !matches!(model.stage, Stage::GlobalToLocal | Stage::Bidirectional) {
        return Err(Error::ModeMismatch {
            mode: "phase 3",
            phase: stage_name(model.stage),
        });
    }
    if model.context.is_none() {
        model.context = Some(model.global.clone());
    }
    begin(state, Phase::Bidirectional);
    let mut rng = phase_rng(plan, Phase::Bidirectional, round);
    let mut up = Updater::new(plan, plan.lr_global, &model.global, Some(model.agg.params()))?;
    for epoch in 0..plan.epochs[2] {
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(plan.batch_size) {
            let mut items = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut idx: Vec<usize> = (0..set.grids[i].len()).collect();
                idx.shuffle(&mut rng);
                if plan.scored_patches > 0 {
                    idx.truncate(plan.scored_patches);
                }
                items.push(phase3_item(model, state, set, i, &idx, &plan.loss, false)?);
            }
            let (loss, grads) = mean_of(items);
            record(state, Phase::Bidirectional, epoch, loss)?;
            up.push(grads, &mut model.global, &mut model.agg)?;
        }
    }
    up.flush(&mut model.global, &mut model.agg)?;
    model.stage = Stage::Bidirectional;
    Ok(())
}

/// Local-only baseline: the local branch alone on patches, no sharing.
pub fn run_local_only<T: Real>(model: &mut GlNet<T>, set: &TrainSet<T>, plan: &TrainPlan, state: &mut TrainState<T>) -> Result<()> {
    plan.validate()?;
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    begin(state, Phase::LocalOnly);
    let mut rng = phase_rng(plan, Phase::LocalOnly, 0);
    let mut up = Updater::new(plan, plan.lr_local, &model.local, None)?;
    for epoch in 0..plan.local_only_epochs {
        state.epoch = epoch;
        let order = patch_schedule(set, plan.patches_per_image, &mut rng);
        for batch in order.chunks(plan.batch_size) {
            let items = batch
                .iter()
                .map(|&(i, j)| {
                    let (x, mask) = set.patch(i, j)?;
                    local_only_item(model, &x, &mask, &plan.loss)
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = mean_of(items);
            record(state, Phase::LocalOnly, epoch, loss)?;
            up.push(grads, &mut model.local, &mut model.agg)?;
        }
    }
    up.flush(&mut model.local, &mut model.agg)?;
    model.stage = Stage::LocalOnly;
    Ok(())
}

/// Runs phase 1, then `repeat` rounds of phases 2 and 3, calling
/// `on_phase_end` after each phase.
pub fn train<T: Real>(
    model: &mut GlNet<T>,
    set: &TrainSet<T>,
    plan: &TrainPlan,
    state: &mut TrainState<T>,
    mut on_phase_end: impl FnMut(Phase, &GlNet<T>, &TrainState<T>) -> Result<()>,
) -> Result<()> {
    run_phase1(model, set, plan, state)?;
    on_phase_end(Phase::Global, model, state)?;
    for round in 0..plan.repeat {
        run_phase2_round(model, set, plan, state, round)?;
        on_phase_end(Phase::GlobalToLocal, model, state)?;
        run_phase3_round(model, set, plan, state, round)?;
        on_phase_end(Phase::Bidirectional, model, state)?;
    }
    Ok(())
}
