//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=4,5` restricts the run to the listed criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use glnet::config::load_config;
use glnet::memory::{measure_peak_memory, CountingAlloc};
use glnet_core::coarse2fine::{fine_segment, relax_bbox, tight_box, DEFAULT_TOLERANCE};
use glnet_core::data::{generate_lesion, generate_synthetic, Sample, SynthSpec};
use glnet_core::graph::{Graph, Var};
use glnet_core::inference::{infer_image, infer_into, InferConfig, Mode};
use glnet_core::losses::{coupling, focal_loss, phase1_objective, phase2_objective, phase3_objective, LossConfig};
use glnet_core::metrics::{isic_score, isic_threshold, miou, ConfusionMatrix};
use glnet_core::model::{BranchConfig, GlNet, SharePlan, Stage};
use glnet_core::tiling::{build_grid, merge, Blend, MergeBuffer, PixelRect};
use glnet_core::training::{
    phase2_item, phase3_item, run_local_only, run_phase1, run_phase2, run_phase3, TrainPlan, TrainSet, TrainState,
};
use glnet_core::{Mask, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

struct Outcome {
    pass: bool,
    detail: String,
}

/// Shared between criteria: training seconds of the benchmark.
#[derive(Default)]
struct Ctx {
    benchmark_training: Option<f64>,
}

type Criterion = fn(&mut Ctx) -> Outcome;

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let criteria: [(usize, &str, Criterion); 8] = [
        (1, "tiling oracle suite", tiling_suite),
        (2, "loss and gradient suite", loss_suite),
        (3, "phase isolation suite", isolation_suite),
        (4, "ablation ordering on the synthetic benchmark", benchmark_ordering),
        (5, "memory flatness", memory_flatness),
        (6, "coarse-to-fine ratio suite", coarse_to_fine_suite),
        (7, "metric suite", metric_suite),
        (8, "reproducible training", reproducibility),
    ];
    let mut ctx = Ctx::default();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| run(&mut ctx))).unwrap_or_else(|e| Outcome {
            pass: false,
            detail: format!(
                "panicked: {}",
                e.downcast_ref::<String>()
                    .map(String::as_str)
                    .or_else(|| e.downcast_ref::<&str>().copied())
                    .unwrap_or("?")
            ),
        });
        let secs = start.elapsed().as_secs_f64();
        if !outcome.pass {
            failed += 1;
        }
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {n} ({name}): {} [{secs:.1} s]", outcome.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_tensor(rng: &mut ChaCha8Rng, s: Shape, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(s, |_, _, _| rng.random_range(-scale..scale))
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: u8) -> Mask {
    Mask::from_vec(h, w, (0..h * w).map(|_| rng.random_range(0..classes)).collect()).unwrap()
}

// 1 -------------------------------------------------------------------------

fn tiling_suite(_: &mut Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut problems = Vec::new();
    for case in 0..200 {
        let ih = rng.random_range(1..400);
        let iw = rng.random_range(1..400);
        let ph = rng.random_range(1..=ih);
        let pw = rng.random_range(1..=iw);
        let ov = rng.random_range(0..ph.min(pw));
        let g = build_grid(ih, iw, ph, pw, ov).unwrap();
        let mut cover = vec![0u32; ih * iw];
        for r in &g.rects {
            if (r.height, r.width) != (ph, pw) || r.top + r.height > ih || r.left + r.width > iw {
                problems.push(format!("case {case}: bad rect {r:?}"));
            }
            for y in r.top..r.top + r.height {
                for x in r.left..r.left + r.width {
                    cover[y * iw + x] += 1;
                }
            }
        }
        if cover.contains(&0) {
            problems.push(format!("case {case}: uncovered pixel"));
        }
        for starts in [(&g.row_starts, ph), (&g.col_starts, pw)] {
            if starts.0.windows(2).any(|w| w[0] + starts.1 < w[1] + ov) {
                problems.push(format!("case {case}: overlap below {ov}"));
            }
        }
        let mut sorted = g.rects.clone();
        sorted.sort_by_key(|r| (r.top, r.left));
        if sorted != g.rects || build_grid(ih, iw, ph, pw, ov).unwrap() != g {
            problems.push(format!("case {case}: order not reproducible"));
        }
        let a = Tensor::<f32>::from_fn(Shape::new(2, ih, iw), |_, _, _| rng.random_range(-1e3f32..1e3));
        let patches = g.crop_all(&a).unwrap();
        for blend in [Blend::Average, Blend::CenterPriority] {
            if merge(&patches, &g, blend).unwrap() != a {
                problems.push(format!("case {case}: {blend:?} merge is not bit-exact"));
            }
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "200 random grids: full coverage, overlap and order hold; merge of crops is bit-exact in both blend modes".into()
        } else {
            format!("{} problems, first: {}", problems.len(), problems[0])
        },
    )
}

// 2 -------------------------------------------------------------------------

/// Worst relative error of analytic against central-difference gradients.
fn fd_error(inputs: &[Tensor<f64>], objective: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let root = objective(&mut g, &vars);
    let grads = g.backward(root);
    let eval = |ts: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.variable(t.clone())).collect();
        let root = objective(&mut g, &vars);
        g.value(root).item()
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = Tensor::zeros(inputs[i].shape());
        for k in 0..inputs[i].data().len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= h;
            numeric.data_mut()[k] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let scale = numeric.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        worst = worst.max(analytic.max_abs_diff(&numeric) / scale);
    }
    worst
}

fn loss_suite(_: &mut Ctx) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    // two classes with equal logits: p_t = 1/2
    let even = Tensor::<f64>::zeros(Shape::new(2, 1, 1));
    let one = Mask::filled(1, 1, 1);
    let l = focal_loss(&even, &one, 6.0).unwrap().0;
    let expect = 0.5f64.powi(6) * std::f64::consts::LN_2;
    pass &= (l - expect).abs() < 1e-6 && (l - 0.0108304).abs() < 1e-6;
    notes.push(format!("FL(p=0.5, g=6) = {l:.7}"));
    // gamma 0 is cross-entropy; a confident pixel of 3 classes
    let logits = Tensor::<f64>::from_vec(Shape::new(3, 1, 1), vec![2.0, -1.0, 0.5]).unwrap();
    let z: f64 = [2.0f64, -1.0, 0.5].iter().map(|v| v.exp()).sum();
    let p = 2.0f64.exp() / z;
    let ce = focal_loss(&logits, &Mask::filled(1, 1, 0), 0.0).unwrap().0;
    let fl = focal_loss(&logits, &Mask::filled(1, 1, 0), 2.0).unwrap().0;
    pass &= (ce + p.ln()).abs() < 1e-6 && (fl + (1.0 - p).powi(2) * p.ln()).abs() < 1e-6;
    notes.push("cross-entropy and gamma 2 closed forms match".into());

    let c = LossConfig {
        gamma: 6.0,
        lambda: 0.15,
        main_weight: 1.0,
        local_weight: 0.7,
        global_weight: 0.4,
    };
    let s = Shape::new(3, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 3];
    for _ in 0..10 {
        let target = random_mask(&mut rng, 4, 4, 3);
        let a = random_tensor(&mut rng, s, 3.0);
        let b = random_tensor(&mut rng, s, 3.0);
        let la = random_tensor(&mut rng, s, 1.0);
        let gl = random_tensor(&mut rng, s, 1.0);
        worst[0] = worst[0].max(fd_error(&[a.clone()], &|g, v| phase1_objective(g, v[0], &target, &c).unwrap()));
        worst[1] = worst[1].max(fd_error(&[a.clone(), b.clone(), la.clone()], &|g, v| {
            let global = g.constant(gl.clone());
            phase2_objective(g, v[0], v[1], &target, global, v[2], &c).unwrap()
        }));
        worst[2] = worst[2].max(fd_error(&[a.clone(), b.clone()], &|g, v| {
            phase3_objective(g, v[0], v[1], &target, &c).unwrap()
        }));
    }
    pass &= worst.iter().all(|&e| e < 1e-4);
    notes.push(format!(
        "worst finite-difference error over 10 random 3x4x4 instances: {:.1e} / {:.1e} / {:.1e}",
        worst[0], worst[1], worst[2]
    ));
    outcome(pass, notes.join("; "))
}

// 3 -------------------------------------------------------------------------

fn tiny_config() -> BranchConfig {
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

fn tiny_plan() -> TrainPlan {
    TrainPlan {
        epochs: [1, 1, 1],
        local_only_epochs: 1,
        lr_global: 1e-3,
        lr_local: 1e-3,
        batch_size: 2,
        global_size: 32,
        patch: 32,
        overlap: 8,
        patches_per_image: 3,
        scored_patches: 2,
        ..TrainPlan::default()
    }
}

fn isolation_suite(_: &mut Ctx) -> Outcome {
    let plan = tiny_plan();
    let spec = SynthSpec::desk(64, 3);
    let samples: Vec<Sample<f32>> = (0..2).map(|i| generate_synthetic(&spec, i).unwrap()).collect();
    let set = TrainSet::new(samples, &plan).unwrap();
    let mut model = GlNet::<f32>::new(tiny_config(), SharePlan::DEEP_BIDIR, 0.15, 11).unwrap();
    let mut state = TrainState::new(set.len());
    run_phase1(&mut model, &set, &plan, &mut state).unwrap();

    let sq = |set: &glnet_core::graph::GradSet<f32>, idx: &[usize]| idx.iter().map(|&i| set.tensors[i].sum_sq()).sum::<f32>();
    let mut frozen2 = 0.0f32;
    let mut trained2 = 0.0f32;
    for (image, index) in [(0, 0), (0, 3), (1, 5), (1, 8)] {
        let it = phase2_item(&model, &mut state, &set, image, index, &plan.loss, true).unwrap();
        let f = it.frozen.unwrap();
        frozen2 = frozen2.max(sq(&f, &model.context_branch().feature_params()));
        frozen2 = frozen2.max(if f.is_zero() { 0.0 } else { f32::INFINITY });
        trained2 += sq(&it.trained, &model.local.feature_params());
    }
    let global_before = model.global.params().to_vec();
    run_phase2(&mut model, &set, &plan, &mut state).unwrap();
    let global_kept = model.global.params() == global_before.as_slice();

    let mut frozen3 = 0.0f32;
    let mut trained3 = 0.0f32;
    for image in 0..2 {
        let it = phase3_item(&model, &mut state, &set, image, &[0, 4, 8], &plan.loss, true).unwrap();
        let f = it.frozen.unwrap();
        frozen3 = frozen3.max(sq(&f, &model.local.feature_params()));
        frozen3 = frozen3.max(if f.is_zero() { 0.0 } else { f32::INFINITY });
        trained3 += sq(&it.trained, &model.global.feature_params());
    }
    let local_before = model.local.params().to_vec();
    run_phase3(&mut model, &set, &plan, &mut state).unwrap();
    let local_kept = model.local.params() == local_before.as_slice();

    // the coupling penalty alone, with both sides differentiable
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let local = g.variable(random_tensor(&mut rng, Shape::new(6, 8, 8), 1.0));
    let global = g.variable(random_tensor(&mut rng, Shape::new(6, 8, 8), 1.0));
    let pen = coupling(&mut g, local, global, 0.15).unwrap();
    let grads = g.backward(pen);
    let to_global = grads.wrt(global).map_or(0.0, |t| t.norm());
    let to_local = grads.wrt(local).map_or(0.0, |t| t.norm());

    let pass = frozen2 == 0.0
        && frozen3 == 0.0
        && trained2 > 0.0
        && trained3 > 0.0
        && global_kept
        && local_kept
        && to_global == 0.0
        && to_local > 0.0;
    outcome(
        pass,
        format!(
            "phase 2 frozen global gradient norm {frozen2}, phase 3 frozen local gradient norm {frozen3}; \
             trained-side norms {trained2:.2e} / {trained3:.2e}; frozen weights bit-identical after each phase: {global_kept} / {local_kept}; \
             penalty gradient to global {to_global}, to local {to_local:.2e}"
        ),
    )
}

// 4 -------------------------------------------------------------------------

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

struct SeedResult {
    global: f64,
    local: f64,
    g2l: f64,
    bidir: f64,
    training: f64,
}

fn evaluate(model: &GlNet<f32>, mode: Mode, test: &[Sample<f32>], cfg: &InferConfig) -> f64 {
    let mut cm = ConfusionMatrix::new(model.config().classes);
    for s in test {
        cm.add(&infer_image(model, &s.image, mode, cfg).unwrap().mask, &s.mask).unwrap();
    }
    cm.miou(None).unwrap()
}

fn benchmark_seed(seed: u64) -> SeedResult {
    let cfg = load_config(Some(&configs_dir().join("benchmark.toml")), &[format!("seed={seed}")]).unwrap();
    let plan = cfg.plan();
    let spec = SynthSpec::desk(1024, 1000 + seed);
    let train: Vec<_> = (0..20).map(|i| generate_synthetic(&spec, i).unwrap()).collect();
    let test: Vec<_> = (20..25).map(|i| generate_synthetic(&spec, i).unwrap()).collect();
    let set = TrainSet::new(train, &plan).unwrap();
    let icfg = cfg.infer();
    let fresh = || GlNet::<f32>::new(cfg.branch(), cfg.share().unwrap(), cfg.lambda, seed).unwrap();
    let mut training = 0.0;
    let mut timed = |f: &mut dyn FnMut()| {
        let t = Instant::now();
        f();
        training += t.elapsed().as_secs_f64();
    };

    let mut model = fresh();
    let mut state = TrainState::new(set.len());
    timed(&mut || run_phase1(&mut model, &set, &plan, &mut state).unwrap());
    let global = evaluate(&model, Mode::GlobalOnly, &test, &icfg);
    let mut local_model = fresh();
    let mut local_state = TrainState::new(set.len());
    timed(&mut || run_local_only(&mut local_model, &set, &plan, &mut local_state).unwrap());
    let local = evaluate(&local_model, Mode::LocalOnly, &test, &icfg);
    timed(&mut || run_phase2(&mut model, &set, &plan, &mut state).unwrap());
    let g2l = evaluate(&model, Mode::GlobalToLocal, &test, &icfg);
    timed(&mut || run_phase3(&mut model, &set, &plan, &mut state).unwrap());
    let bidir = evaluate(&model, Mode::Bidirectional, &test, &icfg);
    SeedResult {
        global,
        local,
        g2l,
        bidir,
        training,
    }
}

fn benchmark_ordering(ctx: &mut Ctx) -> Outcome {
    let results: Vec<SeedResult> = [1, 2, 3].into_iter().map(benchmark_seed).collect();
    let mean = |f: fn(&SeedResult) -> f64| results.iter().map(f).sum::<f64>() / results.len() as f64;
    let (g, l, g2l, bi) = (mean(|r| r.global), mean(|r| r.local), mean(|r| r.g2l), mean(|r| r.bidir));
    let margins: Vec<f64> = results.iter().map(|r| r.bidir - r.global.max(r.local)).collect();
    let wins = margins.iter().filter(|&&m| m >= 0.03).count();
    ctx.benchmark_training = Some(results.iter().map(|r| r.training).sum());
    let per_seed: Vec<String> = results
        .iter()
        .zip(1..)
        .map(|(r, s)| format!("seed {s}: {:.3}/{:.3}/{:.3}/{:.3}", r.global, r.local, r.g2l, r.bidir))
        .collect();
    outcome(
        bi >= g2l && g2l >= g.max(l) && wins >= 2,
        format!(
            "mean mIoU global-only {g:.3}, local-only {l:.3}, glnet-g2l {g2l:.3}, glnet-bidir {bi:.3}; \
             bidir beats the best single branch by >= 3 points on {wins} of 3 seeds ({}); training {:.0} s",
            per_seed.join(", "),
            ctx.benchmark_training.unwrap_or(0.0)
        ),
    )
}

// 5 -------------------------------------------------------------------------

fn memory_flatness(_: &mut Ctx) -> Outcome {
    let mut model = GlNet::<f32>::new(BranchConfig::desk(3), SharePlan::DEEP_BIDIR, 0.15, 5).unwrap();
    let cfg = InferConfig { patch: 128, overlap: 16 };
    let sides = [512usize, 1024, 2048];
    let mut peaks: Vec<(Mode, Vec<u64>)> = Vec::new();
    for (mode, stage) in [
        (Mode::Bidirectional, Stage::Bidirectional),
        (Mode::GlobalToLocal, Stage::GlobalToLocal),
        (Mode::GlobalOnly, Stage::Bidirectional),
    ] {
        model.stage = stage;
        let mut row = Vec::new();
        for &side in &sides {
            let image = Tensor::<f32>::from_fn(Shape::new(3, side, side), |c, y, x| {
                (((x * 7 + y * 13 + c * 5) % 97) as f32) / 97.0
            });
            let grid = cfg.grid(side, side).unwrap();
            let mut buf = MergeBuffer::new(&grid, 3, Blend::Average);
            let ((), reading) = measure_peak_memory(|| {
                buf.reset();
                infer_into(&model, &image, mode, None, &mut buf).unwrap();
            })
            .unwrap();
            row.push(reading.delta);
        }
        peaks.push((mode, row));
    }
    let spread = |v: &[u64]| (*v.iter().max().unwrap() as f64 - *v.iter().min().unwrap() as f64) / *v.iter().min().unwrap() as f64;
    let bidir = spread(&peaks[0].1);
    let g2l = spread(&peaks[1].1);
    let global = &peaks[2].1;
    let growth = global[2] as f64 / global[0] as f64;
    let mb = |v: &[u64]| v.iter().map(|b| format!("{:.2}", *b as f64 / 1048576.0)).collect::<Vec<_>>().join("/");
    outcome(
        bidir < 0.10 && g2l < 0.10 && growth >= 3.0,
        format!(
            "peak working set at 512/1024/2048 px (MB): glnet-bidir {} (spread {:.1}%), glnet-g2l {} (spread {:.1}%), global-only {} (x{growth:.1})",
            mb(&peaks[0].1),
            bidir * 100.0,
            mb(&peaks[1].1),
            g2l * 100.0,
            mb(global)
        ),
    )
}

// 6 -------------------------------------------------------------------------

fn in_box_ratio(mask: &Mask, r: PixelRect) -> f64 {
    let mut fg = 0usize;
    for y in r.top..r.top + r.height {
        for x in r.left..r.left + r.width {
            fg += (mask.at(y, x) != 0) as usize;
        }
    }
    let bg = r.height * r.width - fg;
    if bg == 0 {
        f64::INFINITY
    } else {
        fg as f64 / bg as f64
    }
}

fn coarse_to_fine_suite(_: &mut Ctx) -> Outcome {
    let side = 512;
    let mut model = GlNet::<f32>::new(BranchConfig::desk(2), SharePlan::DEEP_BIDIR, 0.15, 6).unwrap();
    model.stage = Stage::Bidirectional;
    // a fine model that calls every pixel foreground
    model.agg.params_mut()[1].data_mut()[1] = 100.0;
    let cfg = InferConfig { patch: 128, overlap: 16 };
    let (mut feasible, mut hit, mut contained, mut leaks, mut fg_inside) = (0, 0, 0, 0, 0);
    let mut ratios = Vec::new();
    for i in 0..100 {
        let fraction = 0.01 + 0.19 * i as f64 / 99.0;
        let sample = generate_lesion(side, side, fraction, 600 + i as u64).unwrap();
        let tight = tight_box(&sample.mask).unwrap();
        let b = relax_bbox(&sample.mask, 1.0, DEFAULT_TOLERANCE).unwrap();
        let inside = |r: &PixelRect, t: &PixelRect| {
            r.top <= t.top && r.left <= t.left && r.top + r.height >= t.top + t.height && r.left + r.width >= t.left + t.width
        };
        contained += inside(&b.rect, &tight) as usize;
        // growing only adds background, so the tight box bounds the ratio
        if in_box_ratio(&sample.mask, tight) >= 0.5 {
            feasible += 1;
            hit += (0.5..=1.5).contains(&b.ratio) as usize;
        }
        ratios.push(b.ratio);
        if i % 4 == 0 {
            let (mask, rect) = fine_segment(&model, &sample.image, Some(&b), Mode::Bidirectional, &cfg).unwrap();
            let rect = rect.unwrap();
            let mut outside = 0;
            for y in 0..side {
                for x in 0..side {
                    let within = y >= rect.top && y < rect.top + rect.height && x >= rect.left && x < rect.left + rect.width;
                    if !within && mask.at(y, x) != 0 {
                        outside += 1;
                    }
                }
            }
            leaks += (outside > 0) as usize;
            fg_inside += (mask.count(1) == rect.height * rect.width) as usize;
        }
    }
    let share = hit as f64 / feasible.max(1) as f64;
    let median = {
        let mut r = ratios.clone();
        r.sort_by(f64::total_cmp);
        r[r.len() / 2]
    };
    outcome(
        share >= 0.95 && contained == 100 && leaks == 0 && fg_inside == 25,
        format!(
            "{hit} of {feasible} feasible masks ({:.0}%) reach an in-box ratio in [0.5, 1.5], median {median:.2}; \
             boxes contain the foreground in {contained}/100; fine pass leaks foreground outside its box in {leaks}/25 runs",
            share * 100.0
        ),
    )
}

// 7 -------------------------------------------------------------------------

fn oracle_miou(preds: &[Mask], gts: &[Mask], classes: u8, ignore: Option<u8>) -> Option<f64> {
    let mut ious = Vec::new();
    for c in 0..classes {
        if Some(c) == ignore {
            continue;
        }
        let (mut inter, mut union) = (0u64, 0u64);
        for (p, g) in preds.iter().zip(gts) {
            for (&pv, &gv) in p.data.iter().zip(&g.data) {
                if Some(gv) == ignore {
                    continue;
                }
                inter += (pv == c && gv == c) as u64;
                union += (pv == c || gv == c) as u64;
            }
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

fn metric_suite(_: &mut Ctx) -> Outcome {
    let gt = Mask::filled(10, 10, 1);
    let partial = |n: usize| Mask::from_vec(10, 10, (0..100).map(|i| (i < n) as u8).collect()).unwrap();
    let s64 = isic_score(&[partial(64)], &[gt.clone()]).unwrap();
    let s66 = isic_score(&[partial(66)], &[gt.clone()]).unwrap();
    let s100 = isic_score(&[gt.clone()], &[gt.clone()]).unwrap();
    let rule = isic_threshold(0.64) == 0.0 && isic_threshold(0.66) == 0.66 && s64 == 0.0 && s66 == 0.66 && s100 == 1.0;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut agree = true;
    for _ in 0..300 {
        let k: u8 = rng.random_range(2..6);
        let n = rng.random_range(1..4);
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let preds: Vec<Mask> = (0..n).map(|_| random_mask(&mut rng, h, w, k)).collect();
        let gts: Vec<Mask> = (0..n).map(|_| random_mask(&mut rng, h, w, k)).collect();
        let ignore = rng.random_bool(0.3).then(|| rng.random_range(0..k));
        match (miou(&preds, &gts, k as usize, ignore), oracle_miou(&preds, &gts, k, ignore)) {
            (Ok(a), Some(b)) => worst = worst.max((a - b).abs()),
            (Err(_), None) => {}
            _ => agree = false,
        }
    }
    let pass = rule && agree && worst < 1e-12;
    outcome(
        pass,
        format!(
            "isic: IoU 0.64 scores {s64}, IoU 0.66 scores {s66}, perfect scores {s100}; \
             mIoU against a per-pixel oracle on 300 random mask sets: max difference {worst:.1e}"
        ),
    )
}

// 8 -------------------------------------------------------------------------

fn glnet(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_glnet"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).trim().to_string())
    }
}

fn reproducibility(ctx: &mut Ctx) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let data = data.to_str().unwrap();
    let config = configs_dir().join("benchmark.toml");
    let config = config.to_str().unwrap();
    glnet(&["synthesize", "--out", data, "--canvas", "512", "--n", "5", "--seed", "8"]).unwrap();
    let start = Instant::now();
    let mut outs = Vec::new();
    for run in ["a", "b"] {
        let out = d.join(run);
        let out = out.to_str().unwrap().to_string();
        glnet(&["train", "--config", config, "--data", data, "--out", &out, "--seed", "3"]).unwrap();
        outs.push(PathBuf::from(out));
    }
    let seconds = start.elapsed().as_secs_f64();
    let mut files = Vec::new();
    let mut differ = Vec::new();
    for stem in ["phase1", "phase2", "phase3"] {
        for ext in ["ckpt", "losses.csv"] {
            let name = format!("{stem}.{ext}");
            let a = std::fs::read(outs[0].join(&name)).unwrap();
            let b = std::fs::read(outs[1].join(&name)).unwrap();
            if a != b {
                differ.push(name.clone());
            }
            files.push(name);
        }
    }
    let budget = ctx.benchmark_training.map(|t| 2.0 * t);
    let in_budget = budget.is_none_or(|b| seconds <= b);
    let budget_note = match budget {
        Some(b) => format!("{seconds:.0} s for both runs against a {b:.0} s budget"),
        None => format!("{seconds:.0} s for both runs (budget unchecked: criterion 4 did not run)"),
    };
    outcome(
        differ.is_empty() && in_budget,
        if differ.is_empty() {
            format!("{} checkpoint and loss files byte-identical across two seeded runs; {budget_note}", files.len())
        } else {
            format!("differing files: {}; {budget_note}", differ.join(", "))
        },
    )
}
