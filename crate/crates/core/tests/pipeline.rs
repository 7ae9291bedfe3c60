//! End-to-end runs of the core pipeline on a tiny network.

use glnet_core::coarse2fine::coarse_to_fine;
use glnet_core::data::{generate_synthetic, SynthSpec};
use glnet_core::inference::{infer_image, infer_into, InferConfig, Mode};
use glnet_core::model::{BranchConfig, GlNet, SharePlan, Stage};
use glnet_core::tiling::{Blend, MergeBuffer};
use glnet_core::training::{run_local_only, train, Phase, TrainPlan, TrainSet, TrainState};
use glnet_core::{Error, Shape, Tensor};

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
        epochs: [2, 1, 1],
        local_only_epochs: 1,
        lr_global: 1e-3,
        lr_local: 1e-3,
        batch_size: 2,
        global_size: 32,
        patch: 32,
        overlap: 8,
        patches_per_image: 3,
        scored_patches: 2,
        seed: 4,
        ..TrainPlan::default()
    }
}

fn trained(seed: u64) -> (GlNet<f32>, Vec<Phase>) {
    let plan = tiny_plan();
    let spec = SynthSpec::desk(64, 9);
    let samples = (0..3).map(|i| generate_synthetic(&spec, i).unwrap()).collect();
    let set = TrainSet::new(samples, &plan).unwrap();
    let mut model = GlNet::new(tiny_config(), SharePlan::DEEP_BIDIR, 0.15, seed).unwrap();
    let mut state = TrainState::new(set.len());
    let mut phases = Vec::new();
    train(&mut model, &set, &plan, &mut state, |p, m, _| {
        phases.push(p);
        assert!(m.global.params().iter().all(|t| t.data().iter().all(|v| v.is_finite())));
        Ok(())
    })
    .unwrap();
    (model, phases)
}

#[test]
fn schedule_runs_all_phases_and_is_reproducible() {
    let (a, phases) = trained(2);
    assert_eq!(phases, [Phase::Global, Phase::GlobalToLocal, Phase::Bidirectional]);
    assert_eq!(a.stage, Stage::Bidirectional);
    let (b, _) = trained(2);
    assert_eq!(a.global.params(), b.global.params());
    assert_eq!(a.local.params(), b.local.params());
    assert_eq!(a.agg.params(), b.agg.params());
    let (c, _) = trained(3);
    assert_ne!(a.global.params(), c.global.params());
}

#[test]
fn inference_covers_the_image_in_every_allowed_mode() {
    let (model, _) = trained(2);
    let image = generate_synthetic(&SynthSpec::desk(80, 5), 0).unwrap().image;
    let cfg = InferConfig { patch: 32, overlap: 8 };
    for mode in [Mode::GlobalOnly, Mode::Bidirectional] {
        let seg = infer_image(&model, &image, mode, &cfg).unwrap();
        assert_eq!((seg.mask.h, seg.mask.w), (80, 80));
        assert!(seg.mask.data.iter().all(|&v| v < 3));
    }
    for mode in [Mode::LocalOnly, Mode::GlobalToLocal] {
        assert!(matches!(
            infer_image(&model, &image, mode, &cfg),
            Err(Error::ModeMismatch { .. })
        ));
    }
}

#[test]
fn patch_order_does_not_change_the_result() {
    let (model, _) = trained(2);
    let image = generate_synthetic(&SynthSpec::desk(72, 6), 1).unwrap().image;
    let cfg = InferConfig { patch: 32, overlap: 8 };
    let grid = cfg.grid(72, 72).unwrap();
    let run = |order: Option<&[usize]>| {
        let mut buf = MergeBuffer::new(&grid, 3, Blend::Average);
        infer_into(&model, &image, Mode::Bidirectional, order, &mut buf).unwrap();
        buf.finish().unwrap()
    };
    let forward = run(None);
    let reversed: Vec<usize> = (0..grid.rects.len()).rev().collect();
    let backward = run(Some(&reversed));
    assert!(forward.max_abs_diff(&backward) < 1e-5);
}

#[test]
fn local_only_baseline_trains_without_the_global_branch() {
    let plan = tiny_plan();
    let spec = SynthSpec::desk(64, 9);
    let set = TrainSet::new((0..2).map(|i| generate_synthetic(&spec, i).unwrap()).collect(), &plan).unwrap();
    let mut model = GlNet::<f32>::new(tiny_config(), SharePlan::DEEP_BIDIR, 0.15, 1).unwrap();
    let global = model.global.params().to_vec();
    run_local_only(&mut model, &set, &plan, &mut TrainState::new(set.len())).unwrap();
    assert_eq!(model.global.params(), global.as_slice());
    let image = Tensor::<f32>::from_fn(Shape::new(3, 40, 40), |c, y, x| ((c + y + x) % 5) as f32 / 5.0);
    let seg = infer_image(&model, &image, Mode::LocalOnly, &InferConfig { patch: 32, overlap: 8 }).unwrap();
    assert_eq!((seg.mask.h, seg.mask.w), (40, 40));
}

#[test]
fn coarse_to_fine_returns_a_full_size_mask() {
    let (model, _) = trained(2);
    let image = generate_synthetic(&SynthSpec::desk(96, 7), 0).unwrap().image;
    let cfg = InferConfig { patch: 32, overlap: 8 };
    let out = coarse_to_fine(&model, &model, &image, Mode::Bidirectional, &cfg, 0.1).unwrap();
    assert_eq!((out.0.h, out.0.w), (96, 96));
}
