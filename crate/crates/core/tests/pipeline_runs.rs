use std::sync::OnceLock;

use skipforge_core::checkpoint::Checkpoint;
use skipforge_core::injection::{ChannelMaskSpec, InjectionPlan, InjectionWindow, NoiseSource};
use skipforge_core::pipeline::*;
use skipforge_core::scheduler::{SamplerConfig, ScheduleConfig};
use skipforge_core::train::{train, TrainConfig};
use skipforge_core::unet::{Conditioning, TapId, UNetConfig};
use skipforge_core::{Error, Tensor};

fn checkpoint() -> &'static Checkpoint {
    static CK: OnceLock<Checkpoint> = OnceLock::new();
    CK.get_or_init(|| {
        train(&UNetConfig::smoke(), &TrainConfig::smoke(), ScheduleConfig::default(), |_| {}).unwrap().checkpoint
    })
}

fn engine() -> Engine<'static> {
    Engine::new(checkpoint()).unwrap()
}

fn sampler(steps: usize) -> SamplerConfig {
    SamplerConfig { num_steps: steps, ..Default::default() }
}

fn cls(id: u32) -> Conditioning {
    Conditioning::class(id)
}

fn full_plan(gamma: f64) -> InjectionPlan {
    InjectionPlan {
        taps: engine().model.tap_ids().into_iter().collect(),
        window: InjectionWindow::full(1000),
        gamma,
        ..Default::default()
    }
}

#[test]
fn identical_conditions_reproduce_the_source() {
    let e = engine();
    let r = e.edit_generated(3, cls(5), cls(5), &full_plan(1.0), &sampler(10)).unwrap();
    assert_eq!(r.edited.max_abs_diff(&r.image_a), 0.0);
    assert_eq!(r.edited.max_abs_diff(&r.baseline), 0.0);
}

#[test]
fn window_between_grid_times_leaves_the_baseline() {
    let e = engine();
    let plan = InjectionPlan { window: InjectionWindow::new(5, 5), ..Default::default() };
    let r = e.edit_generated(3, cls(5), cls(40), &plan, &sampler(20)).unwrap();
    assert!(r.injected_steps.is_empty());
    assert_eq!(r.edited.max_abs_diff(&r.baseline), 0.0);
}

#[test]
fn default_plan_changes_the_output() {
    let e = engine();
    let r = e.edit_generated(3, cls(5), cls(40), &InjectionPlan::default(), &sampler(20)).unwrap();
    assert!(r.edited.max_abs_diff(&r.baseline) > 0.0);
    assert!(r.edited.max_abs_diff(&r.image_a) > 0.0);
    assert!(r.edited.data().iter().all(|v| v.is_finite()));
}

#[test]
fn inverted_noise_sources_start_from_the_inversion() {
    let e = engine();
    let plan = InjectionPlan { noise_source: NoiseSource::InvertedA, ..Default::default() };
    let inv = e.edit_generated(3, cls(5), cls(40), &plan, &sampler(10)).unwrap();
    let shared = e.edit_generated(3, cls(5), cls(40), &InjectionPlan::default(), &sampler(10)).unwrap();
    assert_eq!(inv.image_a.max_abs_diff(&shared.image_a), 0.0);
    assert!(inv.baseline.max_abs_diff(&shared.baseline) > 0.0);
}

#[test]
fn real_image_edit_endpoints() {
    let e = engine();
    let img =
        skipforge_core::synthdata::render_scene_sized(&skipforge_core::synthdata::generate_specs(1, 9)[0], 32).image;
    let r = e.edit_real(&img, "scene", cls(5), cls(40), &full_plan(0.0), &sampler(10)).unwrap();
    assert_eq!(r.edited.max_abs_diff(&r.baseline), 0.0);
    assert!(r.input.is_some());
    // Same condition with full self-injection equals the plain reconstruction.
    let r = e.edit_real(&img, "scene", cls(5), cls(5), &full_plan(1.0), &sampler(10)).unwrap();
    assert_eq!(r.edited.max_abs_diff(&r.image_a), 0.0);

    let small = Tensor::zeros(vec![1, 3, 16, 16]);
    match e.edit_real(&small, "small", cls(5), cls(40), &InjectionPlan::default(), &sampler(10)) {
        Err(Error::Invalid { field, .. }) => assert_eq!(field, "source.image"),
        other => panic!("expected a resolution error, got {other:?}"),
    }
}

#[test]
fn style_transfer_at_zero_gamma_is_the_style_class_generation() {
    let e = engine();
    let plan = InjectionPlan { gamma: 0.0, ..style_plan() };
    let r = e.style_transfer(&StyleContent::Seed(4), cls(1), cls(63), &plan, &sampler(10)).unwrap();
    let plain = e.generate(4, cls(63), &sampler(10)).unwrap();
    assert_eq!(r.edited.max_abs_diff(&plain.image), 0.0);
    assert_eq!(style_plan().gamma, 0.65);
    assert_eq!(style_plan().mask, ChannelMaskSpec::Period(15));
}

#[test]
fn group_sweep_makes_seven_tiles_and_rejects_empty_groups() {
    let e = engine();
    let res = e.group_sweep(2, cls(5), cls(40), &sampler(5), &Group::ALL).unwrap();
    assert_eq!(res.variants.len(), 5);
    let m = res.montage("SEED=2").unwrap();
    // 32 px tiles at 3x zoom.
    assert_eq!(m.width(), (96 + 4) * 7 + 4);
    match e.group_sweep(2, cls(5), cls(40), &sampler(5), &[Group::Skip(9)]) {
        Err(Error::Invalid { field, .. }) => assert_eq!(field, "groups"),
        other => panic!("expected an empty-group error, got {other:?}"),
    }
}

fn small_grid() -> SweepGrid {
    SweepGrid {
        taps: vec![[TapId::Skip(4)].into(), [TapId::Skip(4), TapId::Skip(5)].into()],
        windows: vec![InjectionWindow::new(0, 1000), InjectionWindow::new(400, 900)],
        gammas: vec![0.0, 1.0],
        masks: vec![ChannelMaskSpec::Full],
        sources: vec![NoiseSource::SharedRandom],
    }
}

#[test]
fn sweep_rows_are_counted_ordered_and_stable_across_workers() {
    let e = engine();
    let mut base = EditRequest::edit_generated(6, 5, 40);
    base.sampler = sampler(5);
    let grid = small_grid();
    let one = e.run_sweep(&base, &grid, 1).unwrap();
    assert_eq!(one.rows.len(), 8);
    let two = e.run_sweep(&base, &grid, 2).unwrap();
    assert_eq!(one, two);
    for row in &one.rows {
        if row.switch_g == 0.0 {
            assert_eq!(row.structure_dist, 0.0, "{row:?}");
            assert_eq!(row.perceptual_dist, 0.0, "{row:?}");
        }
        assert!((0.0..=1.0).contains(&row.fidelity));
    }
    let order: Vec<_> = one.rows.iter().map(|r| (r.skip.as_str(), r.injection_t.as_str(), r.switch_g)).collect();
    assert_eq!(order[0], ("4", "0-1000", 0.0));
    assert_eq!(order[3], ("4", "400-900", 1.0));
    assert_eq!(order[4], ("4+5", "0-1000", 0.0));
    let csv = one.to_csv().unwrap();
    assert_eq!(SweepTable::from_csv(&csv).unwrap(), one);
    assert!(csv.starts_with(&format!("# checkpoint={} grid=", e.checkpoint_hash)));
}

#[test]
fn empty_sweep_axis_is_rejected() {
    let e = engine();
    let grid = SweepGrid { gammas: vec![], ..small_grid() };
    match e.run_sweep(&EditRequest::edit_generated(6, 5, 40), &grid, 1) {
        Err(Error::Invalid { field, .. }) => assert_eq!(field, "grid.gammas"),
        other => panic!("expected an empty-axis error, got {other:?}"),
    }
}

#[test]
fn stored_requests_replay_to_identical_images() {
    let e = engine();
    let mut req = EditRequest::edit_generated(8, 12, 50);
    req.sampler = sampler(8);
    let json = req.canonical_json().unwrap();
    let no_images = |_: &str| -> skipforge_core::Result<Tensor> { unreachable!() };
    let a = e.run_request(&req, &no_images).unwrap();
    let b = e.run_request(&serde_json::from_str(&json).unwrap(), &no_images).unwrap();
    assert_eq!(a.images.len(), b.images.len());
    for ((na, ta), (nb, tb)) in a.images.iter().zip(&b.images) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data());
    }
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn one_step_edits_fire_the_hook_once() {
    let e = engine();
    let plan = InjectionPlan { window: InjectionWindow::full(1000), ..Default::default() };
    let r = e.edit_generated(1, cls(5), cls(40), &plan, &sampler(1)).unwrap();
    assert_eq!(r.injected_steps, vec![0]);
    assert!(r.edited.data().iter().all(|v| v.is_finite()));
}
