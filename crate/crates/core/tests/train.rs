//! Trainer-level contracts on tiny scenes.

use splat4d::anchor::{anchor_loss, Stage};
use splat4d::dataset::SceneDataset;
use splat4d::deform::{deform, tv_loss_grad};
use splat4d::guidance::{l1_loss, masked_image_loss};
use splat4d::model::layout;
use splat4d::raster::render;
use splat4d::synth::{render_scene, SceneSpec};
use splat4d::train::{total_loss, train, LossContext, TrainConfig, Trainer};

fn tiny(name: &str) -> SceneDataset {
    let mut spec = SceneSpec::bundled(name).unwrap();
    spec.width = 20;
    spec.height = 20;
    spec.timestamps = 4;
    spec.rig.train_views = 4;
    spec.rig.test_views = 1;
    spec.rig.focal *= 20.0 / 64.0;
    spec.supersample = 1;
    spec.init_points = 120;
    render_scene(&spec, 3).unwrap()
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        coarse_iters: 6,
        fine_iters: 6,
        densify_interval: 4,
        deform_resolution: [4, 4, 4, 3],
        deform_hidden: 8,
        codec_iters: 200,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_fine_iters_is_coarse_only() {
    let ds = tiny("static-textured");
    let cfg = TrainConfig { fine_iters: 0, ..tiny_cfg() };
    let out = train(&ds, &cfg, None).unwrap();
    assert!(out.log.iter().all(|r| r.stage == Stage::Coarse));
    assert_eq!(out.counters.stage_switches, 0);
    assert_eq!(out.checkpoint.meta.stage, "coarse");
    // Deformation never trained: the field is bit-identical to a fresh one.
    let fresh = Trainer::new(&ds, cfg, None).unwrap();
    assert_eq!(out.checkpoint.field, fresh.field);
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let ds = tiny("dynamic-clean");
    let a = train(&ds, &tiny_cfg(), None).unwrap().checkpoint.to_bytes();
    let b = train(&ds, &tiny_cfg(), None).unwrap().checkpoint.to_bytes();
    assert!(a == b);
    let c = train(&ds, &TrainConfig { seed: 1, ..tiny_cfg() }, None).unwrap().checkpoint.to_bytes();
    assert!(a != c);
}

#[test]
fn thread_count_does_not_change_checkpoint() {
    let ds = tiny("dynamic-clean");
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train(&ds, &tiny_cfg(), None).unwrap().checkpoint.to_bytes())
    };
    assert!(run(1) == run(3));
}

#[test]
fn stage_switch_once_and_deformation_frozen_before_it() {
    let ds = tiny("dynamic-clean");
    let cfg = tiny_cfg();
    let mut t = Trainer::new(&ds, cfg.clone(), None).unwrap();
    let field0 = t.field.clone();
    let mut switches = Vec::new();
    let mut prev = t.stage();
    let mut max_gen = vec![];
    while !t.is_done() {
        let it = t.state.iteration;
        if t.stage() == Stage::Coarse {
            let batch = [0usize, 1];
            let (_, g) = total_loss(&t.context(), &t.cloud, &t.field, &batch).unwrap();
            assert!(g.grid.iter().chain(&g.mlp).all(|&v| v == 0.0), "deformation gradient at {it}");
        }
        let gens_before: Vec<u32> = t.cloud.gaussians.iter().map(|g| g.generation).collect();
        let rec = t.step().unwrap();
        if rec.stage != prev {
            switches.push(it);
            prev = rec.stage;
        }
        if rec.stage == Stage::Coarse {
            assert_eq!(t.field, field0);
        }
        // The round only moves forward, and so does the largest generation tag.
        let m = t.cloud.gaussians.iter().map(|g| g.generation).max().unwrap_or(0);
        assert!(gens_before.iter().all(|&g| g <= t.cloud.round));
        max_gen.push(m);
    }
    assert_eq!(switches, vec![cfg.coarse_iters]);
    assert_eq!(t.state.counters.stage_switches, 1);
    assert!(max_gen.windows(2).all(|w| w[0] <= w[1]));
    // Anchors refresh at every densification event plus the stage switch.
    assert!(t.state.counters.densify_events > 0);
    assert_eq!(t.state.counters.anchor_refreshes, t.state.counters.densify_events + 1);
    assert_eq!(t.cloud.round as usize, t.state.counters.densify_events);
}

#[test]
fn total_loss_is_sum_of_components() {
    let ds = tiny("dynamic-clean");
    let cfg = TrainConfig { lambda_m: 0.7, lambda_a: 2.0, lambda_s: 0.3, lambda_tv: 1.5, ..tiny_cfg() };
    let mut t = Trainer::new(&ds, cfg.clone(), None).unwrap();
    // A few fine steps so anchors, deformation and features are all non-trivial.
    t.cfg.coarse_iters = 2;
    for _ in 0..5 {
        t.step().unwrap();
    }
    assert_eq!(t.stage(), Stage::Fine);
    let batch = [1usize, 2];
    let (terms, _) = total_loss(&t.context(), &t.cloud, &t.field, &batch).unwrap();

    // Independent recomputation of every component.
    let rc = cfg.render();
    let (mut photo, mut sem) = (0.0, 0.0);
    let n = t.cloud.feature_dim;
    let nl = n / 3;
    for &fi in &batch {
        let f = &ds.frames[fi];
        let st = deform(&t.field, &t.cloud, f.time()).unwrap().state;
        let out = render(&t.cloud, &st, &f.camera, ds.background, &rc).unwrap();
        photo += masked_image_loss(&out.color, &f.image, &f.mask, t.mask_lambda, &cfg.guidance()).unwrap().0 / 2.0;
        let npx = out.feature.pixels();
        for (s, classes) in f.classes.iter().enumerate() {
            let mut acc = 0.0;
            for p in 0..npx {
                let target = &t.latents[classes[p] as usize];
                for c in 0..nl {
                    acc += (out.feature.data[p * n + s * nl + c] - target[c]).abs();
                }
            }
            sem += acc / (npx * nl) as f64 / 2.0;
        }
        // The coarse path would use plain L1 instead.
        assert!(l1_loss(&out.color, &f.image).unwrap().0.is_finite());
    }
    let anchor = anchor_loss(&t.cloud, Stage::Fine, &cfg.anchor()).unwrap().0 / t.cloud.len() as f64;
    let tv = tv_loss_grad(&t.field).0;
    let expect = 0.7 * photo + 2.0 * anchor + 0.3 * sem + 1.5 * tv;
    assert!((terms.photometric - photo).abs() < 1e-8);
    assert!((terms.semantic - sem).abs() < 1e-8);
    assert!((terms.anchor - anchor).abs() < 1e-8);
    assert!((terms.tv - tv).abs() < 1e-8);
    assert!((terms.total - expect).abs() < 1e-8, "{} vs {}", terms.total, expect);
}

#[test]
fn zero_weights_give_zero_loss_and_gradients() {
    let ds = tiny("dynamic-clean");
    let cfg = TrainConfig { lambda_m: 0.0, lambda_a: 0.0, lambda_s: 0.0, lambda_tv: 0.0, ..tiny_cfg() };
    let t = Trainer::new(&ds, cfg, None).unwrap();
    for stage in [Stage::Coarse, Stage::Fine] {
        let ctx = LossContext { stage, ..t.context() };
        let (terms, g) = total_loss(&ctx, &t.cloud, &t.field, &[0, 1]).unwrap();
        assert_eq!(terms.total, 0.0);
        assert!(g.cloud.iter().chain(&g.grid).chain(&g.mlp).all(|&v| v == 0.0));
    }
}

#[test]
fn coarse_anchor_gradient_skips_features() {
    let ds = tiny("dynamic-clean");
    let cfg = TrainConfig { lambda_m: 0.0, lambda_s: 0.0, lambda_tv: 0.0, ..tiny_cfg() };
    let mut t = Trainer::new(&ds, cfg, None).unwrap();
    for g in &mut t.cloud.gaussians {
        g.params.position[0] += 0.01;
        for f in &mut g.params.feature {
            *f += 0.5;
        }
    }
    let stride = t.cloud.stride();
    let (_, g) = total_loss(&t.context(), &t.cloud, &t.field, &[0]).unwrap();
    for row in g.cloud.chunks_exact(stride) {
        assert!(row[layout::FEATURE_START..].iter().all(|&v| v == 0.0));
        assert!(row[layout::POSITION.start] != 0.0);
    }
}

#[test]
fn invalid_config_is_rejected_before_training() {
    let ds = tiny("static-textured");
    let cfg = TrainConfig { batch_size: 0, ..tiny_cfg() };
    assert!(Trainer::new(&ds, cfg, None).is_err());
    assert!(TrainConfig::from_toml_str("no_such_key = 1").is_err());
    let round = TrainConfig::from_toml_str(&tiny_cfg().to_toml()).unwrap();
    assert_eq!(round, tiny_cfg());
}
