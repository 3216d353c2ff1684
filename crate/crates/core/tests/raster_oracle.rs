//! Rasterizer against a brute-force compositor written with nalgebra.

mod common;

use common::{brute_force, max_diff, random_camera, random_cloud};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splat4d::raster::{render, DeformedState, RenderConfig};
use splat4d::real::Precision;

#[test]
fn matches_brute_force_on_100_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = RenderConfig::exact();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..40);
        let cloud = random_cloud(&mut rng, n, 3);
        let (w, h) = (rng.gen_range(8..24), rng.gen_range(8..24));
        let cam = random_camera(&mut rng, w, h);
        let bg = [rng.gen(), rng.gen(), rng.gen()];
        let out = render(&cloud, &DeformedState::canonical(&cloud), &cam, bg, &cfg).unwrap();
        let o = brute_force(&cloud, &cam, bg);
        worst = worst
            .max(max_diff(&out.color.data, &o.color))
            .max(max_diff(&out.feature.data, &o.feature))
            .max(max_diff(&out.alpha.data, &o.alpha));
    }
    assert!(worst < 1e-6, "max per-pixel difference {worst:e}");
}

#[test]
fn f32_render_tracks_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = RenderConfig::exact().with_precision(Precision::F32);
    for _ in 0..20 {
        let cloud = random_cloud(&mut rng, 25, 2);
        let cam = random_camera(&mut rng, 16, 16);
        let out = render(&cloud, &DeformedState::canonical(&cloud), &cam, [0.2, 0.3, 0.4], &cfg).unwrap();
        let o = brute_force(&cloud, &cam, [0.2, 0.3, 0.4]);
        assert!(max_diff(&out.color.data, &o.color) < 1e-4);
    }
}

#[test]
fn featureless_cloud_renders() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10 {
        let cloud = random_cloud(&mut rng, 12, 0);
        let cam = random_camera(&mut rng, 12, 10);
        let out = render(&cloud, &DeformedState::canonical(&cloud), &cam, [0.1, 0.5, 0.9], &RenderConfig::exact()).unwrap();
        let o = brute_force(&cloud, &cam, [0.1, 0.5, 0.9]);
        assert!(out.feature.data.is_empty());
        assert!(max_diff(&out.color.data, &o.color) < 1e-6);
        assert!(max_diff(&out.alpha.data, &o.alpha) < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Accumulated alpha plus final transmittance is one. The transmittance is
    // read off as the color difference between a white and a black background.
    #[test]
    fn transmittance_telescopes(seed in any::<u64>(), n in 0usize..30, default_cfg in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = random_cloud(&mut rng, n, 1);
        let cam = random_camera(&mut rng, 12, 10);
        let cfg = if default_cfg { RenderConfig::default().with_precision(Precision::F64) } else { RenderConfig::exact() };
        let st = DeformedState::canonical(&cloud);
        let black = render(&cloud, &st, &cam, [0.0; 3], &cfg).unwrap();
        let white = render(&cloud, &st, &cam, [1.0; 3], &cfg).unwrap();
        for px in 0..120 {
            let t = white.color.data[px * 3] - black.color.data[px * 3];
            prop_assert!((black.alpha.data[px] + t - 1.0).abs() < 1e-6);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&black.alpha.data[px]));
        }
    }

    #[test]
    fn render_ignores_gaussian_order_up_to_ties(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = random_cloud(&mut rng, 15, 2);
        let cam = random_camera(&mut rng, 10, 10);
        let mut rev = cloud.clone();
        rev.gaussians.reverse();
        let cfg = RenderConfig::exact();
        let a = render(&cloud, &DeformedState::canonical(&cloud), &cam, [0.5; 3], &cfg).unwrap();
        let b = render(&rev, &DeformedState::canonical(&rev), &cam, [0.5; 3], &cfg).unwrap();
        prop_assert!(max_diff(&a.color.data, &b.color.data) < 1e-12);
    }
}
