//! Central finite-difference check of every analytic gradient class on small
//! random scenes rendered in 64-bit mode.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codec::{reconstruction_grad, reconstruction_loss, CodecConfig, FeatureCodec, ReconLoss};
use crate::deform::{deform, deform_backward, DeformConfig, DeformationField};
use crate::error::{Error, Result};
use crate::model::{layout, logit, Camera, Gaussian, GaussianCloud, GaussianParams};
use crate::raster::{render, render_backward, RenderConfig, Upstream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    Position,
    LogScale,
    Rotation,
    OpacityLogit,
    Color,
    Feature,
    DeformGrid,
    DeformMlp,
    CodecMlp,
}

impl ParamClass {
    pub const ALL: [ParamClass; 9] = [
        ParamClass::Position,
        ParamClass::LogScale,
        ParamClass::Rotation,
        ParamClass::OpacityLogit,
        ParamClass::Color,
        ParamClass::Feature,
        ParamClass::DeformGrid,
        ParamClass::DeformMlp,
        ParamClass::CodecMlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::Position => "position",
            ParamClass::LogScale => "log_scale",
            ParamClass::Rotation => "rotation",
            ParamClass::OpacityLogit => "opacity_logit",
            ParamClass::Color => "color",
            ParamClass::Feature => "feature",
            ParamClass::DeformGrid => "deformation_grid",
            ParamClass::DeformMlp => "deformation_mlp",
            ParamClass::CodecMlp => "codec_mlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    fn columns(self, feature_dim: usize) -> std::ops::Range<usize> {
        match self {
            ParamClass::Position => layout::POSITION,
            ParamClass::LogScale => layout::LOG_SCALE,
            ParamClass::Rotation => layout::ROTATION,
            ParamClass::OpacityLogit => layout::OPACITY..layout::OPACITY + 1,
            ParamClass::Color => layout::COLOR,
            ParamClass::Feature => layout::feature(feature_dim),
            _ => 0..0,
        }
    }
}

impl fmt::Display for ParamClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub scenes: usize,
    pub gaussians: usize,
    pub size: u32,
    pub feature_dim: usize,
    /// Finite-difference step for per-Gaussian parameters.
    pub step: f64,
    /// Steps for grid values and MLP weights. The loss is nearly linear in
    /// them, so roundoff rather than truncation sets the error.
    pub grid_step: f64,
    pub mlp_step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            scenes: 10,
            gaussians: 20,
            size: 16,
            feature_dim: 3,
            step: 1e-4,
            grid_step: 1e-2,
            mlp_step: 1e-3,
            tolerance: 1e-4,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub class: ParamClass,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub classes: Vec<ClassReport>,
    pub passed: bool,
}

/// Hook that may alter analytic gradients before comparison (to prove the check bites).
pub type Corruption<'a> = &'a dyn Fn(ParamClass, &mut [f64]);

struct Scene {
    cloud: GaussianCloud,
    field: DeformationField,
    cam: Camera,
    t: f64,
    up: Upstream,
    background: [f64; 3],
}

fn random_scene(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let mut cloud = GaussianCloud::new(cfg.feature_dim);
    let n = rng.gen_range(cfg.gaussians.min(4).max(1)..=cfg.gaussians.max(1));
    for _ in 0..n {
        let pos = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
        let mut p = GaussianParams::new(pos, 1.0, 0.5, [0.0; 3], cfg.feature_dim);
        for a in 0..3 {
            p.log_scale[a] = rng.gen_range(0.08f64..0.25).ln();
            p.color[a] = rng.gen_range(0.0..1.0);
        }
        let q: [f64; 4] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        p.rotation = q.map(|v| v / qn);
        p.opacity_logit = logit(rng.gen_range(0.2..0.9));
        p.feature = (0..cfg.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        cloud.push(Gaussian::new(p))?;
    }
    let dcfg = DeformConfig {
        resolution: [3, 3, 3, 2],
        channels: 3,
        hidden: 6,
        time_input: true,
        grid_init: 0.5,
    };
    let mut field = DeformationField::new(&dcfg, [-1.0; 3], [1.0; 3], rng)?;
    // Live output layer so every offset path carries gradient.
    let (w, b) = field.mlp.layer_ranges(field.mlp.layers() - 1);
    for k in w.chain(b) {
        field.mlp.params[k] = rng.gen_range(-0.05..0.05);
    }
    let (w, h) = (cfg.size, cfg.size);
    let cam = Camera::look_at([0.3, -0.2, -3.0], [0.0; 3], [0.0, -1.0, 0.0], cfg.size as f64 * 1.2, w, h);
    let npx = (w * h) as usize;
    let mut r = |k: usize| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let up = Upstream {
        color: r(npx * 3),
        feature: r(npx * cfg.feature_dim),
        alpha: r(npx),
    };
    Ok(Scene {
        cloud,
        field,
        cam,
        t: rng.gen_range(0.05..0.95),
        up,
        background: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
    })
}

fn scene_loss(s: &Scene, cloud: &GaussianCloud, field: &DeformationField, rc: &RenderConfig) -> Result<f64> {
    let state = deform(field, cloud, s.t)?.state;
    let out = render(cloud, &state, &s.cam, s.background, rc)?;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    Ok(dot(&out.color.data, &s.up.color) + dot(&out.feature.data, &s.up.feature) + dot(&out.alpha.data, &s.up.alpha))
}

struct Acc {
    checked: usize,
    max_rel: f64,
}

// Five-point stencil; truncation error O(h^4) lets h stay large enough to
// keep roundoff well below the tolerance.
fn central(f: impl Fn(f64) -> Result<f64>, h: f64) -> Result<f64> {
    Ok((f(-2.0 * h)? - 8.0 * f(-h)? + 8.0 * f(h)? - f(2.0 * h)?) / (12.0 * h))
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare analytic and central-difference gradients for every parameter class.
pub fn check_gradients(cfg: &GradCheckConfig, corrupt: Option<Corruption>) -> Result<GradCheckReport> {
    if cfg.scenes == 0 || cfg.size == 0 {
        return Err(Error::Config("gradient check needs at least one scene and pixel".into()));
    }
    let rc = RenderConfig::exact();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut acc: Vec<Acc> = ParamClass::ALL.iter().map(|_| Acc { checked: 0, max_rel: 0.0 }).collect();
    let h = cfg.step;
    let record = |acc: &mut Vec<Acc>, class: ParamClass, analytic: &[f64], numeric: &[f64]| {
        let mut a = analytic.to_vec();
        if let Some(f) = corrupt {
            f(class, &mut a);
        }
        let slot = &mut acc[ParamClass::ALL.iter().position(|&c| c == class).expect("class")];
        for (x, y) in a.iter().zip(numeric) {
            slot.checked += 1;
            let e = rel(*x, *y, cfg.floor);
            slot.max_rel = slot.max_rel.max(if e.is_nan() { f64::INFINITY } else { e });
        }
    };

    for _ in 0..cfg.scenes {
        let s = random_scene(cfg, &mut rng)?;
        let state = deform(&s.field, &s.cloud, s.t)?.state;
        let gr = render_backward(&s.cloud, &state, &s.cam, s.background, &s.up, &rc)?;
        let dg = deform_backward(&s.field, &s.cloud, s.t, &gr.position, &gr.rotation, &gr.log_scale)?;
        let mut rows = gr.to_rows();
        let stride = s.cloud.stride();
        for (i, row) in rows.chunks_exact_mut(stride).enumerate() {
            row[layout::POSITION].copy_from_slice(&dg.position[i]);
            row[layout::ROTATION].copy_from_slice(&dg.rotation[i]);
            row[layout::LOG_SCALE].copy_from_slice(&dg.log_scale[i]);
        }

        let base = s.cloud.to_rows();
        for class in &ParamClass::ALL[..6] {
            let cols = class.columns(cfg.feature_dim);
            let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
            for i in 0..s.cloud.len() {
                for c in cols.clone() {
                    let k = i * stride + c;
                    let eval = |d: f64| -> Result<f64> {
                        let mut r = base.clone();
                        r[k] += d;
                        let mut cl = s.cloud.clone();
                        cl.read_rows(&r);
                        scene_loss(&s, &cl, &s.field, &rc)
                    };
                    numeric.push(central(eval, h)?);
                    analytic.push(rows[k]);
                }
            }
            record(&mut acc, *class, &analytic, &numeric);
        }

        let mut numeric = Vec::with_capacity(s.field.grid.len());
        for k in 0..s.field.grid.len() {
            let eval = |d: f64| -> Result<f64> {
                let mut f = s.field.clone();
                f.grid[k] += d;
                scene_loss(&s, &s.cloud, &f, &rc)
            };
            numeric.push(central(eval, cfg.grid_step)?);
        }
        record(&mut acc, ParamClass::DeformGrid, &dg.grid, &numeric);

        let mut numeric = Vec::with_capacity(s.field.mlp.params.len());
        for k in 0..s.field.mlp.params.len() {
            let eval = |d: f64| -> Result<f64> {
                let mut f = s.field.clone();
                f.mlp.params[k] += d;
                scene_loss(&s, &s.cloud, &f, &rc)
            };
            numeric.push(central(eval, cfg.mlp_step)?);
        }
        record(&mut acc, ParamClass::DeformMlp, &dg.mlp, &numeric);

        // Codec: squared reconstruction error on random inputs, biases on.
        let ccfg = CodecConfig {
            input_dim: 6,
            latent_dim: 3,
            hidden: 5,
            bias: true,
            ..CodecConfig::default()
        };
        let codec = FeatureCodec::new(&ccfg, rng.gen());
        let feats: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let (_, ge, gd) = reconstruction_grad(&codec, &feats, ReconLoss::L2)?;
        let mut analytic = ge;
        analytic.extend(gd);
        let ne = codec.encoder.params.len();
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..analytic.len() {
            let eval = |d: f64| -> Result<f64> {
                let mut c = codec.clone();
                if k < ne {
                    c.encoder.params[k] += d;
                } else {
                    c.decoder.params[k - ne] += d;
                }
                reconstruction_loss(&c, &feats, ReconLoss::L2)
            };
            numeric.push(central(eval, cfg.mlp_step)?);
        }
        record(&mut acc, ParamClass::CodecMlp, &analytic, &numeric);
    }

    let classes: Vec<ClassReport> = ParamClass::ALL
        .iter()
        .zip(acc)
        .map(|(&class, a)| ClassReport {
            class,
            checked: a.checked,
            max_rel_error: a.max_rel,
            passed: a.checked > 0 && a.max_rel < cfg.tolerance,
        })
        .collect();
    let passed = classes.iter().all(|c| c.passed);
    Ok(GradCheckReport { classes, passed })
}
