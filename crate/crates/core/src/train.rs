//! Two-stage optimization: a static coarse stage, then deformation, mask
//! guidance and semantic supervision in the fine stage.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchor::{anchor_loss, anchor_record, AnchorConfig, Stage, StageGate};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::codec::{train_codec, CodecConfig, FeatureCodec, ReconLoss};
use crate::dataset::{SceneDataset, Split, SCALES};
use crate::deform::{deform, deform_backward_cached, deform_cached, tv_loss_grad, DeformConfig, DeformationField};
use crate::densify::{densify_and_prune, DensifyConfig};
use crate::error::{Error, Result};
use crate::guidance::{adaptive_lambda, l1_loss, masked_image_loss, texture_density, GuidanceConfig, RegionLoss, RegionNorm};
use crate::metrics::psnr;
use crate::model::{layout, Gaussian, GaussianCloud, GaussianParams};
use crate::optim::{adam_step_with, AdamConfig, Moments};
use crate::raster::{render, render_backward, DeformedState, RenderConfig, Upstream};
use crate::real::Precision;

/// How the anchor term is reduced over Gaussians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorReduction {
    /// Divide the per-Gaussian sum by the cloud size.
    #[default]
    Mean,
    Sum,
}

/// Flat training configuration; every field has a default so a config file only
/// lists what it overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub coarse_iters: usize,
    pub fine_iters: usize,

    pub lambda_m: f64,
    pub lambda_a: f64,
    pub lambda_s: f64,
    pub lambda_tv: f64,
    /// Mask-weighted photometric loss in the fine stage (plain L1 when off).
    pub hgg: bool,
    /// Anchor loss in both stages.
    pub hgf: bool,
    pub batch_size: usize,

    pub lr_position: f64,
    pub lr_position_final: f64,
    pub lr_log_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub lr_feature: f64,
    pub lr_deform_mlp: f64,
    pub lr_grid: f64,

    pub densify_interval: usize,
    /// Fraction of each stage after which densification stops.
    pub densify_until: f64,
    pub grad_threshold: f64,
    pub prune_opacity: f64,
    pub percent_dense: f64,
    pub max_gaussians: usize,

    pub anchor_lambda_base: f64,
    pub anchor_growth: f64,
    pub anchor_cap: f64,
    pub anchor_reduction: AnchorReduction,

    pub guidance_alpha: f64,
    pub guidance_beta: f64,
    pub edge_threshold: f64,
    pub region_loss: RegionLoss,
    pub region_norm: RegionNorm,

    pub deform_resolution: [usize; 4],
    pub deform_channels: usize,
    pub deform_hidden: usize,
    pub deform_time_input: bool,
    pub deform_grid_init: f64,

    pub codec_latent_dim: usize,
    pub codec_hidden: usize,
    pub codec_bias: bool,
    pub codec_loss: ReconLoss,
    pub codec_iters: usize,
    pub codec_lr: f64,
    pub codec_lr_final: f64,

    /// Upper bound on initial Gaussians taken from the scene's surface samples.
    pub init_points: usize,
    pub init_opacity: f64,

    pub seed: u64,
    pub precision: Precision,
    /// Held-out PSNR every this many iterations (0 = only at the end).
    pub eval_interval: usize,
    pub history_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        let a = AnchorConfig::default();
        let d = DeformConfig::default();
        let c = CodecConfig::default();
        Self {
            coarse_iters: 5000,
            fine_iters: 15000,
            lambda_m: 1.0,
            lambda_a: 1.0,
            lambda_s: 0.1,
            lambda_tv: 1.0,
            hgg: true,
            hgf: true,
            batch_size: 2,
            lr_position: 1.6e-3,
            lr_position_final: 1.6e-4,
            lr_log_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-3,
            lr_feature: 2.5e-3,
            lr_deform_mlp: 1.6e-3,
            lr_grid: 1.6e-2,
            densify_interval: 500,
            densify_until: 0.75,
            grad_threshold: 2e-4,
            prune_opacity: 0.005,
            percent_dense: 0.01,
            max_gaussians: 20_000,
            anchor_lambda_base: a.lambda_base,
            anchor_growth: a.growth,
            anchor_cap: a.cap,
            anchor_reduction: AnchorReduction::Mean,
            guidance_alpha: g.alpha,
            guidance_beta: g.beta,
            edge_threshold: g.edge_threshold,
            region_loss: g.region_loss,
            region_norm: g.region_norm,
            deform_resolution: d.resolution,
            deform_channels: d.channels,
            deform_hidden: d.hidden,
            deform_time_input: d.time_input,
            deform_grid_init: d.grid_init,
            codec_latent_dim: c.latent_dim,
            codec_hidden: c.hidden,
            codec_bias: c.bias,
            codec_loss: c.loss,
            codec_iters: c.iters,
            codec_lr: c.lr,
            codec_lr_final: c.lr_final,
            init_points: 2000,
            init_opacity: 0.1,
            seed: 0,
            precision: Precision::F32,
            eval_interval: 0,
            history_len: 500,
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| match e {
            Error::Config(m) => Error::format(path, m),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_m", self.lambda_m),
            ("lambda_a", self.lambda_a),
            ("lambda_s", self.lambda_s),
            ("lambda_tv", self.lambda_tv),
            ("lr_position", self.lr_position),
            ("lr_position_final", self.lr_position_final),
            ("lr_log_scale", self.lr_log_scale),
            ("lr_rotation", self.lr_rotation),
            ("lr_opacity", self.lr_opacity),
            ("lr_color", self.lr_color),
            ("lr_feature", self.lr_feature),
            ("lr_deform_mlp", self.lr_deform_mlp),
            ("lr_grid", self.lr_grid),
            ("grad_threshold", self.grad_threshold),
            ("prune_opacity", self.prune_opacity),
            ("percent_dense", self.percent_dense),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(bad(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.densify_until) {
            return Err(bad("densify_until must lie in [0, 1]"));
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return Err(bad("init_opacity must lie in (0, 1)"));
        }
        if self.lr_position > 0.0 && self.lr_position_final <= 0.0 {
            return Err(bad("lr_position_final must be positive when lr_position is"));
        }
        if self.deform_resolution.iter().any(|&r| r == 0) || self.deform_channels == 0 || self.deform_hidden == 0 {
            return Err(bad("deformation grid and MLP sizes must be positive"));
        }
        if self.codec_latent_dim == 0 || self.codec_hidden == 0 {
            return Err(bad("codec sizes must be positive"));
        }
        if !(self.anchor_growth >= 1.0) || !(self.anchor_lambda_base >= 0.0) || !(self.anchor_cap >= 0.0) {
            return Err(bad("anchor strength needs lambda_base ≥ 0, growth ≥ 1, cap ≥ 0"));
        }
        self.guidance().validate()
    }

    pub fn anchor(&self) -> AnchorConfig {
        AnchorConfig {
            lambda_base: self.anchor_lambda_base,
            growth: self.anchor_growth,
            cap: self.anchor_cap,
        }
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            alpha: self.guidance_alpha,
            beta: self.guidance_beta,
            edge_threshold: self.edge_threshold,
            region_loss: self.region_loss,
            region_norm: self.region_norm,
        }
    }

    pub fn deform(&self) -> DeformConfig {
        DeformConfig {
            resolution: self.deform_resolution,
            channels: self.deform_channels,
            hidden: self.deform_hidden,
            time_input: self.deform_time_input,
            grid_init: self.deform_grid_init,
        }
    }

    pub fn codec(&self, input_dim: usize) -> CodecConfig {
        CodecConfig {
            input_dim,
            latent_dim: self.codec_latent_dim,
            hidden: self.codec_hidden,
            bias: self.codec_bias,
            loss: self.codec_loss,
            iters: self.codec_iters,
            lr: self.codec_lr,
            lr_final: self.codec_lr_final,
            seed: self.seed,
        }
    }

    pub fn render(&self) -> RenderConfig {
        RenderConfig::default().with_precision(self.precision)
    }

    fn stage_iters(&self, stage: Stage) -> usize {
        match stage {
            Stage::Coarse => self.coarse_iters,
            Stage::Fine => self.fine_iters,
        }
    }
}

/// Unweighted component values of one evaluation of the total loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub photometric: f64,
    pub anchor: f64,
    pub semantic: f64,
    pub tv: f64,
    /// `λ_m·photometric + λ_a·anchor + λ_s·semantic + λ_tv·tv`.
    pub total: f64,
}

/// Gradients of the total loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    /// Row layout, one row per Gaussian.
    pub cloud: Vec<f64>,
    pub grid: Vec<f64>,
    pub mlp: Vec<f64>,
    /// Screen-space gradient norm summed over the batch, for densification.
    pub signal: Vec<f64>,
    /// Number of batch views in which each Gaussian was visible.
    pub visible: Vec<u32>,
}

/// Everything `total_loss` needs besides the parameters.
pub struct LossContext<'a> {
    pub dataset: &'a SceneDataset,
    pub cfg: &'a TrainConfig,
    pub stage: Stage,
    /// Encoded codebook row per class.
    pub latents: &'a [Vec<f64>],
    /// Adaptive inside-mask weight.
    pub mask_lambda: f64,
}

struct FrameResult {
    photometric: f64,
    semantic: f64,
    rows: Vec<f64>,
    grid: Vec<f64>,
    mlp: Vec<f64>,
    signal: Vec<f64>,
    visible: Vec<bool>,
}

fn frame_loss(
    ctx: &LossContext,
    cloud: &GaussianCloud,
    field: &DeformationField,
    frame_idx: usize,
    batch: usize,
) -> Result<FrameResult> {
    let cfg = ctx.cfg;
    let ds = ctx.dataset;
    let frame = ds.frames.get(frame_idx).ok_or_else(|| bad(format!("frame {frame_idx} out of range")))?;
    let fine = ctx.stage == Stage::Fine;
    let rcfg = cfg.render();
    let (state, cache) = if fine {
        let (d, c) = deform_cached(field, cloud, frame.time())?;
        (d.state, Some(c))
    } else {
        (DeformedState::canonical(cloud), None)
    };
    let out = render(cloud, &state, &frame.camera, ds.background, &rcfg)?;
    let scale = 1.0 / batch as f64;

    let (photometric, g_photo) = if fine && cfg.hgg {
        masked_image_loss(&out.color, &frame.image, &frame.mask, ctx.mask_lambda, &cfg.guidance())?
    } else {
        l1_loss(&out.color, &frame.image)?
    };
    let mut upstream = Upstream::default();
    if cfg.lambda_m != 0.0 {
        upstream.color = g_photo.iter().map(|g| g * cfg.lambda_m * scale).collect();
    }

    let mut semantic = 0.0;
    let n = cloud.feature_dim;
    if fine && cfg.lambda_s != 0.0 && n > 0 {
        // Channel block `s` of the feature image holds the latent for scale `s`.
        let nl = n / SCALES.len();
        let npx = out.feature.pixels();
        let norm = 1.0 / (npx * nl) as f64;
        let w = cfg.lambda_s * scale * norm;
        let mut g = vec![0.0; npx * n];
        for (s, classes) in frame.classes.iter().enumerate() {
            for p in 0..npx {
                let target = &ctx.latents[classes[p] as usize];
                for c in 0..nl {
                    let k = p * n + s * nl + c;
                    let r = out.feature.data[k] - target[c];
                    semantic += r.abs() * norm;
                    g[k] = w * sign(r);
                }
            }
        }
        upstream.feature = g;
    }

    let gr = render_backward(cloud, &state, &frame.camera, ds.background, &upstream, &rcfg)?;
    let signal: Vec<f64> = gr.mean2d_norm.iter().map(|v| v * batch as f64).collect();
    let visible = gr.visible.clone();
    let mut rows = gr.to_rows();
    let (mut grid, mut mlp) = (Vec::new(), Vec::new());
    if let Some(cache) = &cache {
        let dg = deform_backward_cached(field, cloud, cache, &gr.position, &gr.rotation, &gr.log_scale)?;
        let stride = cloud.stride();
        for (i, row) in rows.chunks_exact_mut(stride).enumerate() {
            row[layout::POSITION].copy_from_slice(&dg.position[i]);
            row[layout::ROTATION].copy_from_slice(&dg.rotation[i]);
            row[layout::LOG_SCALE].copy_from_slice(&dg.log_scale[i]);
        }
        grid = dg.grid;
        mlp = dg.mlp;
    }
    Ok(FrameResult {
        photometric,
        semantic,
        rows,
        grid,
        mlp,
        signal,
        visible,
    })
}

fn sign(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

/// Weighted total loss over a batch of frames and its gradients. Image terms are
/// averaged over the batch; anchor and TV terms are added once.
pub fn total_loss(
    ctx: &LossContext,
    cloud: &GaussianCloud,
    field: &DeformationField,
    batch: &[usize],
) -> Result<(LossTerms, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyList);
    }
    let cfg = ctx.cfg;
    let fine = ctx.stage == Stage::Fine;
    let stride = cloud.stride();
    let nb = batch.len();
    // Frames run in parallel; the merge below is in batch order.
    let results: Vec<Result<FrameResult>> =
        batch.par_iter().map(|&f| frame_loss(ctx, cloud, field, f, nb)).collect();

    let mut terms = LossTerms::default();
    let mut grads = Gradients {
        cloud: vec![0.0; cloud.len() * stride],
        grid: vec![0.0; field.grid.len()],
        mlp: vec![0.0; field.mlp.params.len()],
        signal: vec![0.0; cloud.len()],
        visible: vec![0; cloud.len()],
    };
    for r in results {
        let r = r?;
        terms.photometric += r.photometric / nb as f64;
        terms.semantic += r.semantic / nb as f64;
        add_into(&mut grads.cloud, &r.rows);
        if fine {
            add_into(&mut grads.grid, &r.grid);
            add_into(&mut grads.mlp, &r.mlp);
        }
        for (i, (&s, &v)) in r.signal.iter().zip(&r.visible).enumerate() {
            if v {
                grads.signal[i] += s / nb as f64;
                grads.visible[i] += 1;
            }
        }
    }

    if cfg.hgf && cfg.lambda_a != 0.0 && !cloud.is_empty() {
        let (loss, g) = anchor_loss(cloud, ctx.stage, &cfg.anchor())?;
        let red = match cfg.anchor_reduction {
            AnchorReduction::Mean => 1.0 / cloud.len() as f64,
            AnchorReduction::Sum => 1.0,
        };
        terms.anchor = loss * red;
        let w = cfg.lambda_a * red;
        grads.cloud.iter_mut().zip(&g).for_each(|(a, b)| *a += w * b);
    }
    if fine && cfg.lambda_tv != 0.0 {
        let (tv, g) = tv_loss_grad(field);
        terms.tv = tv;
        grads.grid.iter_mut().zip(&g).for_each(|(a, b)| *a += cfg.lambda_tv * b);
    }
    terms.total = cfg.lambda_m * terms.photometric
        + cfg.lambda_a * terms.anchor
        + cfg.lambda_s * terms.semantic
        + cfg.lambda_tv * terms.tv;
    Ok((terms, grads))
}

/// Initial cloud from surface samples: 3-NN mean distance as isotropic scale.
pub fn init_cloud(dataset: &SceneDataset, cfg: &TrainConfig, feature_dim: usize) -> Result<GaussianCloud> {
    let pts = &dataset.init_points[..dataset.init_points.len().min(cfg.init_points)];
    if pts.is_empty() {
        return Err(bad("scene has no initialization points"));
    }
    let scales: Vec<f64> = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let mut best = [f64::INFINITY; 3];
            for (j, q) in pts.iter().enumerate() {
                if i == j {
                    continue;
                }
                let p = pts[i].position;
                let d = ((p[0] - q.position[0]).powi(2) + (p[1] - q.position[1]).powi(2) + (p[2] - q.position[2]).powi(2)).sqrt();
                if d < best[2] {
                    best[2] = d;
                    best.sort_by(f64::total_cmp);
                }
            }
            let found: Vec<f64> = best.iter().copied().filter(|d| d.is_finite()).collect();
            if found.is_empty() {
                0.05
            } else {
                (found.iter().sum::<f64>() / found.len() as f64).max(1e-4)
            }
        })
        .collect();
    let mut cloud = GaussianCloud::new(feature_dim);
    for (p, s) in pts.iter().zip(scales) {
        cloud.push(Gaussian::new(GaussianParams::new(p.position, s, cfg.init_opacity, p.color, feature_dim)))?;
    }
    Ok(cloud)
}

/// Radius of the training cameras around their centroid, padded by 10%.
pub fn camera_extent(dataset: &SceneDataset) -> f64 {
    let centers: Vec<[f64; 3]> = dataset.split(Split::Train).iter().map(|f| f.camera.center()).collect();
    if centers.is_empty() {
        return 1.0;
    }
    let mut mean = [0.0; 3];
    for c in &centers {
        for a in 0..3 {
            mean[a] += c[a] / centers.len() as f64;
        }
    }
    let r = centers
        .iter()
        .map(|c| ((c[0] - mean[0]).powi(2) + (c[1] - mean[1]).powi(2) + (c[2] - mean[2]).powi(2)).sqrt())
        .fold(0.0, f64::max);
    if r > 1e-9 {
        1.1 * r
    } else {
        1.0
    }
}

/// Deformation bounding box: init points padded by 10% of the span (at least 0.1).
fn deform_bbox(cloud: &GaussianCloud) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for g in cloud.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(g.position[a]);
            hi[a] = hi[a].max(g.position[a]);
        }
    }
    for a in 0..3 {
        let pad = (0.1 * (hi[a] - lo[a])).max(0.1);
        lo[a] -= pad;
        hi[a] += pad;
    }
    (lo, hi)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub densify_events: usize,
    pub anchor_refreshes: usize,
    pub stage_switches: usize,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Mutable optimizer state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub iteration: usize,
    pub gate: StageGate,
    pub cloud_moments: Moments,
    pub grid_moments: Moments,
    pub mlp_moments: Moments,
    /// Accumulated densification signal and visibility counts since the last event.
    pub signal: Vec<f64>,
    pub signal_count: Vec<u32>,
    pub history: VecDeque<f64>,
    pub rng: ChaCha8Rng,
    pub counters: Counters,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub stage: Stage,
    pub total: f64,
    pub photometric: f64,
    pub anchor: f64,
    pub semantic: f64,
    pub tv: f64,
    pub gaussians: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
}

pub struct Trainer<'a> {
    pub dataset: &'a SceneDataset,
    pub cfg: TrainConfig,
    pub cloud: GaussianCloud,
    pub field: DeformationField,
    pub codec: FeatureCodec,
    pub latents: Vec<Vec<f64>>,
    pub mask_lambda: f64,
    pub extent: f64,
    pub state: TrainState,
    train_frames: Vec<usize>,
}

impl<'a> Trainer<'a> {
    /// Validate inputs, train the codec if none is given, and build the initial cloud.
    pub fn new(dataset: &'a SceneDataset, cfg: TrainConfig, codec: Option<FeatureCodec>) -> Result<Self> {
        cfg.validate()?;
        let train_frames = dataset.frame_indices(Split::Train);
        if train_frames.is_empty() {
            return Err(bad("scene has no training frames"));
        }
        let dim = dataset.feature_dim();
        let codec = match codec {
            Some(c) => {
                if c.input_dim() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: c.input_dim(),
                    });
                }
                c
            }
            None => train_codec(&dataset.codebook, &cfg.codec(dim))?.0,
        };
        let latents = dataset.codebook.iter().map(|r| codec.encode(r)).collect::<Result<Vec<_>>>()?;
        let images: Vec<_> = train_frames.iter().map(|&i| dataset.frames[i].image.clone()).collect();
        let density = texture_density(&images, &cfg.guidance().sobel())?;
        let mask_lambda = adaptive_lambda(density, &cfg.guidance());

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut cloud = init_cloud(dataset, &cfg, codec.latent_dim() * SCALES.len())?;
        anchor_record(&mut cloud);
        let (lo, hi) = deform_bbox(&cloud);
        let field = DeformationField::new(&cfg.deform(), lo, hi, &mut rng)?;
        let n = cloud.len();
        let state = TrainState {
            iteration: 0,
            gate: StageGate::new(Stage::Coarse),
            cloud_moments: Moments::zeros(n * cloud.stride()),
            grid_moments: Moments::zeros(field.grid.len()),
            mlp_moments: Moments::zeros(field.mlp.params.len()),
            signal: vec![0.0; n],
            signal_count: vec![0; n],
            history: VecDeque::with_capacity(cfg.history_len),
            rng,
            counters: Counters::default(),
        };
        Ok(Self {
            dataset,
            extent: camera_extent(dataset),
            cfg,
            cloud,
            field,
            codec,
            latents,
            mask_lambda,
            state,
            train_frames,
        })
    }

    pub fn stage(&self) -> Stage {
        self.state.gate.stage()
    }

    pub fn total_iters(&self) -> usize {
        self.cfg.coarse_iters + self.cfg.fine_iters
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.total_iters()
    }

    pub fn context(&self) -> LossContext<'_> {
        LossContext {
            dataset: self.dataset,
            cfg: &self.cfg,
            stage: self.stage(),
            latents: &self.latents,
            mask_lambda: self.mask_lambda,
        }
    }

    /// Iteration index within the current stage.
    fn stage_iteration(&self) -> usize {
        match self.stage() {
            Stage::Coarse => self.state.iteration,
            Stage::Fine => self.state.iteration - self.cfg.coarse_iters,
        }
    }

    /// Exponential interpolation from 1 to `lr_position_final / lr_position` over the stage.
    fn decay(&self) -> f64 {
        let total = self.cfg.stage_iters(self.stage()).max(1) as f64;
        let frac = (self.stage_iteration() as f64 / total).min(1.0);
        if self.cfg.lr_position > 0.0 {
            (self.cfg.lr_position_final / self.cfg.lr_position).powf(frac)
        } else {
            1.0
        }
    }

    fn switch_stage(&mut self) {
        if self.state.gate.advance() {
            anchor_record(&mut self.cloud);
            self.state.counters.stage_switches += 1;
            self.state.counters.anchor_refreshes += 1;
            self.reset_signal();
        }
    }

    fn reset_signal(&mut self) {
        self.state.signal = vec![0.0; self.cloud.len()];
        self.state.signal_count = vec![0; self.cloud.len()];
    }

    /// One optimization step. Switches stage first when the coarse budget is spent.
    pub fn step(&mut self) -> Result<LogRecord> {
        if self.stage() == Stage::Coarse && self.state.iteration >= self.cfg.coarse_iters {
            self.switch_stage();
        }
        let k = self.cfg.batch_size.min(self.train_frames.len());
        let batch: Vec<usize> = sample(&mut self.state.rng, self.train_frames.len(), k)
            .into_iter()
            .map(|i| self.train_frames[i])
            .collect();
        let (terms, grads) = total_loss(&self.context(), &self.cloud, &self.field, &batch)?;
        if !terms.total.is_finite() {
            return Err(Error::Numerical(format!("loss became {} at iteration {}", terms.total, self.state.iteration)));
        }
        self.apply(&grads)?;

        for (i, (&s, &v)) in grads.signal.iter().zip(&grads.visible).enumerate() {
            if v > 0 {
                self.state.signal[i] += s;
                self.state.signal_count[i] += v;
            }
        }
        self.state.iteration += 1;
        self.maybe_densify();

        if self.cfg.history_len > 0 {
            if self.state.history.len() == self.cfg.history_len {
                self.state.history.pop_front();
            }
            self.state.history.push_back(terms.total);
        }
        let eval_now = if self.is_done() {
            true
        } else {
            self.cfg.eval_interval > 0 && self.state.iteration % self.cfg.eval_interval == 0
        };
        let psnr = if eval_now { self.evaluate()? } else { None };
        Ok(LogRecord {
            iteration: self.state.iteration,
            stage: self.stage(),
            total: terms.total,
            photometric: terms.photometric,
            anchor: terms.anchor,
            semantic: terms.semantic,
            tv: terms.tv,
            gaussians: self.cloud.len(),
            psnr,
        })
    }

    fn apply(&mut self, grads: &Gradients) -> Result<()> {
        let cfg = &self.cfg;
        let decay = self.decay();
        let fine = self.stage() == Stage::Fine;
        let stride = self.cloud.stride();
        let mut lr_col = vec![0.0; stride];
        lr_col[layout::POSITION].fill(cfg.lr_position * decay);
        lr_col[layout::LOG_SCALE].fill(cfg.lr_log_scale);
        lr_col[layout::ROTATION].fill(cfg.lr_rotation);
        lr_col[layout::OPACITY] = cfg.lr_opacity;
        lr_col[layout::COLOR].fill(cfg.lr_color);
        lr_col[layout::FEATURE_START..].fill(cfg.lr_feature);
        let adam = AdamConfig::default();
        let mut rows = self.cloud.to_rows();
        adam_step_with(&mut rows, &grads.cloud, &mut self.state.cloud_moments, &adam, |i| lr_col[i % stride])?;
        self.cloud.read_rows(&rows);
        for g in &mut self.cloud.gaussians {
            g.params.normalize_rotation();
            for c in &mut g.params.color {
                *c = c.clamp(0.0, 1.0);
            }
        }
        if fine {
            let lr_grid = cfg.lr_grid * decay;
            let lr_mlp = cfg.lr_deform_mlp * decay;
            adam_step_with(&mut self.field.grid, &grads.grid, &mut self.state.grid_moments, &adam, |_| lr_grid)?;
            adam_step_with(&mut self.field.mlp.params, &grads.mlp, &mut self.state.mlp_moments, &adam, |_| lr_mlp)?;
        }
        Ok(())
    }

    fn maybe_densify(&mut self) {
        let cfg = &self.cfg;
        if cfg.densify_interval == 0 {
            return;
        }
        let s = self.stage_iteration();
        let until = (cfg.stage_iters(self.stage()) as f64 * cfg.densify_until) as usize;
        if s == 0 || s % cfg.densify_interval != 0 || s > until {
            return;
        }
        let signal: Vec<f64> = self
            .state
            .signal
            .iter()
            .zip(&self.state.signal_count)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        let dcfg = DensifyConfig {
            grad_threshold: cfg.grad_threshold,
            prune_opacity: cfg.prune_opacity,
            percent_dense: cfg.percent_dense,
            extent: self.extent,
            max_gaussians: cfg.max_gaussians,
        };
        let st = densify_and_prune(&mut self.cloud, &mut self.state.cloud_moments, &signal, &dcfg, &mut self.state.rng);
        let c = &mut self.state.counters;
        c.densify_events += 1;
        c.anchor_refreshes += 1;
        c.cloned += st.cloned;
        c.split += st.split;
        c.pruned += st.pruned;
        self.reset_signal();
    }

    /// Run to completion, handing every log record to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&Self, &LogRecord) -> Result<()>) -> Result<()> {
        if self.cfg.fine_iters > 0 && self.cfg.coarse_iters == 0 {
            self.switch_stage();
        }
        while !self.is_done() {
            let rec = self.step()?;
            sink(self, &rec)?;
        }
        Ok(())
    }

    /// Render a frame with the current parameters (deformed in the fine stage).
    pub fn render_frame(&self, frame_idx: usize) -> Result<crate::raster::RenderOutput> {
        let frame = &self.dataset.frames[frame_idx];
        let state = match self.stage() {
            Stage::Fine => deform(&self.field, &self.cloud, frame.time())?.state,
            Stage::Coarse => DeformedState::canonical(&self.cloud),
        };
        render(&self.cloud, &state, &frame.camera, self.dataset.background, &self.cfg.render())
    }

    /// PSNR of every held-out frame, in frame order.
    pub fn test_psnrs(&self) -> Result<Vec<f64>> {
        self.dataset
            .frame_indices(Split::Test)
            .into_iter()
            .map(|i| psnr(&self.render_frame(i)?.color, &self.dataset.frames[i].image))
            .collect()
    }

    /// Mean held-out PSNR, or `None` without test frames.
    pub fn evaluate(&self) -> Result<Option<f64>> {
        let v = self.test_psnrs()?;
        Ok(if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            cloud: self.cloud.clone(),
            field: self.field.clone(),
            codec: self.codec.clone(),
            meta: CheckpointMeta {
                scene: self.dataset.name.clone(),
                iteration: self.state.iteration,
                stage: match self.stage() {
                    Stage::Coarse => "coarse".into(),
                    Stage::Fine => "fine".into(),
                },
                background: self.dataset.background,
                seed: self.cfg.seed,
            },
        }
    }
}

/// Result of a full training run.
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub counters: Counters,
}

/// Train from scratch and return the final checkpoint with the full log.
pub fn train(dataset: &SceneDataset, cfg: &TrainConfig, codec: Option<FeatureCodec>) -> Result<TrainOutput> {
    let mut t = Trainer::new(dataset, cfg.clone(), codec)?;
    let mut log = Vec::with_capacity(t.total_iters());
    t.run(|_, rec| {
        log.push(rec.clone());
        Ok(())
    })?;
    Ok(TrainOutput {
        checkpoint: t.checkpoint(),
        log,
        counters: t.state.counters,
    })
}
