//! Front-to-back alpha compositing of color and feature images, and its exact reverse.
//!
//! For every pixel the visible Gaussians are visited in depth order (ties broken
//! by index) and composited with weights `α̂ᵢ Πⱼ<ᵢ (1 − α̂ⱼ)`; color and feature
//! share those weights, and only color receives the background term. Pixel rows
//! are the parallel unit and every reduction happens in row order, so results do
//! not depend on the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, CameraParams, Projection};
use crate::image::Image;
use crate::model::{Camera, GaussianCloud, LOW_PASS, NEAR_PLANE};
use crate::real::{Precision, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Half-extent of the per-Gaussian screen box, in standard deviations per axis.
    pub cull_sigma: f64,
    /// Compositing stops once transmittance falls below this value.
    pub min_transmittance: f64,
    /// Projected covariances with a smaller determinant are skipped.
    pub min_det: f64,
    pub precision: Precision,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            cull_sigma: 3.0,
            min_transmittance: 1e-4,
            min_det: 1e-12,
            precision: Precision::F32,
        }
    }
}

impl RenderConfig {
    /// Truncation-free 64-bit configuration: the kernel support is wide enough
    /// that the cut-off is below double rounding, and compositing never stops early.
    /// Used where the rendered function must be smooth (finite differencing).
    pub fn exact() -> Self {
        Self {
            cull_sigma: 9.0,
            min_transmittance: 0.0,
            min_det: 1e-12,
            precision: Precision::F64,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }
}

/// Per-Gaussian geometry at the render timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformedState {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
}

impl DeformedState {
    /// The canonical (undeformed) geometry of a cloud.
    pub fn canonical(cloud: &GaussianCloud) -> Self {
        Self {
            positions: cloud.iter().map(|g| g.position).collect(),
            rotations: cloud.iter().map(|g| g.rotation).collect(),
            log_scales: cloud.iter().map(|g| g.log_scale).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            rotations: indices.iter().map(|&i| self.rotations[i]).collect(),
            log_scales: indices.iter().map(|&i| self.log_scales[i]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderDiagnostics {
    pub behind_camera: usize,
    pub off_screen: usize,
    pub degenerate: usize,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: Image,
    pub feature: Image,
    /// Accumulated opacity `Σ α̂ᵢ Tᵢ`.
    pub alpha: Image,
    /// Indices of the visible Gaussians in compositing order.
    pub depth_order: Vec<usize>,
    pub diagnostics: RenderDiagnostics,
}

/// Per-pixel loss gradients with respect to the rendered images. Empty vectors mean zero.
#[derive(Clone, Debug, Default)]
pub struct Upstream {
    pub color: Vec<f64>,
    pub feature: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Upstream {
    pub fn zeros(width: usize, height: usize, feature_dim: usize) -> Self {
        let n = width * height;
        Self {
            color: vec![0.0; n * 3],
            feature: vec![0.0; n * feature_dim],
            alpha: vec![0.0; n],
        }
    }
}

/// Gradients of a scalar loss with respect to the render inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients {
    pub feature_dim: usize,
    pub position: Vec<[f64; 3]>,
    pub log_scale: Vec<[f64; 3]>,
    pub rotation: Vec<[f64; 4]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    /// `len × feature_dim`, row-major.
    pub feature: Vec<f64>,
    /// Gradient with respect to the screen-space mean, in pixels.
    pub mean2d: Vec<[f64; 2]>,
    /// Norm of the screen-space mean gradient in normalized device units (densification signal).
    pub mean2d_norm: Vec<f64>,
    pub visible: Vec<bool>,
}

impl RenderGradients {
    pub fn zeros(len: usize, feature_dim: usize) -> Self {
        Self {
            feature_dim,
            position: vec![[0.0; 3]; len],
            log_scale: vec![[0.0; 3]; len],
            rotation: vec![[0.0; 4]; len],
            opacity_logit: vec![0.0; len],
            color: vec![[0.0; 3]; len],
            feature: vec![0.0; len * feature_dim],
            mean2d: vec![[0.0; 2]; len],
            mean2d_norm: vec![0.0; len],
            visible: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    /// Write gradients into the flat row layout of [`crate::model::layout`].
    pub fn to_rows(&self) -> Vec<f64> {
        use crate::model::layout;
        let stride = layout::stride(self.feature_dim);
        let mut rows = vec![0.0; self.len() * stride];
        for (i, row) in rows.chunks_exact_mut(stride).enumerate() {
            row[layout::POSITION].copy_from_slice(&self.position[i]);
            row[layout::LOG_SCALE].copy_from_slice(&self.log_scale[i]);
            row[layout::ROTATION].copy_from_slice(&self.rotation[i]);
            row[layout::OPACITY] = self.opacity_logit[i];
            row[layout::COLOR].copy_from_slice(&self.color[i]);
            row[layout::FEATURE_START..]
                .copy_from_slice(&self.feature[i * self.feature_dim..(i + 1) * self.feature_dim]);
        }
        rows
    }
}

struct Splat<R> {
    index: usize,
    proj: Projection<R>,
    conic: [R; 3],
    opacity: R,
    color: [R; 3],
    color_live: [bool; 3],
    x0: usize,
    x1: usize,
}

struct Prepared<R> {
    splats: Vec<Splat<R>>,
    /// `splats.len() × feature_dim`.
    features: Vec<R>,
    /// Per image row, indices into `splats` in compositing order.
    rows: Vec<Vec<u32>>,
    diagnostics: RenderDiagnostics,
}

fn check_inputs(cloud: &GaussianCloud, state: &DeformedState) -> Result<()> {
    if state.len() != cloud.len()
        || state.rotations.len() != cloud.len()
        || state.log_scales.len() != cloud.len()
    {
        return Err(Error::DimensionMismatch {
            expected: cloud.len(),
            got: state.len(),
        });
    }
    Ok(())
}

fn prepare<R: Real>(cloud: &GaussianCloud, state: &DeformedState, cam: &Camera, cfg: &RenderConfig) -> Prepared<R> {
    let params: CameraParams<R> = cam.params();
    let (w, h) = (cam.width as usize, cam.height as usize);
    let n = cloud.feature_dim;
    let near = R::of(NEAR_PLANE);
    let low_pass = R::of(LOW_PASS);
    let min_det = R::of(cfg.min_det);
    let k = cfg.cull_sigma;
    let mut diag = RenderDiagnostics::default();
    let mut splats = Vec::with_capacity(cloud.len());
    let mut boxes = Vec::with_capacity(cloud.len());

    for (i, g) in cloud.iter().enumerate() {
        let pos = state.positions[i].map(R::of);
        let ls = state.log_scales[i].map(R::of);
        let rot = state.rotations[i].map(R::of);
        let proj = match geom::project(&pos, &ls, &rot, &params, near, low_pass) {
            Ok(p) => p,
            Err(_) => {
                diag.behind_camera += 1;
                continue;
            }
        };
        let Some((conic, _)) = geom::conic(&proj.cov2d, min_det) else {
            diag.degenerate += 1;
            continue;
        };
        let mx = proj.mean2d[0].as_f64();
        let my = proj.mean2d[1].as_f64();
        let rx = k * proj.cov2d[0].as_f64().sqrt();
        let ry = k * proj.cov2d[2].as_f64().sqrt();
        // Pixel centers at (x + 0.5) within [m - r, m + r].
        let x0 = (mx - rx - 0.5).ceil().max(0.0);
        let x1 = (mx + rx - 0.5).floor().min(w as f64 - 1.0);
        let y0 = (my - ry - 0.5).ceil().max(0.0);
        let y1 = (my + ry - 0.5).floor().min(h as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            diag.off_screen += 1;
            continue;
        }
        let mut color = [R::zero(); 3];
        let mut live = [false; 3];
        for c in 0..3 {
            let v = g.color[c];
            live[c] = (0.0..=1.0).contains(&v);
            color[c] = R::of(v.clamp(0.0, 1.0));
        }
        splats.push(Splat {
            index: i,
            proj,
            conic,
            opacity: geom::sigmoid(R::of(g.opacity_logit)),
            color,
            color_live: live,
            x0: x0 as usize,
            x1: x1 as usize,
        });
        boxes.push((y0 as usize, y1 as usize));
    }

    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .proj
            .depth
            .partial_cmp(&splats[b].proj.depth)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(splats[a].index.cmp(&splats[b].index))
    });
    let mut sorted = Vec::with_capacity(splats.len());
    let mut sorted_boxes = Vec::with_capacity(splats.len());
    let mut slots: Vec<Option<Splat<R>>> = splats.into_iter().map(Some).collect();
    for &o in &order {
        sorted.push(slots[o].take().expect("each splat taken once"));
        sorted_boxes.push(boxes[o]);
    }

    let mut features = Vec::with_capacity(sorted.len() * n);
    for s in &sorted {
        features.extend(cloud.gaussians[s.index].feature.iter().map(|&v| R::of(v)));
    }

    let mut rows = vec![Vec::new(); h];
    for (si, &(y0, y1)) in sorted_boxes.iter().enumerate() {
        for row in rows.iter_mut().take(y1 + 1).skip(y0) {
            row.push(si as u32);
        }
    }

    Prepared {
        splats: sorted,
        features,
        rows,
        diagnostics: diag,
    }
}

#[inline(always)]
fn falloff<R: Real>(s: &Splat<R>, px: R, py: R) -> (R, R, R) {
    let dx = px - s.proj.mean2d[0];
    let dy = py - s.proj.mean2d[1];
    let q = s.conic[0] * dx * dx + R::of(2.0) * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
    ((R::of(-0.5) * q).exp(), dx, dy)
}

/// Render color, feature and accumulated-opacity images.
pub fn render(
    cloud: &GaussianCloud,
    state: &DeformedState,
    cam: &Camera,
    background: [f64; 3],
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    check_inputs(cloud, state)?;
    match cfg.precision {
        Precision::F32 => Ok(render_impl::<f32>(cloud, state, cam, background, cfg)),
        Precision::F64 => Ok(render_impl::<f64>(cloud, state, cam, background, cfg)),
    }
}

fn render_impl<R: Real>(
    cloud: &GaussianCloud,
    state: &DeformedState,
    cam: &Camera,
    background: [f64; 3],
    cfg: &RenderConfig,
) -> RenderOutput {
    let prep = prepare::<R>(cloud, state, cam, cfg);
    let (w, h) = (cam.width as usize, cam.height as usize);
    let n = cloud.feature_dim;
    let mut color = Image::new(w, h, 3);
    let mut feature = Image::new(w, h, n);
    let mut alpha = Image::new(w, h, 1);
    let bg = background.map(R::of);
    let t_min = R::of(cfg.min_transmittance);
    let half = R::of(0.5);
    // Featureless clouds still need one chunk per row to zip against.
    let mut fdata = if n == 0 { vec![0.0; h] } else { std::mem::take(&mut feature.data) };

    color
        .data
        .par_chunks_mut(w * 3)
        .zip(fdata.par_chunks_mut((w * n).max(1)))
        .zip(alpha.data.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, ((crow, frow), arow))| {
            let bin = &prep.rows[y];
            let py = R::of(y as f64) + half;
            let mut facc = vec![R::zero(); n];
            for x in 0..w {
                let px = R::of(x as f64) + half;
                let mut t = R::one();
                let mut c = [R::zero(); 3];
                let mut a = R::zero();
                facc.iter_mut().for_each(|v| *v = R::zero());
                for &si in bin {
                    let s = &prep.splats[si as usize];
                    if x < s.x0 || x > s.x1 {
                        continue;
                    }
                    let (gk, _, _) = falloff(s, px, py);
                    let al = s.opacity * gk;
                    let wgt = al * t;
                    for k in 0..3 {
                        c[k] += s.color[k] * wgt;
                    }
                    let f = &prep.features[si as usize * n..si as usize * n + n];
                    for k in 0..n {
                        facc[k] += f[k] * wgt;
                    }
                    a += wgt;
                    t *= R::one() - al;
                    if t < t_min {
                        break;
                    }
                }
                for k in 0..3 {
                    crow[x * 3 + k] = (c[k] + t * bg[k]).as_f64();
                }
                for k in 0..n {
                    frow[x * n + k] = facc[k].as_f64();
                }
                arow[x] = a.as_f64();
            }
        });
    if n > 0 {
        feature.data = fdata;
    }

    RenderOutput {
        color,
        feature,
        alpha,
        depth_order: prep.splats.iter().map(|s| s.index).collect(),
        diagnostics: prep.diagnostics,
    }
}

/// Gradients of a scalar loss with respect to every render input, given the
/// loss gradients with respect to the rendered images.
pub fn render_backward(
    cloud: &GaussianCloud,
    state: &DeformedState,
    cam: &Camera,
    background: [f64; 3],
    upstream: &Upstream,
    cfg: &RenderConfig,
) -> Result<RenderGradients> {
    check_inputs(cloud, state)?;
    let npx = cam.pixel_count();
    let n = cloud.feature_dim;
    for (name, len, ch) in [
        ("color", upstream.color.len(), 3),
        ("feature", upstream.feature.len(), n),
        ("alpha", upstream.alpha.len(), 1),
    ] {
        if len != 0 && len != npx * ch {
            return Err(Error::ShapeMismatch(format!(
                "{name} upstream has {len} values, expected {}",
                npx * ch
            )));
        }
    }
    match cfg.precision {
        Precision::F32 => Ok(backward_impl::<f32>(cloud, state, cam, background, upstream, cfg)),
        Precision::F64 => Ok(backward_impl::<f64>(cloud, state, cam, background, upstream, cfg)),
    }
}

// Local gradient slots per splat: mean(2) conic(3) opacity(1) color(3) feature(n).
const G_MEAN: usize = 0;
const G_CONIC: usize = 2;
const G_OPAC: usize = 5;
const G_COLOR: usize = 6;
const G_FEAT: usize = 9;

fn backward_impl<R: Real>(
    cloud: &GaussianCloud,
    state: &DeformedState,
    cam: &Camera,
    background: [f64; 3],
    upstream: &Upstream,
    cfg: &RenderConfig,
) -> RenderGradients {
    let prep = prepare::<R>(cloud, state, cam, cfg);
    let (w, h) = (cam.width as usize, cam.height as usize);
    let n = cloud.feature_dim;
    let slots = G_FEAT + n;
    let bg = background.map(R::of);
    let t_min = R::of(cfg.min_transmittance);
    let half = R::of(0.5);
    let two = R::of(2.0);
    let up_c = (!upstream.color.is_empty()).then_some(&upstream.color);
    let up_f = (!upstream.feature.is_empty()).then_some(&upstream.feature);
    let up_a = (!upstream.alpha.is_empty()).then_some(&upstream.alpha);

    let row_grads: Vec<Vec<R>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let bin = &prep.rows[y];
            let mut local = vec![R::zero(); bin.len() * slots];
            if bin.is_empty() {
                return local;
            }
            let py = R::of(y as f64) + half;
            // (slot in bin, alpha, falloff, transmittance before, dx, dy)
            let mut contrib: Vec<(usize, R, R, R, R, R)> = Vec::new();
            let mut behind_f = vec![R::zero(); n];
            let mut gf = vec![R::zero(); n];
            for x in 0..w {
                let p = y * w + x;
                let gc = match up_c {
                    Some(u) => [R::of(u[p * 3]), R::of(u[p * 3 + 1]), R::of(u[p * 3 + 2])],
                    None => [R::zero(); 3],
                };
                let mut any_f = false;
                for k in 0..n {
                    gf[k] = up_f.map_or(R::zero(), |u| R::of(u[p * n + k]));
                    any_f |= gf[k] != R::zero();
                }
                let ga = up_a.map_or(R::zero(), |u| R::of(u[p]));
                if gc.iter().all(|v| *v == R::zero()) && !any_f && ga == R::zero() {
                    continue;
                }
                let px = R::of(x as f64) + half;

                contrib.clear();
                let mut t = R::one();
                for (slot, &si) in bin.iter().enumerate() {
                    let s = &prep.splats[si as usize];
                    if x < s.x0 || x > s.x1 {
                        continue;
                    }
                    let (gk, dx, dy) = falloff(s, px, py);
                    let al = s.opacity * gk;
                    contrib.push((slot, al, gk, t, dx, dy));
                    t *= R::one() - al;
                    if t < t_min {
                        break;
                    }
                }

                let mut behind_c = bg;
                let mut behind_a = R::zero();
                behind_f.iter_mut().for_each(|v| *v = R::zero());
                for &(slot, al, gk, t_i, dx, dy) in contrib.iter().rev() {
                    let si = bin[slot] as usize;
                    let s = &prep.splats[si];
                    let f = &prep.features[si * n..si * n + n];
                    let wgt = al * t_i;
                    let lg = &mut local[slot * slots..(slot + 1) * slots];

                    let mut g_alpha = R::zero();
                    for k in 0..3 {
                        lg[G_COLOR + k] += gc[k] * wgt;
                        g_alpha += gc[k] * (s.color[k] - behind_c[k]);
                    }
                    if any_f {
                        for k in 0..n {
                            lg[G_FEAT + k] += gf[k] * wgt;
                            g_alpha += gf[k] * (f[k] - behind_f[k]);
                        }
                    }
                    g_alpha += ga * (R::one() - behind_a);
                    g_alpha *= t_i;

                    let om = R::one() - al;
                    for k in 0..3 {
                        behind_c[k] = s.color[k] * al + om * behind_c[k];
                    }
                    for k in 0..n {
                        behind_f[k] = f[k] * al + om * behind_f[k];
                    }
                    behind_a = al + om * behind_a;

                    lg[G_OPAC] += g_alpha * gk;
                    let gq = R::of(-0.5) * al * g_alpha;
                    lg[G_CONIC] += gq * dx * dx;
                    lg[G_CONIC + 1] += gq * two * dx * dy;
                    lg[G_CONIC + 2] += gq * dy * dy;
                    lg[G_MEAN] += gq * (-two) * (s.conic[0] * dx + s.conic[1] * dy);
                    lg[G_MEAN + 1] += gq * (-two) * (s.conic[1] * dx + s.conic[2] * dy);
                }
            }
            local
        })
        .collect();

    // Ordered merge: rows in increasing y.
    let mut acc = vec![R::zero(); prep.splats.len() * slots];
    for (y, local) in row_grads.iter().enumerate() {
        for (slot, &si) in prep.rows[y].iter().enumerate() {
            let dst = &mut acc[si as usize * slots..(si as usize + 1) * slots];
            let src = &local[slot * slots..(slot + 1) * slots];
            for k in 0..slots {
                dst[k] += src[k];
            }
        }
    }

    let params: CameraParams<R> = cam.params();
    let mut out = RenderGradients::zeros(cloud.len(), n);
    let (half_w, half_h) = (w as f64 / 2.0, h as f64 / 2.0);
    for (si, s) in prep.splats.iter().enumerate() {
        let g = &acc[si * slots..(si + 1) * slots];
        let i = s.index;
        let g_cov = geom::conic_backward(&s.conic, &[g[G_CONIC], g[G_CONIC + 1], g[G_CONIC + 2]]);
        let ls = state.log_scales[i].map(R::of);
        let rot = state.rotations[i].map(R::of);
        let (gp, gls, gq) =
            geom::project_backward(&s.proj, &ls, &rot, &params, [g[G_MEAN], g[G_MEAN + 1]], g_cov);
        out.position[i] = gp.map(|v| v.as_f64());
        out.log_scale[i] = gls.map(|v| v.as_f64());
        out.rotation[i] = gq.map(|v| v.as_f64());
        out.opacity_logit[i] = (g[G_OPAC] * s.opacity * (R::one() - s.opacity)).as_f64();
        for k in 0..3 {
            out.color[i][k] = if s.color_live[k] { g[G_COLOR + k].as_f64() } else { 0.0 };
        }
        for k in 0..n {
            out.feature[i * n + k] = g[G_FEAT + k].as_f64();
        }
        let gm = [g[G_MEAN].as_f64(), g[G_MEAN + 1].as_f64()];
        out.mean2d[i] = gm;
        out.mean2d_norm[i] = ((gm[0] * half_w).powi(2) + (gm[1] * half_h).powi(2)).sqrt();
        out.visible[i] = true;
    }
    out
}
