//! Gaussians, cameras and the shared geometric operations.

use std::ops::{Deref, DerefMut, Range};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, CameraParams, Mat3};
use crate::real::Real;

/// Near-plane distance below which a Gaussian is considered behind the camera.
pub const NEAR_PLANE: f64 = 0.01;
/// Low-pass floor added to both diagonal entries of every projected covariance (px²).
pub const LOW_PASS: f64 = 0.3;

/// Row layout used whenever per-Gaussian parameters are flattened
/// (optimizer moments, gradients, checkpoints).
pub mod layout {
    use std::ops::Range;

    pub const POSITION: Range<usize> = 0..3;
    pub const LOG_SCALE: Range<usize> = 3..6;
    pub const ROTATION: Range<usize> = 6..10;
    pub const OPACITY: usize = 10;
    pub const COLOR: Range<usize> = 11..14;
    pub const FEATURE_START: usize = 14;

    pub const fn stride(feature_dim: usize) -> usize {
        FEATURE_START + feature_dim
    }

    pub const fn feature(feature_dim: usize) -> Range<usize> {
        FEATURE_START..FEATURE_START + feature_dim
    }
}

/// The learnable attributes of one Gaussian. Also used as the anchor snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    /// Unit quaternion `[w, x, y, z]`.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: [f64; 3],
    pub feature: Vec<f64>,
}

impl GaussianParams {
    pub fn new(position: [f64; 3], scale: f64, opacity: f64, color: [f64; 3], feature_dim: usize) -> Self {
        Self {
            position,
            log_scale: [scale.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity),
            color,
            feature: vec![0.0; feature_dim],
        }
    }

    pub fn write_row(&self, row: &mut [f64]) {
        row[layout::POSITION].copy_from_slice(&self.position);
        row[layout::LOG_SCALE].copy_from_slice(&self.log_scale);
        row[layout::ROTATION].copy_from_slice(&self.rotation);
        row[layout::OPACITY] = self.opacity_logit;
        row[layout::COLOR].copy_from_slice(&self.color);
        row[layout::FEATURE_START..].copy_from_slice(&self.feature);
    }

    pub fn read_row(&mut self, row: &[f64]) {
        self.position.copy_from_slice(&row[layout::POSITION]);
        self.log_scale.copy_from_slice(&row[layout::LOG_SCALE]);
        self.rotation.copy_from_slice(&row[layout::ROTATION]);
        self.opacity_logit = row[layout::OPACITY];
        self.color.copy_from_slice(&row[layout::COLOR]);
        self.feature.copy_from_slice(&row[layout::FEATURE_START..]);
    }

    pub fn normalize_rotation(&mut self) {
        self.rotation = geom::quat_normalize(&self.rotation);
    }
}

/// A Gaussian together with its generation tag and optional anchor snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub params: GaussianParams,
    /// Densification round that created this Gaussian.
    pub generation: u32,
    pub anchor: Option<GaussianParams>,
}

impl Gaussian {
    pub fn new(params: GaussianParams) -> Self {
        Self {
            params,
            generation: 0,
            anchor: None,
        }
    }
}

impl Deref for Gaussian {
    type Target = GaussianParams;
    fn deref(&self) -> &GaussianParams {
        &self.params
    }
}

impl DerefMut for Gaussian {
    fn deref_mut(&mut self) -> &mut GaussianParams {
        &mut self.params
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    pub feature_dim: usize,
    /// Number of densification events so far.
    pub round: u32,
}

impl GaussianCloud {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            gaussians: Vec::new(),
            feature_dim,
            round: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn stride(&self) -> usize {
        layout::stride(self.feature_dim)
    }

    pub fn push(&mut self, g: Gaussian) -> Result<()> {
        if g.feature.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                got: g.feature.len(),
            });
        }
        self.gaussians.push(g);
        Ok(())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Gaussian> {
        self.gaussians.iter()
    }

    /// Check the cloud-wide invariants.
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        for (i, g) in self.gaussians.iter().enumerate() {
            if g.feature.len() != self.feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.feature_dim,
                    got: g.feature.len(),
                });
            }
            if g.generation > self.round {
                return Err(Error::Config(format!(
                    "gaussian {i} has generation {} beyond round {}",
                    g.generation, self.round
                )));
            }
            if let Some(a) = &g.anchor {
                if a.feature.len() != self.feature_dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.feature_dim,
                        got: a.feature.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Flatten all parameters into row-major `[len × stride]`.
    pub fn to_rows(&self) -> Vec<f64> {
        let stride = self.stride();
        let mut out = vec![0.0; self.len() * stride];
        for (g, row) in self.gaussians.iter().zip(out.chunks_exact_mut(stride)) {
            g.write_row(row);
        }
        out
    }

    pub fn read_rows(&mut self, rows: &[f64]) {
        let stride = self.stride();
        for (g, row) in self.gaussians.iter_mut().zip(rows.chunks_exact(stride)) {
            g.read_row(row);
        }
    }

    /// Restrict the cloud to the given (sorted or unsorted) indices, preserving order of `indices`.
    pub fn subset(&self, indices: &[usize]) -> GaussianCloud {
        GaussianCloud {
            gaussians: indices.iter().map(|&i| self.gaussians[i].clone()).collect(),
            feature_dim: self.feature_dim,
            round: self.round,
        }
    }
}

/// Pinhole camera with a world-to-camera rigid transform. Camera space looks
/// down +z with x right and y down; pixel `(x, y)` has its center at `(x+0.5, y+0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation (row-major).
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: u32,
    pub height: u32,
    /// Normalized timestamp in `[0, 1]`.
    pub time: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` roughly pointing up in the image.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], focal: f64, width: u32, height: u32) -> Self {
        let fwd = normalize3(sub3(target, eye));
        // Image y points down, so the camera "down" axis is -up projected.
        let right = normalize3(cross3(fwd, up));
        let down = cross3(fwd, right);
        let rotation = [right, down, fwd];
        let t = [
            -dot3(right, eye),
            -dot3(down, eye),
            -dot3(fwd, eye),
        ];
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation: t,
            width,
            height,
            time: 0.0,
        }
    }

    pub fn with_time(mut self, t: f64) -> Self {
        self.time = t;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be at least 1×1".into()));
        }
        if !(0.0..=1.0).contains(&self.time) {
            return Err(Error::Config(format!("timestamp {} outside [0, 1]", self.time)));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    /// World-space unit direction of the ray through pixel coordinates `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> [f64; 3] {
        let d_cam = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        let r = &self.rotation;
        normalize3([
            r[0][0] * d_cam[0] + r[1][0] * d_cam[1] + r[2][0] * d_cam[2],
            r[0][1] * d_cam[0] + r[1][1] * d_cam[1] + r[2][1] * d_cam[2],
            r[0][2] * d_cam[0] + r[1][2] * d_cam[1] + r[2][2] * d_cam[2],
        ])
    }

    /// Pixel coordinates and depth of a world point, if in front of the camera.
    pub fn project_point(&self, p: [f64; 3]) -> Option<([f64; 2], f64)> {
        let r = &self.rotation;
        let t = [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ];
        if t[2] <= NEAR_PLANE {
            return None;
        }
        Some((
            [self.fx * t[0] / t[2] + self.cx, self.fy * t[1] / t[2] + self.cy],
            t[2],
        ))
    }

    pub fn params<R: Real>(&self) -> CameraParams<R> {
        let mut rot = [[R::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rot[i][j] = R::of(self.rotation[i][j]);
            }
        }
        CameraParams {
            fx: R::of(self.fx),
            fy: R::of(self.fy),
            cx: R::of(self.cx),
            cy: R::of(self.cy),
            rotation: rot,
            translation: self.translation.map(R::of),
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Screen-space footprint of a Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub mean2d: [f64; 2],
    /// Row-major 2×2 covariance including the low-pass floor.
    pub cov2d: [[f64; 2]; 2],
    pub depth: f64,
}

/// Σ = R·diag(exp(log_scale))²·Rᵀ.
pub fn build_covariance(log_scale: [f64; 3], rotation: [f64; 4]) -> Mat3<f64> {
    geom::covariance3(&log_scale, &rotation)
}

/// EWA projection of a Gaussian's mean and covariance into `cam`.
pub fn project_gaussian(g: &GaussianParams, cam: &Camera) -> Result<Projected> {
    project_state(&g.position, &g.log_scale, &g.rotation, cam)
}

pub fn project_state(position: &[f64; 3], log_scale: &[f64; 3], rotation: &[f64; 4], cam: &Camera) -> Result<Projected> {
    let params = cam.params::<f64>();
    match geom::project(position, log_scale, rotation, &params, NEAR_PLANE, LOW_PASS) {
        Ok(p) => Ok(Projected {
            mean2d: p.mean2d,
            cov2d: [[p.cov2d[0], p.cov2d[1]], [p.cov2d[1], p.cov2d[2]]],
            depth: p.depth,
        }),
        Err(geom::ProjectFailure::BehindCamera(z)) => Err(Error::BehindCamera { z }),
    }
}

/// Activated `(opacity, scale)`.
pub fn activate(g: &GaussianParams) -> (f64, [f64; 3]) {
    (
        geom::sigmoid(g.opacity_logit),
        [g.log_scale[0].exp(), g.log_scale[1].exp(), g.log_scale[2].exp()],
    )
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize3(a: [f64; 3]) -> [f64; 3] {
    let n = dot3(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Parameter ranges by class, for reporting.
pub fn param_class_ranges(feature_dim: usize) -> [(&'static str, Range<usize>); 6] {
    [
        ("position", layout::POSITION),
        ("log_scale", layout::LOG_SCALE),
        ("rotation", layout::ROTATION),
        ("opacity_logit", layout::OPACITY..layout::OPACITY + 1),
        ("color", layout::COLOR),
        ("feature", layout::feature(feature_dim)),
    ]
}
