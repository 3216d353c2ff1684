//! Oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use splat4d::model::{Camera, Gaussian, GaussianCloud, GaussianParams};

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize, fdim: usize) -> GaussianCloud {
    let mut c = GaussianCloud::new(fdim);
    for _ in 0..n {
        // Some land behind the camera at z = -3.
        let pos = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-3.5..1.5)];
        let mut p = GaussianParams::new(pos, 0.1, 0.5, [0.0; 3], fdim);
        for a in 0..3 {
            p.log_scale[a] = rng.gen_range(0.02f64..0.4).ln();
            // Include out-of-range colors; the renderer clamps them.
            p.color[a] = rng.gen_range(-0.2..1.2);
        }
        p.rotation = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        p.opacity_logit = rng.gen_range(-4.0..4.0);
        p.feature = (0..fdim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        c.push(Gaussian::new(p)).unwrap();
    }
    c
}

pub fn random_camera(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Camera {
    let eye = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), -3.0];
    Camera::look_at(eye, [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], rng.gen_range(12.0..30.0), w, h)
}

pub struct Oracle {
    pub color: Vec<f64>,
    pub feature: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Every Gaussian against every pixel, sorted by camera depth, front to back.
pub fn brute_force(cloud: &GaussianCloud, cam: &Camera, bg: [f64; 3]) -> Oracle {
    let w = Matrix3::from_fn(|i, j| cam.rotation[i][j]);
    let t = Vector3::from(cam.translation);
    struct S {
        depth: f64,
        idx: usize,
        mean: Vector2<f64>,
        inv: Matrix2<f64>,
    }
    let mut splats = Vec::new();
    for (idx, g) in cloud.iter().enumerate() {
        let pc = w * Vector3::from(g.position) + t;
        if pc.z <= 0.01 {
            continue;
        }
        let q = g.rotation;
        let r = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix();
        let s = Matrix3::from_diagonal(&Vector3::from(g.log_scale).map(f64::exp));
        let m = r.matrix() * s;
        let sigma = w * (m * m.transpose()) * w.transpose();
        let j = Matrix2x3::new(
            cam.fx / pc.z,
            0.0,
            -cam.fx * pc.x / (pc.z * pc.z),
            0.0,
            cam.fy / pc.z,
            -cam.fy * pc.y / (pc.z * pc.z),
        );
        let cov = j * sigma * j.transpose() + Matrix2::identity() * 0.3;
        if cov.determinant() <= 1e-12 {
            continue;
        }
        let mean = Vector2::new(cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy);
        splats.push(S { depth: pc.z, idx, mean, inv: cov.try_inverse().unwrap() });
    }
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.idx.cmp(&b.idx)));
    let (wd, ht, fd) = (cam.width as usize, cam.height as usize, cloud.feature_dim);
    let mut out = Oracle { color: vec![0.0; wd * ht * 3], feature: vec![0.0; wd * ht * fd], alpha: vec![0.0; wd * ht] };
    for y in 0..ht {
        for x in 0..wd {
            let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut trans = 1.0;
            let px = y * wd + x;
            for s in &splats {
                let g = &cloud.gaussians[s.idx];
                let d = p - s.mean;
                let a = 1.0 / (1.0 + (-g.opacity_logit).exp()) * (-0.5 * (d.transpose() * s.inv * d)[0]).exp();
                for k in 0..3 {
                    out.color[px * 3 + k] += trans * a * g.color[k].clamp(0.0, 1.0);
                }
                for k in 0..fd {
                    out.feature[px * fd + k] += trans * a * g.feature[k];
                }
                out.alpha[px] += trans * a;
                trans *= 1.0 - a;
            }
            for k in 0..3 {
                out.color[px * 3 + k] += trans * bg[k];
            }
        }
    }
    out
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}


/// Edge fraction averaged over images, by explicit 3×3 correlation of a
/// replicate-padded luma image. Edge: magnitude above `threshold × max`.
pub fn edge_density_oracle(images: &[splat4d::image::Image], threshold: f64) -> f64 {
    const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let mut total = 0.0;
    for img in images {
        let (w, h) = (img.width, img.height);
        let mut pad = vec![vec![0.0; w + 2]; h + 2];
        for (py, row) in pad.iter_mut().enumerate() {
            for (px, v) in row.iter_mut().enumerate() {
                let x = px.saturating_sub(1).min(w - 1);
                let y = py.saturating_sub(1).min(h - 1);
                let p = &img.data[(y * w + x) * 3..(y * w + x) * 3 + 3];
                *v = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
            }
        }
        let mut mags = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (mut gx, mut gy) = (0.0, 0.0);
                for j in 0..3 {
                    for i in 0..3 {
                        gx += KX[j][i] * pad[y + j][x + i];
                        gy += KY[j][i] * pad[y + j][x + i];
                    }
                }
                mags.push(gx.hypot(gy));
            }
        }
        let max = mags.iter().cloned().fold(0.0, f64::max);
        let edges = mags.iter().filter(|&&m| max > 0.0 && m > threshold * max).count();
        total += edges as f64 / (w * h) as f64;
    }
    total / images.len() as f64
}

/// Relevance by its definition: the smallest pairwise softmax
/// of the query against each canonical phrase.
pub fn relevance_oracle(e: &[f64], q: &[f64], canon: &[Vec<f64>]) -> f64 {
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    // Query and canonicals are unit length; the embedding enters as given.
    let q = unit(q);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    canon
        .iter()
        .map(|c| {
            let c = unit(c);
            let (a, b) = (dot(e, &q).exp(), dot(e, &c).exp());
            a / (a + b)
        })
        .fold(f64::INFINITY, f64::min)
}
