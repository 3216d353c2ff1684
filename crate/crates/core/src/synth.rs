//! Procedural dynamic scenes rendered by exact ray casting. They provide
//! images, foreground masks, multi-scale class maps and a class codebook.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassInfo, Frame, InitPoint, SceneDataset, Split};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::model::{dot3, normalize3, sub3, Camera};

pub const BUNDLED: [&str; 4] = ["static-textured", "dynamic-clean", "dynamic-noisy", "dynamic-multiscale"];
pub const CANONICAL_NAMES: [&str; 4] = ["canon/object", "canon/things", "canon/stuff", "canon/texture"];
const LIGHT: [f64; 3] = [0.37139067635410367, 0.7427813527082073, 0.5570860145311556];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Solid([f64; 3]),
    /// Low-frequency sinusoidal variation around `base`.
    Smooth { base: [f64; 3], amplitude: f64, frequency: f64 },
    Checker { a: [f64; 3], b: [f64; 3], frequency: f64 },
    /// Base color with random dark dots and brightness jitter, both scaled by `amplitude`.
    Noise { base: [f64; 3], amplitude: f64, cell: f64 },
    /// One color per quadrant of the local (x, y) plane.
    Quadrants([[f64; 3]; 4]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    Static,
    /// From `center` at t = 0 to `to` at t = 1.
    Linear { to: [f64; 3] },
    /// Circle in the x–y plane around `center`.
    Circular { radius: f64, turns: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub shape: Shape,
    pub center: [f64; 3],
    pub texture: Texture,
    pub trajectory: Trajectory,
    /// Split the object into top/bottom parts and quadrant subparts.
    pub parts: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Flat([f64; 3]),
    /// Infinite plane `z = z`, facing +z.
    Wall { z: f64, texture: Texture },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub train_views: usize,
    pub test_views: usize,
    pub radius: f64,
    pub height: f64,
    /// Total arc swept by the views, in degrees.
    pub arc_degrees: f64,
    pub focal: f64,
    pub target: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub timestamps: usize,
    pub rig: RigSpec,
    pub background: Background,
    pub objects: Vec<ObjectSpec>,
    pub feature_dim: usize,
    /// Samples per pixel side.
    pub supersample: usize,
    pub init_points: usize,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            train_views: 20,
            test_views: 4,
            radius: 4.0,
            height: 0.8,
            arc_degrees: 50.0,
            focal: 72.0,
            target: [0.0, 0.0, 0.0],
        }
    }
}

fn checker_box(center: [f64; 3], to: [f64; 3]) -> ObjectSpec {
    ObjectSpec {
        name: "box".into(),
        shape: Shape::Box { half: [0.32; 3] },
        center,
        texture: Texture::Checker {
            a: [0.9, 0.25, 0.15],
            b: [0.95, 0.85, 0.2],
            frequency: 3.2,
        },
        trajectory: Trajectory::Linear { to },
        parts: false,
    }
}

fn static_sphere() -> ObjectSpec {
    ObjectSpec {
        name: "sphere".into(),
        shape: Shape::Sphere { radius: 0.45 },
        center: [-0.75, 0.25, -0.3],
        texture: Texture::Solid([0.2, 0.45, 0.85]),
        trajectory: Trajectory::Static,
        parts: false,
    }
}

impl SceneSpec {
    /// One of the scenes listed in [`BUNDLED`].
    pub fn bundled(name: &str) -> Result<Self> {
        let base = |background, objects| SceneSpec {
            name: name.to_string(),
            width: 64,
            height: 64,
            timestamps: 20,
            rig: RigSpec::default(),
            background,
            objects,
            feature_dim: 64,
            supersample: 3,
            init_points: 2000,
        };
        let spec = match name {
            "static-textured" => {
                let mut s = base(
                    Background::Wall {
                        z: -1.2,
                        texture: Texture::Smooth {
                            base: [0.55, 0.5, 0.4],
                            amplitude: 0.18,
                            frequency: 1.3,
                        },
                    },
                    vec![
                        ObjectSpec {
                            name: "sphere".into(),
                            shape: Shape::Sphere { radius: 0.5 },
                            center: [-0.6, 0.1, 0.0],
                            texture: Texture::Smooth {
                                base: [0.3, 0.5, 0.75],
                                amplitude: 0.15,
                                frequency: 2.0,
                            },
                            trajectory: Trajectory::Static,
                            parts: false,
                        },
                        ObjectSpec {
                            name: "box".into(),
                            shape: Shape::Box { half: [0.35; 3] },
                            center: [0.7, -0.15, 0.2],
                            texture: Texture::Smooth {
                                base: [0.75, 0.4, 0.3],
                                amplitude: 0.12,
                                frequency: 2.5,
                            },
                            trajectory: Trajectory::Static,
                            parts: false,
                        },
                    ],
                );
                s.timestamps = 1;
                s
            }
            "dynamic-clean" => base(
                Background::Flat([0.5, 0.5, 0.5]),
                vec![static_sphere(), checker_box([-0.2, -0.4, 0.5], [0.9, -0.4, 0.5])],
            ),
            "dynamic-noisy" => base(
                Background::Wall {
                    z: -1.2,
                    texture: Texture::Noise {
                        base: [0.6, 0.58, 0.52],
                        amplitude: 0.8,
                        cell: 0.22,
                    },
                },
                vec![static_sphere(), checker_box([-0.2, -0.4, 0.5], [0.9, -0.4, 0.5])],
            ),
            "dynamic-multiscale" => base(
                Background::Flat([0.5, 0.5, 0.5]),
                vec![ObjectSpec {
                    name: "toy".into(),
                    shape: Shape::Box { half: [0.45, 0.45, 0.3] },
                    center: [0.0, 0.0, 0.3],
                    texture: Texture::Quadrants([[0.9, 0.2, 0.2], [0.2, 0.8, 0.3], [0.2, 0.3, 0.9], [0.9, 0.85, 0.2]]),
                    trajectory: Trajectory::Circular { radius: 0.35, turns: 0.5 },
                    parts: true,
                }],
            ),
            other => return Err(Error::SpecValidation(format!("unknown bundled scene `{other}`"))),
        };
        Ok(spec)
    }

    /// Variant of `static-textured` whose wall is replaced by a flat background.
    pub fn static_flat() -> Self {
        let mut s = Self::bundled("static-textured").expect("bundled");
        s.name = "static-flat".into();
        s.background = Background::Flat([0.5, 0.5, 0.5]);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::SpecValidation(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if self.width > u16::MAX as usize || self.height > u16::MAX as usize {
            return bad("image size too large");
        }
        if self.timestamps == 0 {
            return bad("need at least one timestamp");
        }
        if self.rig.train_views == 0 {
            return bad("need at least one training view");
        }
        if !(self.rig.focal > 0.0) || !(self.rig.radius > 0.0) {
            return bad("focal length and rig radius must be positive");
        }
        if self.supersample == 0 {
            return bad("supersample must be at least 1");
        }
        if self.objects.len() > 3 {
            return bad("at most three foreground objects");
        }
        for o in &self.objects {
            let ok = match o.shape {
                Shape::Sphere { radius } => radius > 0.0,
                Shape::Box { half } => half.iter().all(|&h| h > 0.0),
            };
            if !ok {
                return bad("object sizes must be positive");
            }
        }
        let rows = self.class_names().len() - 1;
        if self.feature_dim < rows {
            return Err(Error::SpecValidation(format!(
                "feature_dim {} cannot hold {rows} orthonormal class rows",
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// Class names in codebook order: void, wall (if any), objects with their
    /// parts, then the canonical rows.
    pub fn class_names(&self) -> Vec<String> {
        let mut names = vec!["void".to_string()];
        if matches!(self.background, Background::Wall { .. }) {
            names.push("wall".into());
        }
        for o in &self.objects {
            names.push(o.name.clone());
            if o.parts {
                for p in ["top", "bottom"] {
                    names.push(format!("{}/{p}", o.name));
                }
                for p in ["top/left", "top/right", "bottom/left", "bottom/right"] {
                    names.push(format!("{}/{p}", o.name));
                }
            }
        }
        names.extend(CANONICAL_NAMES.iter().map(|s| s.to_string()));
        names
    }

    fn class_infos(&self) -> Vec<ClassInfo> {
        let mut infos = vec![ClassInfo {
            name: "void".into(),
            dynamic: false,
            canonical: false,
        }];
        if matches!(self.background, Background::Wall { .. }) {
            infos.push(ClassInfo {
                name: "wall".into(),
                dynamic: false,
                canonical: false,
            });
        }
        for (o, names) in self.objects.iter().zip(self.object_class_ids()) {
            let dynamic = !matches!(o.trajectory, Trajectory::Static);
            let count = if o.parts { 7 } else { 1 };
            let all = self.class_names();
            for k in 0..count {
                infos.push(ClassInfo {
                    name: all[names.0 + k].clone(),
                    dynamic,
                    canonical: false,
                });
            }
        }
        for n in CANONICAL_NAMES {
            infos.push(ClassInfo {
                name: n.into(),
                dynamic: false,
                canonical: true,
            });
        }
        infos
    }

    /// First class id of every object (its whole-object class).
    fn object_class_ids(&self) -> Vec<(usize,)> {
        let mut next = if matches!(self.background, Background::Wall { .. }) { 2 } else { 1 };
        self.objects
            .iter()
            .map(|o| {
                let id = next;
                next += if o.parts { 7 } else { 1 };
                (id,)
            })
            .collect()
    }

    fn cameras(&self) -> Vec<(Camera, Split)> {
        let rig = &self.rig;
        let total = rig.train_views + rig.test_views;
        let test: Vec<usize> = (0..rig.test_views)
            .map(|j| (((j as f64 + 0.5) * total as f64 / rig.test_views as f64) as usize).min(total - 1))
            .collect();
        (0..total)
            .map(|v| {
                let frac = if total > 1 { v as f64 / (total - 1) as f64 - 0.5 } else { 0.0 };
                let a = (rig.arc_degrees * frac).to_radians();
                let eye = [rig.target[0] + rig.radius * a.sin(), rig.height, rig.target[2] + rig.radius * a.cos()];
                let cam = Camera::look_at(eye, rig.target, [0.0, 1.0, 0.0], rig.focal, self.width as u32, self.height as u32);
                (cam, if test.contains(&v) { Split::Test } else { Split::Train })
            })
            .collect()
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn cell_random(i: i64, j: i64, salt: u64) -> [f64; 4] {
    let mut h = mix64((i as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ mix64(j as u64 ^ salt));
    let mut out = [0.0; 4];
    for v in &mut out {
        h = mix64(h.wrapping_add(0x9e3779b97f4a7c15));
        *v = (h >> 11) as f64 / (1u64 << 53) as f64;
    }
    out
}

impl Texture {
    /// Albedo at local surface coordinates.
    fn albedo(&self, l: [f64; 3]) -> [f64; 3] {
        match self {
            Texture::Solid(c) => *c,
            Texture::Smooth {
                base,
                amplitude,
                frequency,
            } => {
                let f = *frequency;
                let w = [
                    (f * l[0] + 0.3).sin() * (f * l[1]).cos(),
                    (f * l[1] + 1.1).sin() * (f * l[2] + 0.4).cos(),
                    (f * (l[0] + l[2]) + 2.0).sin(),
                ];
                [0, 1, 2].map(|c| (base[c] + amplitude * w[c]).clamp(0.0, 1.0))
            }
            Texture::Checker { a, b, frequency } => {
                let s = (l[0] * frequency + 1e-7).floor() + (l[1] * frequency + 1e-7).floor() + (l[2] * frequency + 1e-7).floor();
                if (s as i64).rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Noise { base, amplitude, cell } => {
                let (gx, gy) = (l[0] / cell, l[1] / cell);
                let (i, j) = (gx.floor() as i64, gy.floor() as i64);
                let r = cell_random(i, j, 17);
                let jitter = 1.0 + amplitude * 0.3 * (r[3] - 0.5);
                let (cx, cy) = (i as f64 + 0.2 + 0.6 * r[0], j as f64 + 0.2 + 0.6 * r[1]);
                let rad = 0.18 + 0.17 * r[2];
                let inside = (gx - cx).powi(2) + (gy - cy).powi(2) < rad * rad;
                let dark = if inside { 1.0 - amplitude * (0.6 + 0.4 * r[3]) } else { 1.0 };
                base.map(|v| (v * jitter * dark).clamp(0.0, 1.0))
            }
            Texture::Quadrants(colors) => {
                let q = match (l[1] >= 0.0, l[0] >= 0.0) {
                    (true, false) => 0,
                    (true, true) => 1,
                    (false, false) => 2,
                    (false, true) => 3,
                };
                colors[q]
            }
        }
    }
}

impl ObjectSpec {
    pub fn center_at(&self, t: f64) -> [f64; 3] {
        let c = self.center;
        match &self.trajectory {
            Trajectory::Static => c,
            Trajectory::Linear { to } => [0, 1, 2].map(|k| c[k] + t * (to[k] - c[k])),
            Trajectory::Circular { radius, turns } => {
                let a = 2.0 * std::f64::consts::PI * turns * t;
                [c[0] + radius * (a.cos() - 1.0), c[1] + radius * a.sin(), c[2]]
            }
        }
    }

    /// Nearest hit distance and outward normal.
    fn intersect(&self, o: [f64; 3], d: [f64; 3], t: f64) -> Option<(f64, [f64; 3])> {
        let c = self.center_at(t);
        let oc = sub3(o, c);
        match self.shape {
            Shape::Sphere { radius } => {
                let b = dot3(oc, d);
                let disc = b * b - (dot3(oc, oc) - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let dist = if -b - s > 1e-9 { -b - s } else { -b + s };
                if dist <= 1e-9 {
                    return None;
                }
                let p = [0, 1, 2].map(|k| oc[k] + dist * d[k]);
                Some((dist, normalize3(p)))
            }
            Shape::Box { half } => {
                let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                let mut sign = 1.0;
                for k in 0..3 {
                    if d[k].abs() < 1e-15 {
                        if oc[k].abs() > half[k] {
                            return None;
                        }
                        continue;
                    }
                    let (t0, t1) = ((-half[k] - oc[k]) / d[k], (half[k] - oc[k]) / d[k]);
                    let (lo, hi, s) = if t0 < t1 { (t0, t1, -1.0) } else { (t1, t0, 1.0) };
                    if lo > tmin {
                        tmin = lo;
                        axis = k;
                        sign = s;
                    }
                    tmax = tmax.min(hi);
                }
                if tmin > tmax || tmin <= 1e-9 {
                    return None;
                }
                let mut n = [0.0; 3];
                n[axis] = sign;
                Some((tmin, n))
            }
        }
    }
}

/// What a single ray sees.
struct Hit {
    color: [f64; 3],
    /// Class ids for s, m, l.
    classes: [u16; 3],
    dynamic: bool,
    position: Option<[f64; 3]>,
}

struct Tracer<'a> {
    spec: &'a SceneSpec,
    ids: Vec<(usize,)>,
}

impl<'a> Tracer<'a> {
    fn shade(albedo: [f64; 3], n: [f64; 3]) -> [f64; 3] {
        let k = 0.35 + 0.65 * dot3(n, LIGHT).max(0.0);
        albedo.map(|a| (a * k).clamp(0.0, 1.0))
    }

    fn trace(&self, o: [f64; 3], d: [f64; 3], t: f64) -> Hit {
        let mut best: Option<(f64, usize, [f64; 3])> = None;
        for (i, obj) in self.spec.objects.iter().enumerate() {
            if let Some((dist, n)) = obj.intersect(o, d, t) {
                if best.map_or(true, |b| dist < b.0) {
                    best = Some((dist, i, n));
                }
            }
        }
        let wall = match &self.spec.background {
            Background::Wall { z, texture } if d[2].abs() > 1e-12 => {
                let dist = (z - o[2]) / d[2];
                (dist > 1e-9).then_some((dist, texture))
            }
            _ => None,
        };
        if let Some((dist, i, n)) = best {
            if wall.map_or(true, |w| dist < w.0) {
                let obj = &self.spec.objects[i];
                let p = [0, 1, 2].map(|k| o[k] + dist * d[k]);
                let l = sub3(p, obj.center_at(t));
                let whole = self.ids[i].0 as u16;
                let classes = if obj.parts {
                    let (top, right) = (l[1] >= 0.0, l[0] >= 0.0);
                    let part = whole + if top { 1 } else { 2 };
                    let sub = whole + 3 + 2 * u16::from(!top) + u16::from(right);
                    [sub, part, whole]
                } else {
                    [whole; 3]
                };
                return Hit {
                    color: Self::shade(obj.texture.albedo(l), n),
                    classes,
                    dynamic: !matches!(obj.trajectory, Trajectory::Static),
                    position: Some(p),
                };
            }
        }
        if let Some((dist, tex)) = wall {
            let p = [0, 1, 2].map(|k| o[k] + dist * d[k]);
            return Hit {
                color: Self::shade(tex.albedo(p), [0.0, 0.0, 1.0]),
                classes: [1; 3],
                dynamic: false,
                position: Some(p),
            };
        }
        let bg = match self.spec.background {
            Background::Flat(c) => c,
            Background::Wall { .. } => [0.0; 3],
        };
        Hit {
            color: bg,
            classes: [0; 3],
            dynamic: false,
            position: None,
        }
    }
}

fn quantized(v: f64) -> f64 {
    crate::image::quantize(v) as f64 / 255.0
}

/// A zero void row followed by `rows` random orthonormal rows of width `dim`
/// (`rows ≤ dim`), the layout every generated scene uses.
pub fn orthonormal_codebook(rows: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if rows > dim {
        return Err(Error::Config(format!("cannot fit {rows} orthonormal rows in {dim} dimensions")));
    }
    Ok(codebook(rows, dim, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Orthonormal rows (Gram–Schmidt on Gaussian draws), stored at f32 precision.
fn codebook(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![vec![0.0; dim]];
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < rows {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    out.extend(basis.into_iter().map(|r| r.into_iter().map(|x| x as f32 as f64).collect()));
    out
}

/// Render a scene to memory.
pub fn render_scene(spec: &SceneSpec, seed: u64) -> Result<SceneDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let infos = spec.class_infos();
    let book = codebook(infos.len() - 1, spec.feature_dim, &mut rng);
    let tracer = Tracer {
        spec,
        ids: spec.object_class_ids(),
    };
    let cams = spec.cameras();
    let times: Vec<f64> = (0..spec.timestamps)
        .map(|k| if spec.timestamps > 1 { k as f64 / (spec.timestamps - 1) as f64 } else { 0.0 })
        .collect();
    let jobs: Vec<(usize, usize, f64)> = (0..cams.len())
        .flat_map(|v| times.iter().map(move |&t| (v, 0, t)))
        .enumerate()
        .map(|(i, (v, _, t))| (i, v, t))
        .collect();
    let (w, h, ss) = (spec.width, spec.height, spec.supersample);
    let frames: Vec<Frame> = jobs
        .par_iter()
        .map(|&(index, view, t)| {
            let (cam, split) = &cams[view];
            let cam = cam.clone().with_time(t);
            let o = cam.center();
            let mut image = Image::new(w, h, 3);
            let mut mask = Mask::new(w, h);
            let mut classes: [Vec<u16>; 3] = [vec![0; w * h], vec![0; w * h], vec![0; w * h]];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = [0.0; 3];
                    for sy in 0..ss {
                        for sx in 0..ss {
                            let u = x as f64 + (sx as f64 + 0.5) / ss as f64;
                            let v = y as f64 + (sy as f64 + 0.5) / ss as f64;
                            let hit = tracer.trace(o, cam.ray_direction(u, v), t);
                            (0..3).for_each(|c| acc[c] += hit.color[c]);
                        }
                    }
                    let px = image.at_mut(x, y);
                    (0..3).for_each(|c| px[c] = quantized(acc[c] / (ss * ss) as f64));
                    let center = tracer.trace(o, cam.ray_direction(x as f64 + 0.5, y as f64 + 0.5), t);
                    let p = y * w + x;
                    mask.data[p] = center.dynamic;
                    for s in 0..3 {
                        classes[s][p] = center.classes[s];
                    }
                }
            }
            Frame {
                index,
                view,
                split: *split,
                camera: cam,
                image,
                mask,
                classes,
            }
        })
        .collect();
    let train: Vec<usize> = (0..frames.len()).filter(|&i| frames[i].split == Split::Train).collect();
    let mut init_points = Vec::with_capacity(spec.init_points);
    let mut attempts = 0;
    while init_points.len() < spec.init_points && !train.is_empty() && attempts < spec.init_points * 50 {
        attempts += 1;
        let f = &frames[train[rng.gen_range(0..train.len())]];
        let (u, v) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let hit = tracer.trace(f.camera.center(), f.camera.ray_direction(u, v), f.time());
        if let Some(p) = hit.position {
            init_points.push(InitPoint {
                position: p,
                color: hit.color,
            });
        }
    }
    let background = match spec.background {
        Background::Flat(c) => c,
        Background::Wall { .. } => [0.0; 3],
    };
    Ok(SceneDataset {
        name: spec.name.clone(),
        width: w,
        height: h,
        background,
        classes: infos,
        codebook: book,
        frames,
        init_points,
    })
}

/// Render a scene and write it to `dir`.
pub fn generate_scene(spec: &SceneSpec, seed: u64, dir: &Path) -> Result<SceneDataset> {
    let ds = render_scene(spec, seed)?;
    ds.save(dir)?;
    Ok(ds)
}

/// `size × size` black/white checkerboard with square `cell` pixels.
pub fn checkerboard(size: usize, cell: usize) -> Image {
    let mut img = Image::new(size, size, 3);
    for y in 0..size {
        for x in 0..size {
            let v = if (x / cell + y / cell) % 2 == 0 { 1.0 } else { 0.0 };
            img.at_mut(x, y).iter_mut().for_each(|c| *c = v);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SCALES;
    use crate::guidance::{texture_density, Sobel};

    fn tiny(name: &str) -> SceneSpec {
        let mut s = SceneSpec::bundled(name).unwrap();
        s.width = 24;
        s.height = 24;
        s.timestamps = 4;
        s.rig.train_views = 3;
        s.rig.test_views = 1;
        s.init_points = 50;
        s
    }

    #[test]
    fn empty_static_scene_is_constant() {
        let mut s = tiny("dynamic-clean");
        s.objects.clear();
        s.rig.arc_degrees = 0.0;
        let ds = render_scene(&s, 0).unwrap();
        for f in &ds.frames {
            assert_eq!(f.image, ds.frames[0].image);
            assert_eq!(f.mask.count(), 0);
        }
    }

    #[test]
    fn mask_centroid_moves_monotonically() {
        let mut s = tiny("dynamic-clean");
        s.objects = vec![checker_box([-1.2, 0.0, 0.0], [1.2, 0.0, 0.0])];
        s.rig.arc_degrees = 0.0;
        s.rig.focal = 16.0;
        s.rig.train_views = 1;
        s.rig.test_views = 0;
        s.timestamps = 8;
        let ds = render_scene(&s, 0).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for f in &ds.frames {
            let (mut sx, mut n) = (0.0, 0.0);
            for (p, &m) in f.mask.data.iter().enumerate() {
                if m {
                    sx += (p % s.width) as f64;
                    n += 1.0;
                }
            }
            assert!(n > 0.0);
            assert!(sx / n > prev);
            prev = sx / n;
        }
    }

    #[test]
    fn noise_raises_texture_density() {
        let mut quiet = tiny("dynamic-noisy");
        if let Background::Wall { texture: Texture::Noise { amplitude, .. }, .. } = &mut quiet.background {
            *amplitude = 0.0;
        }
        let loud = tiny("dynamic-noisy");
        let imgs = |s: &SceneSpec| render_scene(s, 3).unwrap().frames.into_iter().map(|f| f.image).collect::<Vec<_>>();
        let (a, b) = (
            texture_density(&imgs(&quiet), &Sobel::default()).unwrap(),
            texture_density(&imgs(&loud), &Sobel::default()).unwrap(),
        );
        assert!(b > a, "{b} vs {a}");
    }

    #[test]
    fn codebook_rows_are_orthonormal_and_void_is_zero() {
        let ds = render_scene(&tiny("dynamic-multiscale"), 1).unwrap();
        assert!(ds.codebook[0].iter().all(|&v| v == 0.0));
        for i in 1..ds.codebook.len() {
            for j in 1..ds.codebook.len() {
                let d: f64 = ds.codebook[i].iter().zip(&ds.codebook[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-6);
            }
        }
        assert_eq!(ds.canonical_rows().len(), 4);
    }

    #[test]
    fn scales_nest() {
        let ds = render_scene(&tiny("dynamic-multiscale"), 2).unwrap();
        let names: Vec<&str> = ds.classes.iter().map(|c| c.name.as_str()).collect();
        let mut parts_seen = 0;
        for f in &ds.frames {
            for p in 0..f.classes[0].len() {
                let [s, m, l] = [0, 1, 2].map(|k| names[f.classes[k][p] as usize]);
                assert!(s.starts_with(m) && m.starts_with(l), "{s} {m} {l}");
                if s != l {
                    parts_seen += 1;
                }
            }
        }
        assert!(parts_seen > 0);
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_scene(&tiny("dynamic-multiscale"), 5, dir.path()).unwrap();
        let back = SceneDataset::load(dir.path()).unwrap();
        assert_eq!(ds.codebook, back.codebook);
        assert_eq!(ds.init_points, back.init_points);
        for (a, b) in ds.frames.iter().zip(&back.frames) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.classes, b.classes);
            assert_eq!(a.camera, b.camera);
        }
        assert_eq!(ds, back);
        for f in &back.frames {
            for s in 0..SCALES.len() {
                for p in 0..f.classes[s].len() {
                    assert_eq!(back.feature_at(f, s, p), back.codebook[f.classes[s][p] as usize].as_slice());
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = tiny("dynamic-noisy");
        assert_eq!(render_scene(&s, 9).unwrap(), render_scene(&s, 9).unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = tiny("dynamic-clean");
        s.width = 0;
        assert!(matches!(render_scene(&s, 0), Err(Error::SpecValidation(_))));
        assert!(SceneSpec::bundled("nope").is_err());
        let mut s = tiny("dynamic-multiscale");
        s.feature_dim = 4;
        assert!(matches!(render_scene(&s, 0), Err(Error::SpecValidation(_))));
    }
}
