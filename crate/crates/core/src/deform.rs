//! Spatio-temporal deformation: a dense 4D feature grid sampled quadrilinearly
//! and decoded by a small MLP into per-Gaussian offsets (ΔX, Δr, Δs).

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::quat_normalize_backward;
use crate::geom::quat_normalize;
use crate::mlp::{Mlp, MlpCache};
use crate::model::GaussianCloud;
use crate::raster::DeformedState;

/// Number of decoded offset values per Gaussian: ΔX (3), Δr (4), Δs (3).
pub const OFFSET_DIM: usize = 10;
const CHUNK: usize = 256;
const CORNERS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformConfig {
    /// Grid nodes along x, y, z, t.
    pub resolution: [usize; 4],
    pub channels: usize,
    pub hidden: usize,
    /// Append the raw timestamp to the sampled grid feature.
    pub time_input: bool,
    /// Grid values start uniform in `[-grid_init, grid_init]`.
    pub grid_init: f64,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self {
            resolution: [16, 16, 16, 8],
            channels: 16,
            hidden: 64,
            time_input: true,
            grid_init: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformationField {
    pub resolution: [usize; 4],
    pub channels: usize,
    pub time_input: bool,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub grid: Vec<f64>,
    pub mlp: Mlp,
}

/// Result of [`deform`].
#[derive(Clone, Debug, PartialEq)]
pub struct DeformOutput {
    pub state: DeformedState,
    pub offsets: Vec<[f64; OFFSET_DIM]>,
    /// Gaussians whose position fell outside the box and was clamped.
    pub clamped: usize,
}

/// Gradients of a scalar loss with respect to canonical geometry and field parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformGradients {
    pub position: Vec<[f64; 3]>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<[f64; 3]>,
    pub grid: Vec<f64>,
    pub mlp: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Sample {
    base: [usize; CORNERS],
    w: [f64; CORNERS],
    /// ∂w/∂position per spatial axis.
    dw: [[f64; CORNERS]; 3],
    clamped: bool,
}

impl DeformationField {
    pub fn new<G: Rng>(cfg: &DeformConfig, bbox_min: [f64; 3], bbox_max: [f64; 3], rng: &mut G) -> Result<Self> {
        if cfg.resolution.iter().any(|&n| n == 0) || cfg.channels == 0 || cfg.hidden == 0 {
            return Err(Error::Config("deformation grid and MLP sizes must be positive".into()));
        }
        if (0..3).any(|a| !(bbox_max[a] > bbox_min[a])) {
            return Err(Error::Config("deformation bounding box is empty".into()));
        }
        let nodes: usize = cfg.resolution.iter().product();
        let grid = (0..nodes * cfg.channels)
            .map(|_| if cfg.grid_init > 0.0 { rng.gen_range(-cfg.grid_init..cfg.grid_init) } else { 0.0 })
            .collect();
        let input = cfg.channels + usize::from(cfg.time_input);
        let mut mlp = Mlp::xavier(&[input, cfg.hidden, cfg.hidden, OFFSET_DIM], true, rng);
        mlp.zero_output_layer();
        Ok(Self {
            resolution: cfg.resolution,
            channels: cfg.channels,
            time_input: cfg.time_input,
            bbox_min,
            bbox_max,
            grid,
            mlp,
        })
    }

    /// Total learnable parameters (grid then MLP).
    pub fn param_count(&self) -> usize {
        self.grid.len() + self.mlp.params.len()
    }

    pub fn node_index(&self, ix: usize, iy: usize, iz: usize, it: usize) -> usize {
        let [nx, ny, nz, _] = self.resolution;
        (((it * nz + iz) * ny + iy) * nx + ix) * self.channels
    }

    fn sample(&self, p: &[f64; 3], t: f64) -> Sample {
        // Per axis: lower node, upper node, fraction, ∂u/∂coord.
        let mut axes = [(0usize, 0usize, 0.0f64, 0.0f64); 4];
        let mut clamped = false;
        for a in 0..4 {
            let n = self.resolution[a];
            let (coord, lo, hi) = if a < 3 { (p[a], self.bbox_min[a], self.bbox_max[a]) } else { (t, 0.0, 1.0) };
            if n == 1 {
                axes[a] = (0, 0, 0.0, 0.0);
                continue;
            }
            let span = (n - 1) as f64;
            let scale = span / (hi - lo);
            let mut u = (coord - lo) * scale;
            let mut du = scale;
            if !(0.0..=span).contains(&u) {
                if a < 3 {
                    clamped = true;
                }
                u = u.clamp(0.0, span);
                du = 0.0;
            }
            let i0 = (u.floor() as usize).min(n - 2);
            axes[a] = (i0, i0 + 1, u - i0 as f64, du);
        }
        let mut s = Sample {
            base: [0; CORNERS],
            w: [0.0; CORNERS],
            dw: [[0.0; CORNERS]; 3],
            clamped,
        };
        for k in 0..CORNERS {
            let mut idx = [0usize; 4];
            let mut wa = [0.0f64; 4];
            for a in 0..4 {
                let (i0, i1, f, _) = axes[a];
                if k >> a & 1 == 1 {
                    idx[a] = i1;
                    wa[a] = f;
                } else {
                    idx[a] = i0;
                    wa[a] = 1.0 - f;
                }
            }
            s.base[k] = self.node_index(idx[0], idx[1], idx[2], idx[3]);
            s.w[k] = wa.iter().product();
            for a in 0..3 {
                let sign = if k >> a & 1 == 1 { 1.0 } else { -1.0 };
                let others: f64 = (0..4).filter(|&b| b != a).map(|b| wa[b]).product();
                s.dw[a][k] = sign * axes[a].3 * others;
            }
        }
        s
    }

    fn features(&self, s: &Sample, t: f64) -> Vec<f64> {
        let c = self.channels;
        let mut x = vec![0.0; c + usize::from(self.time_input)];
        for k in 0..CORNERS {
            if s.w[k] == 0.0 {
                continue;
            }
            let node = &self.grid[s.base[k]..s.base[k] + c];
            for ch in 0..c {
                x[ch] += s.w[k] * node[ch];
            }
        }
        if self.time_input {
            x[c] = t;
        }
        x
    }

    /// Decoded offsets for a single canonical position.
    pub fn offsets_at(&self, p: &[f64; 3], t: f64) -> [f64; OFFSET_DIM] {
        let s = self.sample(p, t);
        let y = self.mlp.forward(&self.features(&s, t));
        y.try_into().expect("offset head width")
    }
}

fn apply(
    pos: &[f64; 3],
    rot: &[f64; 4],
    ls: &[f64; 3],
    o: &[f64; OFFSET_DIM],
) -> ([f64; 3], [f64; 4], [f64; 3]) {
    let p = [pos[0] + o[0], pos[1] + o[1], pos[2] + o[2]];
    let dr = [o[3], o[4], o[5], o[6]];
    // A zero offset leaves the (already unit) canonical rotation untouched bit for bit.
    let r = if dr == [0.0; 4] {
        *rot
    } else {
        quat_normalize(&[rot[0] + dr[0], rot[1] + dr[1], rot[2] + dr[2], rot[3] + dr[3]])
    };
    let s = [ls[0] + o[7], ls[1] + o[8], ls[2] + o[9]];
    (p, r, s)
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("timestamp {t} outside [0, 1]")));
    }
    Ok(())
}

/// Deformed geometry of every Gaussian at time `t`.
pub fn deform(field: &DeformationField, cloud: &GaussianCloud, t: f64) -> Result<DeformOutput> {
    check_time(t)?;
    let per: Vec<Vec<([f64; OFFSET_DIM], bool)>> = cloud
        .gaussians
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|g| {
                    let s = field.sample(&g.position, t);
                    let y = field.mlp.forward(&field.features(&s, t));
                    (y.try_into().expect("offset head width"), s.clamped)
                })
                .collect()
        })
        .collect();
    let n = cloud.len();
    let mut out = DeformOutput {
        state: DeformedState {
            positions: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            log_scales: Vec::with_capacity(n),
        },
        offsets: Vec::with_capacity(n),
        clamped: 0,
    };
    for (g, (o, clamped)) in cloud.gaussians.iter().zip(per.into_iter().flatten()) {
        let (p, r, s) = apply(&g.position, &g.rotation, &g.log_scale, &o);
        out.state.positions.push(p);
        out.state.rotations.push(r);
        out.state.log_scales.push(s);
        out.offsets.push(o);
        out.clamped += usize::from(clamped);
    }
    Ok(out)
}

/// Per-Gaussian forward intermediates kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct DeformCache {
    entries: Vec<(Sample, MlpCache, [f64; OFFSET_DIM])>,
}

/// [`deform`] that also records what [`deform_backward_cached`] needs.
pub fn deform_cached(field: &DeformationField, cloud: &GaussianCloud, t: f64) -> Result<(DeformOutput, DeformCache)> {
    check_time(t)?;
    let entries: Vec<(Sample, MlpCache, [f64; OFFSET_DIM])> = cloud
        .gaussians
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|g| {
                    let s = field.sample(&g.position, t);
                    let mut cache = MlpCache::default();
                    let y = field.mlp.forward_cached(&field.features(&s, t), &mut cache);
                    (s, cache, y.try_into().expect("offset head width"))
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let n = cloud.len();
    let mut out = DeformOutput {
        state: DeformedState {
            positions: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            log_scales: Vec::with_capacity(n),
        },
        offsets: Vec::with_capacity(n),
        clamped: 0,
    };
    for (g, (s, _, o)) in cloud.gaussians.iter().zip(&entries) {
        let (p, r, sc) = apply(&g.position, &g.rotation, &g.log_scale, o);
        out.state.positions.push(p);
        out.state.rotations.push(r);
        out.state.log_scales.push(sc);
        out.offsets.push(*o);
        out.clamped += usize::from(s.clamped);
    }
    Ok((out, DeformCache { entries }))
}

/// Reverse of [`deform`] given gradients on the deformed geometry.
pub fn deform_backward(
    field: &DeformationField,
    cloud: &GaussianCloud,
    t: f64,
    g_position: &[[f64; 3]],
    g_rotation: &[[f64; 4]],
    g_log_scale: &[[f64; 3]],
) -> Result<DeformGradients> {
    let (_, cache) = deform_cached(field, cloud, t)?;
    deform_backward_cached(field, cloud, &cache, g_position, g_rotation, g_log_scale)
}

/// Reverse pass reusing the intermediates of [`deform_cached`] on the same inputs.
pub fn deform_backward_cached(
    field: &DeformationField,
    cloud: &GaussianCloud,
    cache: &DeformCache,
    g_position: &[[f64; 3]],
    g_rotation: &[[f64; 4]],
    g_log_scale: &[[f64; 3]],
) -> Result<DeformGradients> {
    let n = cloud.len();
    if g_position.len() != n || g_rotation.len() != n || g_log_scale.len() != n || cache.entries.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "deformation gradients for {} Gaussians and a cache of {}, cloud has {n}",
            g_position.len(),
            cache.entries.len()
        )));
    }
    let c = field.channels;
    struct ChunkOut {
        canon: Vec<([f64; 3], [f64; 4], [f64; 3])>,
        grid: Vec<(usize, f64)>,
        mlp: Vec<f64>,
    }
    let chunks: Vec<ChunkOut> = cloud
        .gaussians
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut out = ChunkOut {
                canon: Vec::with_capacity(chunk.len()),
                grid: Vec::with_capacity(chunk.len() * CORNERS * c),
                mlp: vec![0.0; field.mlp.params.len()],
            };
            for (j, g) in chunk.iter().enumerate() {
                let i = ci * CHUNK + j;
                let (gp, gr, gs) = (g_position[i], g_rotation[i], g_log_scale[i]);
                let (s, mc, o) = &cache.entries[i];
                let dr = [o[3], o[4], o[5], o[6]];
                let g_r = if dr == [0.0; 4] {
                    gr
                } else {
                    let q = [g.rotation[0] + dr[0], g.rotation[1] + dr[1], g.rotation[2] + dr[2], g.rotation[3] + dr[3]];
                    quat_normalize_backward(&q, &gr)
                };
                let g_o = [gp[0], gp[1], gp[2], g_r[0], g_r[1], g_r[2], g_r[3], gs[0], gs[1], gs[2]];
                let g_x = field.mlp.backward(mc, &g_o, &mut out.mlp);
                let mut g_pos = gp;
                for k in 0..CORNERS {
                    let node = &field.grid[s.base[k]..s.base[k] + c];
                    let mut dot = 0.0;
                    for ch in 0..c {
                        dot += g_x[ch] * node[ch];
                    }
                    for a in 0..3 {
                        g_pos[a] += s.dw[a][k] * dot;
                    }
                    if s.w[k] != 0.0 {
                        for ch in 0..c {
                            out.grid.push((s.base[k] + ch, s.w[k] * g_x[ch]));
                        }
                    }
                }
                out.canon.push((g_pos, g_r, gs));
            }
            out
        })
        .collect();
    let mut grads = DeformGradients {
        position: Vec::with_capacity(n),
        rotation: Vec::with_capacity(n),
        log_scale: Vec::with_capacity(n),
        grid: vec![0.0; field.grid.len()],
        mlp: vec![0.0; field.mlp.params.len()],
    };
    for chunk in chunks {
        for (p, r, s) in chunk.canon {
            grads.position.push(p);
            grads.rotation.push(r);
            grads.log_scale.push(s);
        }
        for (k, v) in chunk.grid {
            grads.grid[k] += v;
        }
        for (a, b) in grads.mlp.iter_mut().zip(&chunk.mlp) {
            *a += b;
        }
    }
    Ok(grads)
}

fn for_each_edge(field: &DeformationField, mut f: impl FnMut(usize, usize)) {
    let [nx, ny, nz, nt] = field.resolution;
    let c = field.channels;
    for it in 0..nt {
        for iz in 0..nz {
            for iy in 0..ny {
                for ix in 0..nx {
                    let a = field.node_index(ix, iy, iz, it);
                    let mut nbrs = [None; 4];
                    if ix + 1 < nx {
                        nbrs[0] = Some(field.node_index(ix + 1, iy, iz, it));
                    }
                    if iy + 1 < ny {
                        nbrs[1] = Some(field.node_index(ix, iy + 1, iz, it));
                    }
                    if iz + 1 < nz {
                        nbrs[2] = Some(field.node_index(ix, iy, iz + 1, it));
                    }
                    if it + 1 < nt {
                        nbrs[3] = Some(field.node_index(ix, iy, iz, it + 1));
                    }
                    for b in nbrs.into_iter().flatten() {
                        for ch in 0..c {
                            f(a + ch, b + ch);
                        }
                    }
                }
            }
        }
    }
}

fn edge_count(field: &DeformationField) -> usize {
    let r = field.resolution;
    let nodes: usize = r.iter().product();
    (0..4).map(|a| nodes / r[a] * (r[a] - 1)).sum::<usize>() * field.channels
}

/// Mean squared difference over all grid-adjacent pairs along the four axes.
pub fn tv_loss(field: &DeformationField) -> f64 {
    let pairs = edge_count(field);
    if pairs == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for_each_edge(field, |a, b| {
        let d = field.grid[a] - field.grid[b];
        sum += d * d;
    });
    sum / pairs as f64
}

/// [`tv_loss`] and its gradient with respect to the grid values.
pub fn tv_loss_grad(field: &DeformationField) -> (f64, Vec<f64>) {
    let pairs = edge_count(field);
    let mut grad = vec![0.0; field.grid.len()];
    if pairs == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / pairs as f64;
    let mut sum = 0.0;
    for_each_edge(field, |a, b| {
        let d = field.grid[a] - field.grid[b];
        sum += d * d;
        grad[a] += 2.0 * d * inv;
        grad[b] -= 2.0 * d * inv;
    });
    (sum * inv, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Gaussian, GaussianParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> DeformConfig {
        DeformConfig {
            resolution: [3, 4, 2, 3],
            channels: 3,
            hidden: 6,
            time_input: true,
            grid_init: 0.5,
        }
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> GaussianCloud {
        let mut c = GaussianCloud::new(2);
        for _ in 0..n {
            let mut p = GaussianParams::new(
                [rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)],
                0.1,
                0.5,
                [0.5; 3],
                2,
            );
            p.rotation = quat_normalize(&[1.0, rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.2]);
            c.push(Gaussian::new(p)).unwrap();
        }
        c
    }

    fn randomize(field: &mut DeformationField, rng: &mut ChaCha8Rng) {
        for v in field.mlp.params.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }

    #[test]
    fn zero_init_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let field = DeformationField::new(&DeformConfig::default(), [-1.0; 3], [1.0; 3], &mut rng).unwrap();
        let c = cloud(&mut rng, 40);
        for t in [0.0, 0.37, 1.0] {
            let out = deform(&field, &c, t).unwrap();
            assert_eq!(out.state, DeformedState::canonical(&c));
        }
    }

    #[test]
    fn constant_bias_shifts_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut field = DeformationField::new(&small_cfg(), [-1.0; 3], [1.0; 3], &mut rng).unwrap();
        let last = field.mlp.layers() - 1;
        let (_, b) = field.mlp.layer_ranges(last);
        field.mlp.params[b.start] = 1.0;
        let c = cloud(&mut rng, 5);
        let out = deform(&field, &c, 0.5).unwrap();
        for (g, p) in c.iter().zip(&out.state.positions) {
            assert_eq!(p, &[g.position[0] + 1.0, g.position[1], g.position[2]]);
        }
    }

    #[test]
    fn interpolation_exact_at_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let field = DeformationField::new(&small_cfg(), [-1.0; 3], [1.0; 3], &mut rng).unwrap();
        let [nx, ny, nz, nt] = field.resolution;
        for (ix, iy, iz, it) in [(0, 0, 0, 0), (2, 3, 1, 2), (1, 2, 0, 1)] {
            let p = [
                -1.0 + 2.0 * ix as f64 / (nx - 1) as f64,
                -1.0 + 2.0 * iy as f64 / (ny - 1) as f64,
                -1.0 + 2.0 * iz as f64 / (nz - 1) as f64,
            ];
            let t = it as f64 / (nt - 1) as f64;
            let s = field.sample(&p, t);
            let x = field.features(&s, t);
            let base = field.node_index(ix, iy, iz, it);
            for ch in 0..field.channels {
                assert!((x[ch] - field.grid[base + ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_box_positions_are_clamped_and_counted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let field = DeformationField::new(&small_cfg(), [-1.0; 3], [1.0; 3], &mut rng).unwrap();
        let mut c = cloud(&mut rng, 3);
        c.gaussians[1].params.position = [5.0, 0.0, 0.0];
        assert_eq!(deform(&field, &c, 0.2).unwrap().clamped, 1);
    }

    #[test]
    fn rotation_stays_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut field = DeformationField::new(&small_cfg(), [-1.0; 3], [1.0; 3], &mut rng).unwrap();
        randomize(&mut field, &mut rng);
        let c = cloud(&mut rng, 30);
        let out = deform(&field, &c, 0.8).unwrap();
        for r in &out.state.rotations {
            let n: f64 = r.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn time_invariant_when_grid_constant_in_time_and_no_time_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cfg = small_cfg();
        cfg.time_input = false;
        let mut field = DeformationField::new(&cfg, [-1.0; 3], [1.0; 3], &mut rng).unwrap();
        randomize(&mut field, &mut rng);
        let [nx, ny, nz, nt] = field.resolution;
        for it in 1..nt {
            for iz in 0..nz {
                for iy in 0..ny {
                    for ix in 0..nx {
                        let (a, b) = (field.node_index(ix, iy, iz, 0), field.node_index(ix, iy, iz, it));
                        for ch in 0..field.channels {
                            field.grid[b + ch] = field.grid[a + ch];
                        }
                    }
                }
            }
        }
        let c = cloud(&mut rng, 10);
        let (a, b) = (deform(&field, &c, 0.1).unwrap(), deform(&field, &c, 0.9).unwrap());
        for (x, y) in a.offsets.iter().zip(&b.offsets) {
            for k in 0..OFFSET_DIM {
                assert!((x[k] - y[k]).abs() < 1e-12);
            }
        }
    }

    fn scalar_loss(field: &DeformationField, c: &GaussianCloud, t: f64, w: &[f64]) -> f64 {
        let out = deform(field, c, t).unwrap();
        let mut s = 0.0;
        for i in 0..c.len() {
            let base = i * 10;
            for a in 0..3 {
                s += w[base + a] * out.state.positions[i][a];
                s += w[base + 7 + a] * out.state.log_scales[i][a];
            }
            for a in 0..4 {
                s += w[base + 3 + a] * out.state.rotations[i][a];
            }
        }
        s
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut field = DeformationField::new(&small_cfg(), [-1.0; 3], [1.0; 3], &mut rng).unwrap();
        randomize(&mut field, &mut rng);
        let c = cloud(&mut rng, 4);
        let t = 0.31;
        let w: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gp: Vec<[f64; 3]> = (0..4).map(|i| [w[i * 10], w[i * 10 + 1], w[i * 10 + 2]]).collect();
        let gr: Vec<[f64; 4]> = (0..4).map(|i| [w[i * 10 + 3], w[i * 10 + 4], w[i * 10 + 5], w[i * 10 + 6]]).collect();
        let gs: Vec<[f64; 3]> = (0..4).map(|i| [w[i * 10 + 7], w[i * 10 + 8], w[i * 10 + 9]]).collect();
        let grads = deform_backward(&field, &c, t, &gp, &gr, &gs).unwrap();
        let h = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        for k in 0..field.grid.len() {
            let mut fa = field.clone();
            fa.grid[k] += h;
            let mut fb = field.clone();
            fb.grid[k] -= h;
            let num = (scalar_loss(&fa, &c, t, &w) - scalar_loss(&fb, &c, t, &w)) / (2.0 * h);
            assert!(rel(num, grads.grid[k]) < 1e-4, "grid {k}: {num} vs {}", grads.grid[k]);
        }
        for k in 0..field.mlp.params.len() {
            let mut fa = field.clone();
            fa.mlp.params[k] += h;
            let mut fb = field.clone();
            fb.mlp.params[k] -= h;
            let num = (scalar_loss(&fa, &c, t, &w) - scalar_loss(&fb, &c, t, &w)) / (2.0 * h);
            assert!(rel(num, grads.mlp[k]) < 1e-4, "mlp {k}: {num} vs {}", grads.mlp[k]);
        }
        for i in 0..c.len() {
            for a in 0..3 {
                let mut ca = c.clone();
                ca.gaussians[i].params.position[a] += h;
                let mut cb = c.clone();
                cb.gaussians[i].params.position[a] -= h;
                let num = (scalar_loss(&field, &ca, t, &w) - scalar_loss(&field, &cb, t, &w)) / (2.0 * h);
                assert!(rel(num, grads.position[i][a]) < 1e-4, "pos {i}/{a}");
            }
            for a in 0..4 {
                let mut ca = c.clone();
                ca.gaussians[i].params.rotation[a] += h;
                let mut cb = c.clone();
                cb.gaussians[i].params.rotation[a] -= h;
                let num = (scalar_loss(&field, &ca, t, &w) - scalar_loss(&field, &cb, t, &w)) / (2.0 * h);
                assert!(rel(num, grads.rotation[i][a]) < 1e-4, "rot {i}/{a}");
            }
        }
    }

    fn brute_tv(field: &DeformationField) -> f64 {
        let [nx, ny, nz, nt] = field.resolution;
        let mut sum = 0.0;
        let mut count = 0usize;
        for it in 0..nt {
            for iz in 0..nz {
                for iy in 0..ny {
                    for ix in 0..nx {
                        for (dx, dy, dz, dt) in [(1, 0, 0, 0), (0, 1, 0, 0), (0, 0, 1, 0), (0, 0, 0, 1)] {
                            let (jx, jy, jz, jt) = (ix + dx, iy + dy, iz + dz, it + dt);
                            if jx >= nx || jy >= ny || jz >= nz || jt >= nt {
                                continue;
                            }
                            for ch in 0..field.channels {
                                let a = field.grid[field.node_index(ix, iy, iz, it) + ch];
                                let b = field.grid[field.node_index(jx, jy, jz, jt) + ch];
                                sum += (a - b) * (a - b);
                                count += 1;
                            }
                        }
                    }
                }
            }
        }
        sum / count as f64
    }

    #[test]
    fn tv_closed_forms_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cfg = DeformConfig {
            resolution: [2, 1, 1, 1],
            channels: 1,
            hidden: 2,
            time_input: true,
            grid_init: 0.0,
        };
        let mut f = DeformationField::new(&cfg, [0.0; 3], [1.0; 3], &mut rng).unwrap();
        assert_eq!(tv_loss(&f), 0.0);
        f.grid = vec![0.0, 1.0];
        assert_eq!(tv_loss(&f), 1.0);
        cfg.resolution = [4; 4];
        cfg.channels = 2;
        cfg.grid_init = 1.0;
        let f = DeformationField::new(&cfg, [0.0; 3], [1.0; 3], &mut rng).unwrap();
        assert!((tv_loss(&f) - brute_tv(&f)).abs() < 1e-10);
        let (v, g) = tv_loss_grad(&f);
        assert!((v - tv_loss(&f)).abs() < 1e-14);
        let h = 1e-5;
        for k in (0..f.grid.len()).step_by(7) {
            let mut a = f.clone();
            a.grid[k] += h;
            let mut b = f.clone();
            b.grid[k] -= h;
            let num = (tv_loss(&a) - tv_loss(&b)) / (2.0 * h);
            assert!((num - g[k]).abs() / num.abs().max(g[k].abs()).max(1e-12) < 1e-6);
        }
    }
}
