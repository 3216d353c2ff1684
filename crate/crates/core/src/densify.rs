//! Clone/split densification and opacity pruning with generation tagging.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::anchor::anchor_record;
use crate::geom::rotation_matrix;
use crate::model::{Gaussian, GaussianCloud};
use crate::optim::Moments;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensifyConfig {
    /// Mean screen-space gradient norm above which a Gaussian is densified.
    pub grad_threshold: f64,
    /// Activated opacity below which a Gaussian is removed.
    pub prune_opacity: f64,
    /// Gaussians with max scale ≤ `percent_dense × extent` are cloned, larger ones split.
    pub percent_dense: f64,
    pub extent: f64,
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            prune_opacity: 0.005,
            percent_dense: 0.01,
            extent: 1.0,
            max_gaussians: 20_000,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensifyStats {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

const SPLIT_SHRINK: f64 = 1.6;

/// Densify by mean gradient `signal`, prune transparent Gaussians, advance the
/// round and refresh all anchors. Moment rows follow their Gaussians; new
/// Gaussians start with zero moments.
pub fn densify_and_prune<G: Rng>(
    cloud: &mut GaussianCloud,
    moments: &mut Moments,
    signal: &[f64],
    cfg: &DensifyConfig,
    rng: &mut G,
) -> DensifyStats {
    let mut stats = DensifyStats::default();
    if cloud.is_empty() {
        return stats;
    }
    let stride = cloud.stride();
    let n = cloud.len();
    let round = cloud.round + 1;
    let limit = cfg.percent_dense * cfg.extent;

    // Strongest candidates first so the cap keeps the most useful ones.
    let mut cand: Vec<usize> = (0..n).filter(|&i| signal.get(i).copied().unwrap_or(0.0) >= cfg.grad_threshold).collect();
    cand.sort_by(|&a, &b| signal[b].total_cmp(&signal[a]).then(a.cmp(&b)));
    let mut budget = cfg.max_gaussians.saturating_sub(n);
    let mut clones = Vec::new();
    let mut splits = Vec::new();
    for i in cand {
        let g = &cloud.gaussians[i];
        let max_scale = g.log_scale.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp();
        if max_scale <= limit {
            if budget >= 1 {
                budget -= 1;
                clones.push(i);
            }
        } else if budget >= 1 {
            // Split replaces one Gaussian with two.
            budget -= 1;
            splits.push(i);
        }
    }
    clones.sort_unstable();
    splits.sort_unstable();

    // Assemble (source row or None for fresh moments, Gaussian).
    let mut out: Vec<(Option<usize>, Gaussian)> = Vec::with_capacity(n + clones.len() + splits.len());
    let mut removed = vec![false; n];
    for &i in &splits {
        removed[i] = true;
    }
    for (i, g) in cloud.gaussians.iter().enumerate() {
        if !removed[i] {
            out.push((Some(i), g.clone()));
        }
    }
    for &i in &clones {
        let mut g = cloud.gaussians[i].clone();
        g.generation = round;
        out.push((None, g));
        stats.cloned += 1;
    }
    for &i in &splits {
        let src = &cloud.gaussians[i];
        let r = rotation_matrix(&crate::geom::quat_normalize(&src.rotation));
        let s = src.log_scale.map(f64::exp);
        for _ in 0..2 {
            let z: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let local = [s[0] * z[0], s[1] * z[1], s[2] * z[2]];
            let mut g = src.clone();
            for a in 0..3 {
                g.params.position[a] += r[a][0] * local[0] + r[a][1] * local[1] + r[a][2] * local[2];
                g.params.log_scale[a] -= SPLIT_SHRINK.ln();
            }
            g.generation = round;
            out.push((None, g));
        }
        stats.split += 1;
    }

    let before = out.len();
    out.retain(|(_, g)| crate::geom::sigmoid(g.opacity_logit) >= cfg.prune_opacity);
    stats.pruned = before - out.len();

    let mut m = Vec::with_capacity(out.len() * stride);
    let mut v = Vec::with_capacity(out.len() * stride);
    for (src, _) in &out {
        match src {
            Some(i) if moments.len() == n * stride => {
                m.extend_from_slice(&moments.m[i * stride..(i + 1) * stride]);
                v.extend_from_slice(&moments.v[i * stride..(i + 1) * stride]);
            }
            _ => {
                m.extend(std::iter::repeat(0.0).take(stride));
                v.extend(std::iter::repeat(0.0).take(stride));
            }
        }
    }
    moments.m = m;
    moments.v = v;
    cloud.gaussians = out.into_iter().map(|(_, g)| g).collect();
    cloud.round = round;
    anchor_record(cloud);
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{layout, logit, GaussianParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(scales: &[f64], opacities: &[f64]) -> GaussianCloud {
        let mut c = GaussianCloud::new(2);
        for (k, (&s, &o)) in scales.iter().zip(opacities).enumerate() {
            c.push(Gaussian::new(GaussianParams::new([k as f64, 0.0, 3.0], s, o, [0.5; 3], 2))).unwrap();
        }
        c
    }

    #[test]
    fn zero_signal_only_prunes() {
        let mut c = cloud(&[0.1, 0.1, 0.1], &[0.5, 0.001, 0.9]);
        let mut mo = Moments::zeros(3 * c.stride());
        let st = densify_and_prune(&mut c, &mut mo, &[0.0; 3], &DensifyConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(st, DensifyStats { cloned: 0, split: 0, pruned: 1 });
        assert_eq!(c.len(), 2);
        assert_eq!(c.round, 1);
        assert!(c.gaussians.iter().all(|g| g.anchor.as_ref() == Some(&g.params)));
    }

    #[test]
    fn single_clone() {
        let mut c = cloud(&[0.001, 0.5], &[0.5, 0.5]);
        c.round = 2;
        let mut mo = Moments::zeros(2 * c.stride());
        let cfg = DensifyConfig::default();
        densify_and_prune(&mut c, &mut mo, &[1.0, 0.0], &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(c.len(), 3);
        assert_eq!(c.gaussians[2].generation, 3);
        assert_eq!(c.gaussians[2].position, c.gaussians[0].position);
        assert_eq!(c.gaussians[0].generation, 0);
    }

    #[test]
    fn split_shrinks_and_replaces() {
        let mut c = cloud(&[0.5], &[0.5]);
        let mut mo = Moments::zeros(c.stride());
        densify_and_prune(&mut c, &mut mo, &[1.0], &DensifyConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(c.len(), 2);
        for g in &c.gaussians {
            assert!((g.log_scale[0] - (0.5f64.ln() - 1.6f64.ln())).abs() < 1e-12);
            assert_eq!(g.generation, 1);
        }
    }

    #[test]
    fn moments_follow_gaussians() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let n = 30;
            let scales: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 0.001 } else { 0.3 }).collect();
            let ops: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.2) { 0.001 } else { 0.6 }).collect();
            let mut c = cloud(&scales, &ops);
            let stride = c.stride();
            // Tag every Gaussian through its color and its moment rows with the same id.
            let mut mo = Moments::zeros(n * stride);
            for i in 0..n {
                let tag = (i + 1) as f64;
                c.gaussians[i].params.color = [tag, 0.0, 0.0];
                c.gaussians[i].params.opacity_logit = logit(ops[i]);
                for k in 0..stride {
                    mo.m[i * stride + k] = tag;
                    mo.v[i * stride + k] = tag * 10.0;
                }
            }
            let signal: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
            let cfg = DensifyConfig {
                max_gaussians: if trial % 3 == 0 { 35 } else { 1000 },
                ..DensifyConfig::default()
            };
            densify_and_prune(&mut c, &mut mo, &signal, &cfg, &mut rng);
            assert_eq!(mo.len(), c.len() * stride);
            assert!(c.len() <= cfg.max_gaussians.max(n));
            for (i, g) in c.gaussians.iter().enumerate() {
                let tag = g.color[0];
                let row = &mo.m[i * stride..(i + 1) * stride];
                if g.generation == c.round {
                    assert!(row.iter().all(|&v| v == 0.0));
                } else {
                    assert!(row.iter().all(|&v| v == tag), "row {i}");
                    assert_eq!(mo.v[i * stride + layout::OPACITY], tag * 10.0);
                }
                assert!(crate::geom::sigmoid(g.opacity_logit) >= cfg.prune_opacity);
            }
        }
    }

    #[test]
    fn empty_cloud_is_unchanged() {
        let mut c = GaussianCloud::new(2);
        let mut mo = Moments::zeros(0);
        let st = densify_and_prune(&mut c, &mut mo, &[], &DensifyConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(st, DensifyStats::default());
        assert_eq!(c.round, 0);
    }
}
