//! Relevance queries, segmentation, top-k deformation and selective editing.

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::dataset::{Frame, SceneDataset, SCALES};
use crate::deform::deform;
use crate::error::{Error, Result};
use crate::guidance::l1_loss;
use crate::image::{Image, Mask};
use crate::model::{layout, Camera, GaussianCloud};
use crate::optim::{adam_step, AdamConfig, Moments};
use crate::raster::{render, render_backward, RenderConfig, RenderOutput, Upstream};

/// Which scales take part in the per-pixel maximum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScaleRule {
    #[default]
    Max,
    Fixed(usize),
}

/// Query and canonical embeddings, normalized at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryContext {
    pub query: Vec<f64>,
    pub canonicals: Vec<Vec<f64>>,
    pub threshold: f64,
    pub scale_rule: ScaleRule,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroPrompt);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

impl QueryContext {
    pub fn new(query: &[f64], canonicals: &[Vec<f64>], threshold: f64) -> Result<Self> {
        if canonicals.is_empty() {
            return Err(Error::EmptyList);
        }
        for c in canonicals {
            if c.len() != query.len() {
                return Err(Error::DimensionMismatch {
                    expected: query.len(),
                    got: c.len(),
                });
            }
        }
        Ok(Self {
            query: unit(query)?,
            canonicals: canonicals.iter().map(|c| unit(c)).collect::<Result<_>>()?,
            threshold,
            scale_rule: ScaleRule::Max,
        })
    }

    /// Prompt = class name looked up in the scene codebook; canonicals are its reserved rows.
    pub fn from_dataset(ds: &SceneDataset, prompt: &str, threshold: f64) -> Result<Self> {
        let id = ds.class_id(prompt)?;
        let canon: Vec<Vec<f64>> = ds.canonical_rows().into_iter().map(<[f64]>::to_vec).collect();
        Self::new(&ds.codebook[id], &canon, threshold)
    }

    pub fn dim(&self) -> usize {
        self.query.len()
    }
}

/// `min_i exp(e·q) / (exp(e·q) + exp(e·c_i))`, evaluated as a logistic of the
/// dot-product difference.
pub fn relevance(emb: &[f64], ctx: &QueryContext) -> Result<f64> {
    if emb.len() != ctx.dim() {
        return Err(Error::DimensionMismatch {
            expected: ctx.dim(),
            got: emb.len(),
        });
    }
    let q = dot(emb, &ctx.query);
    let mut best = f64::INFINITY;
    for c in &ctx.canonicals {
        let d = q - dot(emb, c);
        let s = if d >= 0.0 {
            1.0 / (1.0 + (-d).exp())
        } else {
            let e = d.exp();
            e / (1.0 + e)
        };
        best = best.min(s);
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    /// Scale index (into [`SCALES`]) that produced each pixel's value.
    pub scale: Vec<u8>,
}

impl RelevanceMap {
    pub fn to_image(&self) -> Image {
        Image::from_data(self.width, self.height, 1, self.values.clone()).expect("relevance map shape")
    }
}

/// Render the checkpoint at `cam` (time `t`) with deformation applied.
pub fn render_checkpoint(ck: &Checkpoint, cam: &Camera, t: f64, cfg: &RenderConfig) -> Result<RenderOutput> {
    let cam = cam.clone().with_time(t);
    let state = deform(&ck.field, &ck.cloud, t)?.state;
    render(&ck.cloud, &state, &cam, ck.meta.background, cfg)
}

fn latent_blocks(ck: &Checkpoint) -> Result<usize> {
    let nl = ck.codec.latent_dim();
    if nl == 0 || ck.cloud.feature_dim % nl != 0 || ck.cloud.feature_dim / nl != SCALES.len() {
        return Err(Error::DimensionMismatch {
            expected: nl * SCALES.len(),
            got: ck.cloud.feature_dim,
        });
    }
    Ok(nl)
}

/// Per-pixel relevance: decode each scale's rendered latent, score it and keep
/// the best scale.
pub fn relevance_map(ck: &Checkpoint, cam: &Camera, t: f64, ctx: &QueryContext, cfg: &RenderConfig) -> Result<RelevanceMap> {
    let nl = latent_blocks(ck)?;
    if ck.codec.input_dim() != ctx.dim() {
        return Err(Error::DimensionMismatch {
            expected: ck.codec.input_dim(),
            got: ctx.dim(),
        });
    }
    let scales: Vec<usize> = match ctx.scale_rule {
        ScaleRule::Max => (0..SCALES.len()).collect(),
        ScaleRule::Fixed(s) if s < SCALES.len() => vec![s],
        ScaleRule::Fixed(s) => return Err(Error::Config(format!("scale {s} out of range"))),
    };
    let out = render_checkpoint(ck, cam, t, cfg)?;
    let n = ck.cloud.feature_dim;
    let npx = out.feature.pixels();
    let per: Vec<Result<(f64, u8)>> = (0..npx)
        .into_par_iter()
        .map(|p| {
            let mut best = (f64::NEG_INFINITY, 0u8);
            for &s in &scales {
                let lat = &out.feature.data[p * n + s * nl..p * n + (s + 1) * nl];
                let r = relevance(&ck.codec.decode(lat)?, ctx)?;
                if r > best.0 {
                    best = (r, s as u8);
                }
            }
            Ok(best)
        })
        .collect();
    let mut values = Vec::with_capacity(npx);
    let mut scale = Vec::with_capacity(npx);
    for r in per {
        let (v, s) = r?;
        values.push(v);
        scale.push(s);
    }
    Ok(RelevanceMap {
        width: out.feature.width,
        height: out.feature.height,
        values,
        scale,
    })
}

/// Pixels whose relevance reaches `threshold`.
pub fn segment(map: &RelevanceMap, threshold: f64) -> Mask {
    Mask {
        width: map.width,
        height: map.height,
        data: map.values.iter().map(|&v| v >= threshold).collect(),
    }
}

pub enum MaskSource<'a> {
    GroundTruth,
    RelevanceQuery {
        checkpoint: &'a Checkpoint,
        ctx: &'a QueryContext,
        threshold: f64,
    },
}

/// Dynamic-foreground mask for a frame, from the dataset or a relevance query.
pub fn foreground_mask(frame: &Frame, source: &MaskSource, cfg: &RenderConfig) -> Result<Mask> {
    match source {
        MaskSource::GroundTruth => {
            let (w, h) = (frame.camera.width as usize, frame.camera.height as usize);
            if frame.mask.width != w || frame.mask.height != h {
                return Err(Error::MaskUnavailable(format!("frame {} has no mask of its size", frame.index)));
            }
            Ok(frame.mask.clone())
        }
        MaskSource::RelevanceQuery { checkpoint, ctx, threshold } => {
            let map = relevance_map(checkpoint, &frame.camera, frame.time(), ctx, cfg)
                .map_err(|e| Error::MaskUnavailable(e.to_string()))?;
            Ok(segment(&map, *threshold))
        }
    }
}

/// Encode a high-dimensional prompt and repeat it for every scale block, giving
/// a vector comparable with Gaussian features.
pub fn prompt_latent(ck: &Checkpoint, embedding: &[f64]) -> Result<Vec<f64>> {
    latent_blocks(ck)?;
    let l = ck.codec.encode(embedding)?;
    Ok(l.iter().copied().cycle().take(l.len() * SCALES.len()).collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Gaussians whose feature has cosine similarity ≥ `sigma` with the prompt latent.
pub fn select_gaussians(cloud: &GaussianCloud, prompt: &[f64], sigma: f64) -> Result<Vec<usize>> {
    if prompt.len() != cloud.feature_dim {
        return Err(Error::DimensionMismatch {
            expected: cloud.feature_dim,
            got: prompt.len(),
        });
    }
    if norm(prompt) == 0.0 {
        return Err(Error::ZeroPrompt);
    }
    Ok((0..cloud.len()).filter(|&i| cosine(&cloud.gaussians[i].feature, prompt) >= sigma).collect())
}

/// A view to fit during recoloring.
#[derive(Clone, Debug)]
pub struct RecolorTarget {
    pub camera: Camera,
    pub image: Image,
}

#[derive(Clone, Debug)]
pub enum EditAction {
    Remove,
    /// Fit the selected Gaussians' colors to the targets with L1 for `iters` Adam steps.
    Recolor {
        targets: Vec<RecolorTarget>,
        iters: usize,
        lr: f64,
    },
}

/// Apply an edit to a copy of the checkpoint.
pub fn edit(ck: &Checkpoint, selection: &[usize], action: &EditAction, cfg: &RenderConfig) -> Result<Checkpoint> {
    let n = ck.cloud.len();
    if let Some(&bad) = selection.iter().find(|&&i| i >= n) {
        return Err(Error::Config(format!("selection index {bad} out of range for {n} Gaussians")));
    }
    let mut sel = vec![false; n];
    selection.iter().for_each(|&i| sel[i] = true);
    let mut out = ck.clone();
    match action {
        EditAction::Remove => {
            let keep: Vec<usize> = (0..n).filter(|&i| !sel[i]).collect();
            if keep.len() != n {
                out.cloud = ck.cloud.subset(&keep);
            }
        }
        EditAction::Recolor { targets, iters, lr } => {
            if selection.is_empty() {
                return Err(Error::EmptySelection);
            }
            if targets.is_empty() {
                return Err(Error::EmptyList);
            }
            let idx: Vec<usize> = (0..n).filter(|&i| sel[i]).collect();
            let mut colors: Vec<f64> = idx.iter().flat_map(|&i| ck.cloud.gaussians[i].color).collect();
            let mut moments = Moments::zeros(colors.len());
            let adam = AdamConfig::default();
            let states = targets
                .iter()
                .map(|tg| deform(&ck.field, &ck.cloud, tg.camera.time).map(|d| d.state))
                .collect::<Result<Vec<_>>>()?;
            for _ in 0..*iters {
                let mut grad = vec![0.0; colors.len()];
                for (tg, state) in targets.iter().zip(&states) {
                    let r = render(&out.cloud, state, &tg.camera, ck.meta.background, cfg)?;
                    let (_, g) = l1_loss(&r.color, &tg.image)?;
                    let up = Upstream {
                        color: g.iter().map(|v| v / targets.len() as f64).collect(),
                        ..Upstream::default()
                    };
                    let gr = render_backward(&out.cloud, state, &tg.camera, ck.meta.background, &up, cfg)?;
                    for (k, &i) in idx.iter().enumerate() {
                        for c in 0..3 {
                            grad[3 * k + c] += gr.color[i][c];
                        }
                    }
                }
                adam_step(&mut colors, &grad, &mut moments, *lr, &adam)?;
                for (k, &i) in idx.iter().enumerate() {
                    for c in 0..3 {
                        colors[3 * k + c] = colors[3 * k + c].clamp(0.0, 1.0);
                        out.cloud.gaussians[i].params.color[c] = colors[3 * k + c];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Which offset components enter the deformation norm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DeformNorm {
    /// Position, rotation and log-scale offsets together.
    #[default]
    Full,
    PositionOnly,
}

pub struct TopK {
    /// Selected indices, largest deformation first.
    pub indices: Vec<usize>,
    pub norms: Vec<f64>,
    pub cloud: GaussianCloud,
    pub image: Image,
}

/// The `k` Gaussians that deform most at time `t`, rendered alone from `cam`.
pub fn topk_deformation(
    ck: &Checkpoint,
    cam: &Camera,
    t: f64,
    k: usize,
    which: DeformNorm,
    cfg: &RenderConfig,
) -> Result<TopK> {
    if k > ck.cloud.len() {
        return Err(Error::Config(format!("k = {k} exceeds the cloud size {}", ck.cloud.len())));
    }
    let d = deform(&ck.field, &ck.cloud, t)?;
    let comps = match which {
        DeformNorm::Full => 0..d.offsets.first().map_or(0, |o| o.len()),
        DeformNorm::PositionOnly => layout::POSITION,
    };
    let norms: Vec<f64> = d.offsets.iter().map(|o| norm(&o[comps.clone()])).collect();
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    order.truncate(k);
    let cloud = ck.cloud.subset(&order);
    let state = d.state.subset(&order);
    let cam = cam.clone().with_time(t);
    let image = render(&cloud, &state, &cam, ck.meta.background, cfg)?.color;
    Ok(TopK {
        norms: order.iter().map(|&i| norms[i]).collect(),
        indices: order,
        cloud,
        image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rvec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn relevance_closed_form() {
        let q = vec![1.0, 0.0, 0.0];
        let canon = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let ctx = QueryContext::new(&q, &canon, 0.5).unwrap();
        let r = relevance(&[1.0, 0.0, 0.0], &ctx).unwrap();
        let e = std::f64::consts::E;
        assert!((r - e / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn symmetric_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let q = rvec(&mut rng, 6);
            let ctx = QueryContext::new(&q, &[q.clone(), q.clone(), q.clone()], 0.5).unwrap();
            assert_eq!(relevance(&rvec(&mut rng, 6), &ctx).unwrap(), 0.5);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(QueryContext::new(&[0.0, 0.0], &[vec![1.0, 0.0]], 0.5), Err(Error::ZeroPrompt)));
        let ctx = QueryContext::new(&[1.0, 0.0], &[vec![0.0, 1.0]], 0.5).unwrap();
        assert!(matches!(relevance(&[1.0], &ctx), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn segment_bounds() {
        let map = RelevanceMap {
            width: 2,
            height: 2,
            values: vec![0.2, 0.5, 0.7, 0.99],
            scale: vec![0; 4],
        };
        assert_eq!(segment(&map, 0.0).count(), 4);
        assert_eq!(segment(&map, 1.0).count(), 0);
        assert_eq!(segment(&map, 0.6).data, vec![false, false, true, true]);
    }

    #[test]
    fn select_cases() {
        let mut c = GaussianCloud::new(3);
        for f in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [2.0, 0.1, 0.0]] {
            let mut p = crate::model::GaussianParams::new([0.0; 3], 0.1, 0.5, [0.5; 3], 3);
            p.feature = f.to_vec();
            c.push(crate::model::Gaussian::new(p)).unwrap();
        }
        assert_eq!(select_gaussians(&c, &[1.0, 0.0, 0.0], 0.9).unwrap(), vec![0, 3]);
        assert_eq!(select_gaussians(&c, &[3.0, 0.0, 0.0], 0.9).unwrap(), vec![0, 3]);
        assert_eq!(select_gaussians(&c, &[1.0, 0.0, 0.0], 1.0).unwrap(), vec![0]);
        assert!(matches!(select_gaussians(&c, &[0.0; 3], 0.5), Err(Error::ZeroPrompt)));
    }
}
