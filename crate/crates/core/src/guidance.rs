//! Texture-adaptive foreground guidance: edge-based texture density, the
//! sigmoid mask weight, and the two-region photometric loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Produces a binary edge map from an RGB image.
pub trait EdgeOperator: Send + Sync {
    fn edges(&self, img: &Image) -> Result<Mask>;
}

/// Sobel magnitude on Rec. 601 luma with replicate padding. A pixel is an edge
/// when its magnitude exceeds `threshold × max magnitude` (and the max is positive).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sobel {
    pub threshold: f64,
}

impl Default for Sobel {
    fn default() -> Self {
        Self { threshold: 0.25 }
    }
}

/// Sobel gradient magnitude of a single-channel image.
pub fn sobel_magnitude(gray: &[f64], width: usize, height: usize) -> Vec<f64> {
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, width as isize - 1) as usize;
        let yc = y.clamp(0, height as isize - 1) as usize;
        gray[yc * width + xc]
    };
    let mut mag = vec![0.0; width * height];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            mag[y as usize * width + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    mag
}

impl EdgeOperator for Sobel {
    fn edges(&self, img: &Image) -> Result<Mask> {
        if img.pixels() == 0 {
            return Err(Error::EmptyImage);
        }
        if img.channels != 3 {
            return Err(Error::ShapeMismatch(format!("edge operator expects RGB, got {} channels", img.channels)));
        }
        let mag = sobel_magnitude(&img.to_gray(), img.width, img.height);
        let max = mag.iter().cloned().fold(0.0, f64::max);
        let cut = self.threshold * max;
        Ok(Mask {
            width: img.width,
            height: img.height,
            data: mag.iter().map(|&m| max > 0.0 && m > cut).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionLoss {
    #[default]
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionNorm {
    /// Divide each region's sum by its own value count.
    #[default]
    Mean,
    /// Divide both regions by the whole image's value count.
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub alpha: f64,
    pub beta: f64,
    pub edge_threshold: f64,
    pub region_loss: RegionLoss,
    pub region_norm: RegionNorm,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 0.01,
            edge_threshold: 0.25,
            region_loss: RegionLoss::L1,
            region_norm: RegionNorm::Mean,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "guidance needs alpha > 0 and beta >= 0, got {} and {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn sobel(&self) -> Sobel {
        Sobel {
            threshold: self.edge_threshold,
        }
    }
}

/// Mean fraction of edge pixels over the images.
pub fn texture_density(images: &[Image], op: &dyn EdgeOperator) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyImage);
    }
    let mut sum = 0.0;
    for img in images {
        let e = op.edges(img)?;
        sum += e.count() as f64 / e.data.len() as f64;
    }
    Ok(sum / images.len() as f64)
}

/// `σ(α(D̄ − β))`.
pub fn adaptive_lambda(density: f64, cfg: &GuidanceConfig) -> f64 {
    1.0 / (1.0 + (-cfg.alpha * (density - cfg.beta)).exp())
}

/// Plain mean absolute error over every value and its gradient.
pub fn l1_loss(rendered: &Image, target: &Image) -> Result<(f64, Vec<f64>)> {
    rendered.check_shape(target)?;
    let n = rendered.data.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| {
            let r = a - b;
            loss += r.abs();
            sign(r) / n
        })
        .collect();
    Ok((loss / n, grad))
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

/// Two-region weighted photometric loss: `λ_m·L(inside) + (1 − λ_m)·L(outside)`.
/// Each region's error is averaged over its own values; an empty region contributes 0.
pub fn masked_image_loss(
    rendered: &Image,
    target: &Image,
    mask: &Mask,
    lambda_m: f64,
    cfg: &GuidanceConfig,
) -> Result<(f64, Vec<f64>)> {
    rendered.check_shape(target)?;
    if mask.width != rendered.width || mask.height != rendered.height {
        return Err(Error::ShapeMismatch(format!(
            "mask {}×{} for a {}×{} image",
            mask.width, mask.height, rendered.width, rendered.height
        )));
    }
    let ch = rendered.channels;
    let inside = mask.count() * ch;
    let outside = mask.data.len() * ch - inside;
    let (n_in, n_out) = match cfg.region_norm {
        RegionNorm::Mean => (inside, outside),
        RegionNorm::Sum => (mask.data.len() * ch, mask.data.len() * ch),
    };
    let w_in = if inside > 0 { lambda_m / n_in as f64 } else { 0.0 };
    let w_out = if outside > 0 { (1.0 - lambda_m) / n_out as f64 } else { 0.0 };
    let mut loss = 0.0;
    let mut grad = vec![0.0; rendered.data.len()];
    for (p, &m) in mask.data.iter().enumerate() {
        let w = if m { w_in } else { w_out };
        for c in 0..ch {
            let k = p * ch + c;
            let r = rendered.data[k] - target.data[k];
            match cfg.region_loss {
                RegionLoss::L1 => {
                    loss += w * r.abs();
                    grad[k] = w * sign(r);
                }
                RegionLoss::L2 => {
                    loss += w * r * r;
                    grad[k] = 2.0 * w * r;
                }
            }
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct AllEdges;
    impl EdgeOperator for AllEdges {
        fn edges(&self, img: &Image) -> Result<Mask> {
            Ok(Mask::full(img.width, img.height))
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image::from_data(w, h, 3, (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn density_bounds() {
        let flat = Image::filled(8, 8, &[0.3, 0.3, 0.3]);
        assert_eq!(texture_density(&[flat.clone()], &Sobel::default()).unwrap(), 0.0);
        assert_eq!(texture_density(&[flat], &AllEdges).unwrap(), 1.0);
        assert!(matches!(texture_density(&[], &Sobel::default()), Err(Error::EmptyImage)));
    }

    #[test]
    fn density_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imgs: Vec<Image> = (0..4).map(|_| random_image(&mut rng, 10, 7)).collect();
        let d = texture_density(&imgs, &Sobel::default()).unwrap();
        let mut rev = imgs.clone();
        rev.reverse();
        assert_eq!(d, texture_density(&rev, &Sobel::default()).unwrap());
        assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn lambda_values() {
        let cfg = GuidanceConfig::default();
        assert_eq!(adaptive_lambda(0.01, &cfg), 0.5);
        assert!((adaptive_lambda(0.05, &cfg) - 0.598_687_660_112_452_3).abs() < 1e-12);
        assert!((adaptive_lambda(0.21, &cfg) - 0.880_797_077_977_882_4).abs() < 1e-12);
        let mut prev = 0.0;
        for k in 0..=100 {
            let l = adaptive_lambda(k as f64 / 100.0, &cfg);
            assert!(l > prev && l < 1.0);
            prev = l;
        }
    }

    #[test]
    fn masked_loss_closed_forms() {
        let cfg = GuidanceConfig::default();
        let t = Image::filled(4, 4, &[0.5, 0.5, 0.5]);
        let mut mask = Mask::new(4, 4);
        for p in 0..8 {
            mask.data[p] = true;
        }
        assert_eq!(masked_image_loss(&t, &t, &mask, 0.7, &cfg).unwrap().0, 0.0);
        let r = Image::filled(4, 4, &[0.6, 0.4, 0.6]);
        let (l, _) = masked_image_loss(&r, &t, &mask, 0.5, &cfg).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
        let (plain, _) = l1_loss(&r, &t).unwrap();
        assert!((l - plain).abs() < 1e-12);
        // Empty region contributes nothing.
        let (l, _) = masked_image_loss(&r, &t, &Mask::new(4, 4), 0.9, &cfg).unwrap();
        assert!((l - 0.1 * 0.1).abs() < 1e-12);
    }

    #[test]
    fn masked_loss_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = GuidanceConfig::default();
        for _ in 0..20 {
            let (w, h) = (rng.gen_range(1..9), rng.gen_range(1..9));
            let a = random_image(&mut rng, w, h);
            let b = random_image(&mut rng, w, h);
            let mut m = Mask::new(w, h);
            m.data.iter_mut().for_each(|v| *v = rng.gen_bool(0.4));
            let lam = rng.gen_range(0.0..1.0);
            let (l, g) = masked_image_loss(&a, &b, &m, lam, &cfg).unwrap();
            let (mut s_in, mut n_in, mut s_out, mut n_out) = (0.0, 0usize, 0.0, 0usize);
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        let e = (a.at(x, y)[c] - b.at(x, y)[c]).abs();
                        if m.data[y * w + x] {
                            s_in += e;
                            n_in += 1;
                        } else {
                            s_out += e;
                            n_out += 1;
                        }
                    }
                }
            }
            let mut want = 0.0;
            if n_in > 0 {
                want += lam * s_in / n_in as f64;
            }
            if n_out > 0 {
                want += (1.0 - lam) * s_out / n_out as f64;
            }
            assert!((l - want).abs() < 1e-10);
            // Gradient: finite differences on a few entries.
            let hstep = 1e-7;
            for k in (0..a.data.len()).step_by(5) {
                let mut ap = a.clone();
                ap.data[k] += hstep;
                let mut am = a.clone();
                am.data[k] -= hstep;
                let num = (masked_image_loss(&ap, &b, &m, lam, &cfg).unwrap().0
                    - masked_image_loss(&am, &b, &m, lam, &cfg).unwrap().0)
                    / (2.0 * hstep);
                assert!((num - g[k]).abs() <= 1e-4 * num.abs().max(g[k].abs()).max(1e-6));
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        let a = Image::new(3, 3, 3);
        let b = Image::new(3, 4, 3);
        assert!(matches!(
            masked_image_loss(&a, &b, &Mask::new(3, 3), 0.5, &GuidanceConfig::default()),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
