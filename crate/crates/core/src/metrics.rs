//! Image and segmentation metrics.

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

pub const PSNR_CAP: f64 = 100.0;
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_shape(b)?;
    if a.data.is_empty() {
        return Err(Error::EmptyImage);
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64)
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// SSIM value of every valid window, averaged over channels, indexed by window center.
fn ssim_map(a: &Image, b: &Image) -> Result<(usize, usize, Vec<f64>)> {
    a.check_shape(b)?;
    if a.width < WINDOW || a.height < WINDOW {
        return Err(Error::MetricUndefined(format!(
            "SSIM needs at least {WINDOW}×{WINDOW} pixels, got {}×{}",
            a.width, a.height
        )));
    }
    let g = gaussian_window();
    let (ow, oh) = (a.width - WINDOW + 1, a.height - WINDOW + 1);
    let ch = a.channels;
    let mut map = vec![0.0; ow * oh];
    for y0 in 0..oh {
        for x0 in 0..ow {
            let mut total = 0.0;
            for c in 0..ch {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..WINDOW {
                    for i in 0..WINDOW {
                        let w = g[i] * g[j];
                        let k = ((y0 + j) * a.width + x0 + i) * ch + c;
                        let (va, vb) = (a.data[k], b.data[k]);
                        ma += w * va;
                        mb += w * vb;
                        saa += w * va * va;
                        sbb += w * vb * vb;
                        sab += w * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            }
            map[y0 * ow + x0] = total / ch as f64;
        }
    }
    Ok((ow, oh, map))
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5) over valid windows.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let (_, _, map) = ssim_map(a, b)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Structural dissimilarity `(1 − SSIM) / 2`.
pub fn dssim(a: &Image, b: &Image) -> Result<f64> {
    Ok((1.0 - ssim(a, b)?) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskedMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

fn check_mask(img: &Image, mask: &Mask) -> Result<()> {
    if img.width != mask.width || img.height != mask.height {
        return Err(Error::ShapeMismatch(format!(
            "mask {}×{} for a {}×{} image",
            mask.width, mask.height, img.width, img.height
        )));
    }
    Ok(())
}

/// PSNR over masked pixels.
pub fn masked_psnr(a: &Image, b: &Image, mask: &Mask) -> Result<f64> {
    a.check_shape(b)?;
    check_mask(a, mask)?;
    let n = mask.count();
    if n == 0 {
        return Err(Error::MetricUndefined("mask is empty".into()));
    }
    let ch = a.channels;
    let mut sum = 0.0;
    for (p, _) in mask.data.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..ch {
            let d = a.data[p * ch + c] - b.data[p * ch + c];
            sum += d * d;
        }
    }
    Ok(psnr_from_mse(sum / (n * ch) as f64))
}

/// Mean SSIM over windows whose center pixel lies in the mask.
pub fn masked_ssim(a: &Image, b: &Image, mask: &Mask) -> Result<f64> {
    check_mask(a, mask)?;
    let (ow, oh, map) = ssim_map(a, b)?;
    let half = WINDOW / 2;
    let (mut sum, mut n) = (0.0, 0usize);
    for y0 in 0..oh {
        for x0 in 0..ow {
            if mask.data[(y0 + half) * mask.width + x0 + half] {
                sum += map[y0 * ow + x0];
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::MetricUndefined("no SSIM window centered inside the mask".into()));
    }
    Ok(sum / n as f64)
}

pub fn masked_metrics(rendered: &Image, target: &Image, mask: &Mask) -> Result<MaskedMetrics> {
    Ok(MaskedMetrics {
        psnr: masked_psnr(rendered, target, mask)?,
        ssim: masked_ssim(rendered, target, mask)?,
    })
}

/// Intersection over union; two empty masks score 1.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::ShapeMismatch(format!(
            "{}×{} vs {}×{} masks",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean IoU over aligned frame lists.
pub fn miou(pred: &[Mask], gt: &[Mask]) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyList);
    }
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("{} predicted masks for {} targets", pred.len(), gt.len())));
    }
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        sum += iou(p, g)?;
    }
    Ok(sum / pred.len() as f64)
}
