//! Autoencoder compressing high-dimensional semantic features to the
//! per-Gaussian latent size and back.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{Mlp, MlpCache};
use crate::optim::{adam_step, AdamConfig, Moments};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconLoss {
    #[default]
    L1,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    /// Bias terms in both networks. Off by default so that zero maps to zero.
    pub bias: bool,
    pub loss: ReconLoss,
    pub iters: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            latent_dim: 8,
            hidden: 128,
            bias: false,
            loss: ReconLoss::L1,
            iters: 3000,
            lr: 1e-2,
            lr_final: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCodec {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl FeatureCodec {
    pub fn new(cfg: &CodecConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Mlp::xavier(&[cfg.input_dim, cfg.hidden, cfg.latent_dim], cfg.bias, &mut rng);
        let decoder = Mlp::xavier(&[cfg.latent_dim, cfg.hidden, cfg.input_dim], cfg.bias, &mut rng);
        Self { encoder, decoder }
    }

    /// All parameters zero.
    pub fn zeros(cfg: &CodecConfig) -> Self {
        Self {
            encoder: Mlp::zeros(&[cfg.input_dim, cfg.hidden, cfg.latent_dim], cfg.bias),
            decoder: Mlp::zeros(&[cfg.latent_dim, cfg.hidden, cfg.input_dim], cfg.bias),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encode(&self, phi: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), phi.len())?;
        Ok(self.encoder.forward(phi))
    }

    pub fn decode(&self, latent: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.latent_dim(), latent.len())?;
        Ok(self.decoder.forward(latent))
    }

    /// Write as JSON (floats round-trip exactly).
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).expect("codec serializes");
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        if c.encoder.input_dim() != c.decoder.output_dim() || c.encoder.output_dim() != c.decoder.input_dim() {
            return Err(Error::format(path, "encoder and decoder shapes disagree"));
        }
        Ok(c)
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn check_features(features: &[Vec<f64>], dim: usize) -> Result<()> {
    if features.is_empty() {
        return Err(Error::EmptyList);
    }
    for f in features {
        check_dim(dim, f.len())?;
    }
    Ok(())
}

/// Mean per-coordinate reconstruction error over the set.
pub fn reconstruction_loss(codec: &FeatureCodec, features: &[Vec<f64>], kind: ReconLoss) -> Result<f64> {
    check_features(features, codec.input_dim())?;
    let mut sum = 0.0;
    for f in features {
        let y = codec.decoder.forward(&codec.encoder.forward(f));
        sum += y
            .iter()
            .zip(f)
            .map(|(a, b)| match kind {
                ReconLoss::L1 => (a - b).abs(),
                ReconLoss::L2 => (a - b) * (a - b),
            })
            .sum::<f64>();
    }
    Ok(sum / (features.len() * codec.input_dim()) as f64)
}

/// Reconstruction loss plus gradients for encoder and decoder parameters.
pub fn reconstruction_grad(
    codec: &FeatureCodec,
    features: &[Vec<f64>],
    kind: ReconLoss,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_features(features, codec.input_dim())?;
    let norm = 1.0 / (features.len() * codec.input_dim()) as f64;
    let mut g_enc = vec![0.0; codec.encoder.params.len()];
    let mut g_dec = vec![0.0; codec.decoder.params.len()];
    let (mut ce, mut cd) = (MlpCache::default(), MlpCache::default());
    let mut loss = 0.0;
    for f in features {
        let z = codec.encoder.forward_cached(f, &mut ce);
        let y = codec.decoder.forward_cached(&z, &mut cd);
        let g_y: Vec<f64> = y
            .iter()
            .zip(f)
            .map(|(a, b)| {
                let r = a - b;
                match kind {
                    ReconLoss::L1 => {
                        loss += r.abs();
                        if r > 0.0 {
                            norm
                        } else if r < 0.0 {
                            -norm
                        } else {
                            0.0
                        }
                    }
                    ReconLoss::L2 => {
                        loss += r * r;
                        2.0 * r * norm
                    }
                }
            })
            .collect();
        let g_z = codec.decoder.backward(&cd, &g_y, &mut g_dec);
        codec.encoder.backward(&ce, &g_z, &mut g_enc);
    }
    Ok((loss * norm, g_enc, g_dec))
}

/// Full-batch Adam with an exponentially decaying step size. Returns the
/// trained codec and its final reconstruction loss.
pub fn train_codec(features: &[Vec<f64>], cfg: &CodecConfig) -> Result<(FeatureCodec, f64)> {
    if features.is_empty() {
        return Err(Error::EmptyList);
    }
    if cfg.input_dim != features[0].len() {
        return Err(Error::DimensionMismatch {
            expected: cfg.input_dim,
            got: features[0].len(),
        });
    }
    check_features(features, cfg.input_dim)?;
    let mut codec = FeatureCodec::new(cfg, cfg.seed);
    let adam = AdamConfig::default();
    let mut me = Moments::zeros(codec.encoder.params.len());
    let mut md = Moments::zeros(codec.decoder.params.len());
    for it in 0..cfg.iters {
        let frac = if cfg.iters > 1 { it as f64 / (cfg.iters - 1) as f64 } else { 0.0 };
        let lr = cfg.lr * (cfg.lr_final / cfg.lr).powf(frac);
        let (_, ge, gd) = reconstruction_grad(&codec, features, cfg.loss)?;
        adam_step(&mut codec.encoder.params, &ge, &mut me, lr, &adam)?;
        adam_step(&mut codec.decoder.params, &gd, &mut md, lr, &adam)?;
    }
    let loss = reconstruction_loss(&codec, features, cfg.loss)?;
    Ok((codec, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> CodecConfig {
        CodecConfig {
            input_dim: 4,
            latent_dim: 2,
            hidden: 3,
            bias: true,
            ..CodecConfig::default()
        }
    }

    #[test]
    fn zero_vector_has_zero_loss_at_init() {
        let cfg = CodecConfig::default();
        let codec = FeatureCodec::new(&cfg, 5);
        assert_eq!(reconstruction_loss(&codec, &[vec![0.0; 64]], ReconLoss::L1).unwrap(), 0.0);
    }

    #[test]
    fn zero_codec_outputs_zero() {
        let codec = FeatureCodec::zeros(&CodecConfig::default());
        let z = codec.encode(&[0.3; 64]).unwrap();
        assert_eq!(z, vec![0.0; 8]);
        assert_eq!(codec.decode(&[1.0; 8]).unwrap(), vec![0.0; 64]);
    }

    #[test]
    fn shapes_and_errors() {
        let codec = FeatureCodec::new(&CodecConfig::default(), 1);
        assert_eq!(codec.encode(&[0.1; 64]).unwrap().len(), 8);
        assert!(matches!(codec.encode(&[0.1; 3]), Err(Error::DimensionMismatch { expected: 64, got: 3 })));
        let ragged = vec![vec![0.0; 64], vec![0.0; 63]];
        assert!(matches!(
            train_codec(&ragged, &CodecConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let codec = FeatureCodec::new(&cfg, 2);
        let feats: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        for kind in [ReconLoss::L1, ReconLoss::L2] {
            let (_, ge, gd) = reconstruction_grad(&codec, &feats, kind).unwrap();
            let h = 1e-6;
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
            for k in 0..codec.encoder.params.len() {
                let mut a = codec.clone();
                a.encoder.params[k] += h;
                let mut b = codec.clone();
                b.encoder.params[k] -= h;
                let num = (reconstruction_loss(&a, &feats, kind).unwrap() - reconstruction_loss(&b, &feats, kind).unwrap())
                    / (2.0 * h);
                assert!(rel(num, ge[k]) < 1e-4, "{kind:?} enc {k}: {num} vs {}", ge[k]);
            }
            for k in 0..codec.decoder.params.len() {
                let mut a = codec.clone();
                a.decoder.params[k] += h;
                let mut b = codec.clone();
                b.decoder.params[k] -= h;
                let num = (reconstruction_loss(&a, &feats, kind).unwrap() - reconstruction_loss(&b, &feats, kind).unwrap())
                    / (2.0 * h);
                assert!(rel(num, gd[k]) < 1e-4, "{kind:?} dec {k}: {num} vs {}", gd[k]);
            }
        }
    }

    #[test]
    fn memorizes_a_single_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f64> = (0..16).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let cfg = CodecConfig {
            input_dim: 16,
            latent_dim: 4,
            hidden: 32,
            iters: 1500,
            ..CodecConfig::default()
        };
        let (codec, _) = train_codec(&[v.clone()], &cfg).unwrap();
        let y = codec.decode(&codec.encode(&v).unwrap()).unwrap();
        let l1: f64 = y.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 < 1e-3, "{l1}");
    }
}
