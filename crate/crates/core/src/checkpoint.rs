//! Binary checkpoint container.
//!
//! Layout (little endian): magic `S4DG`, version `u32`, feature_dim `u32`,
//! Gaussian count `u32`, densification round `u32`; then per Gaussian its row
//! of `f32` parameters, its generation `u32`, an anchor flag byte and, when set,
//! the anchor row. Tagged blocks follow, each a 4-byte tag and a `u64` length:
//! `DEFM` (deformation field), `CODC` (feature codec), `META` (JSON).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::FeatureCodec;
use crate::deform::DeformationField;
use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::model::{layout, Gaussian, GaussianCloud, GaussianParams};

pub const MAGIC: &[u8; 4] = b"S4DG";
pub const VERSION: u32 = 1;

/// Free-form run information stored alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub scene: String,
    pub iteration: usize,
    pub stage: String,
    pub background: [f64; 3],
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub cloud: GaussianCloud,
    pub field: DeformationField,
    pub codec: FeatureCodec,
    pub meta: CheckpointMeta,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn block(&mut self, tag: &[u8; 4], payload: Vec<u8>) {
        self.0.extend_from_slice(tag);
        self.u64(payload.len() as u64);
        self.0.extend_from_slice(&payload);
    }
    fn mlp(&mut self, m: &Mlp) {
        self.u32(m.sizes().len() as u32);
        for &s in m.sizes() {
            self.u32(s as u32);
        }
        self.u8(u8::from(m.has_bias()));
        for &p in &m.params {
            self.f32(p);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "unexpected end of checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn mlp(&mut self) -> Result<Mlp> {
        let n = self.u32()? as usize;
        if !(2..=16).contains(&n) {
            return Err(Error::format(self.path, "implausible MLP depth"));
        }
        let sizes = (0..n).map(|_| self.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let bias = self.u8()? != 0;
        let mut m = Mlp::zeros(&sizes, bias);
        for p in m.params.iter_mut() {
            *p = self.f32()?;
        }
        Ok(m)
    }
}

fn row(w: &mut Writer, p: &GaussianParams, scratch: &mut [f64]) {
    p.write_row(scratch);
    for &v in scratch.iter() {
        w.f32(v);
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let stride = self.cloud.stride();
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(self.cloud.feature_dim as u32);
        w.u32(self.cloud.len() as u32);
        w.u32(self.cloud.round);
        let mut scratch = vec![0.0; stride];
        for g in &self.cloud.gaussians {
            row(&mut w, &g.params, &mut scratch);
            w.u32(g.generation);
            match &g.anchor {
                Some(a) => {
                    w.u8(1);
                    row(&mut w, a, &mut scratch);
                }
                None => w.u8(0),
            }
        }
        let f = &self.field;
        let mut d = Writer(Vec::new());
        for &r in &f.resolution {
            d.u32(r as u32);
        }
        d.u32(f.channels as u32);
        d.u8(u8::from(f.time_input));
        for v in f.bbox_min.iter().chain(&f.bbox_max) {
            d.f64(*v);
        }
        d.u64(f.grid.len() as u64);
        for &v in &f.grid {
            d.f32(v);
        }
        d.mlp(&f.mlp);
        w.block(b"DEFM", d.0);
        let mut c = Writer(Vec::new());
        c.mlp(&self.codec.encoder);
        c.mlp(&self.codec.decoder);
        w.block(b"CODC", c.0);
        w.block(b"META", serde_json::to_vec(&self.meta).expect("meta json"));
        w.0
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let feature_dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let round = r.u32()?;
        let stride = layout::stride(feature_dim);
        if count.saturating_mul(stride * 4) > buf.len() {
            return Err(Error::format(path, "Gaussian count exceeds file size"));
        }
        let mut cloud = GaussianCloud::new(feature_dim);
        cloud.round = round;
        let mut scratch = vec![0.0; stride];
        let read_params = |r: &mut Reader, scratch: &mut Vec<f64>| -> Result<GaussianParams> {
            for v in scratch.iter_mut() {
                *v = r.f32()?;
            }
            let mut p = GaussianParams::new([0.0; 3], 1.0, 0.5, [0.0; 3], feature_dim);
            p.read_row(scratch);
            Ok(p)
        };
        for _ in 0..count {
            let params = read_params(&mut r, &mut scratch)?;
            let generation = r.u32()?;
            let anchor = match r.u8()? {
                0 => None,
                1 => Some(read_params(&mut r, &mut scratch)?),
                _ => return Err(Error::format(path, "bad anchor flag")),
            };
            cloud.gaussians.push(Gaussian {
                params,
                generation,
                anchor,
            });
        }
        let (mut field, mut codec, mut meta) = (None, None, None);
        while r.pos < buf.len() {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let len = r.u64()? as usize;
            let payload = r.take(len)?;
            let mut b = Reader {
                buf: payload,
                pos: 0,
                path,
            };
            match &tag {
                b"DEFM" => {
                    let mut resolution = [0usize; 4];
                    for v in &mut resolution {
                        *v = b.u32()? as usize;
                    }
                    let channels = b.u32()? as usize;
                    let time_input = b.u8()? != 0;
                    let mut bb = [0.0; 6];
                    for v in &mut bb {
                        *v = b.f64()?;
                    }
                    let n = b.u64()? as usize;
                    if n != resolution.iter().product::<usize>() * channels || n * 4 > payload.len() {
                        return Err(Error::format(path, "deformation grid size mismatch"));
                    }
                    let grid = (0..n).map(|_| b.f32()).collect::<Result<Vec<_>>>()?;
                    let mlp = b.mlp()?;
                    field = Some(DeformationField {
                        resolution,
                        channels,
                        time_input,
                        bbox_min: [bb[0], bb[1], bb[2]],
                        bbox_max: [bb[3], bb[4], bb[5]],
                        grid,
                        mlp,
                    });
                }
                b"CODC" => {
                    let encoder = b.mlp()?;
                    let decoder = b.mlp()?;
                    codec = Some(FeatureCodec { encoder, decoder });
                }
                b"META" => {
                    meta = Some(serde_json::from_slice(payload).map_err(|e| Error::format(path, e.to_string()))?);
                }
                _ => {}
            }
        }
        let missing = |what: &str| Error::format(path, format!("missing {what} block"));
        Ok(Self {
            cloud,
            field: field.ok_or_else(|| missing("DEFM"))?,
            codec: codec.ok_or_else(|| missing("CODC"))?,
            meta: meta.ok_or_else(|| missing("META"))?,
        })
    }

    /// Write to `path` via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }

    /// Copy with every value rounded to its stored precision, so that
    /// `load(save(x)) == x.quantized()`.
    pub fn quantized(&self) -> Self {
        Self::from_bytes(&self.to_bytes(), Path::new("<memory>")).expect("own encoding decodes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::anchor_record;
    use crate::codec::CodecConfig;
    use crate::deform::DeformConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cloud = GaussianCloud::new(3);
        for i in 0..5 {
            let mut p = GaussianParams::new([rng.gen(), rng.gen(), rng.gen()], 0.2, 0.3, [0.1, 0.2, 0.3], 3);
            p.feature = vec![rng.gen(), rng.gen(), rng.gen()];
            let mut g = Gaussian::new(p);
            g.generation = i % 2;
            cloud.push(g).unwrap();
        }
        cloud.round = 1;
        anchor_record(&mut cloud);
        cloud.gaussians[4].anchor = None;
        let cfg = DeformConfig {
            resolution: [3, 2, 2, 2],
            channels: 2,
            hidden: 4,
            ..DeformConfig::default()
        };
        let field = DeformationField::new(&cfg, [-1.0; 3], [1.0; 3], &mut rng).unwrap();
        let codec = FeatureCodec::new(
            &CodecConfig {
                input_dim: 6,
                latent_dim: 3,
                hidden: 5,
                ..CodecConfig::default()
            },
            1,
        );
        Checkpoint {
            cloud,
            field,
            codec,
            meta: CheckpointMeta {
                scene: "x".into(),
                iteration: 7,
                stage: "fine".into(),
                background: [0.5; 3],
                seed: 3,
            },
        }
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck.quantized());
        assert_eq!(back.to_bytes(), ck.to_bytes());
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[0..4], MAGIC);
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 5);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let p = Path::new("x");
        let mut b = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 3], p).is_err());
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b, p), Err(Error::Format { .. })));
    }
}
