//! Scene datasets: frames with cameras, masks and per-scale class maps, plus the
//! class codebook. Stored as a directory of PNGs with a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_png16, save_png16, Image, Mask};
use crate::model::Camera;

/// Class-map scales, finest first.
pub const SCALES: [&str; 3] = ["s", "m", "l"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    /// Belongs to a moving object.
    pub dynamic: bool,
    /// One of the reserved canonical rows used by relevance scoring.
    pub canonical: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub view: usize,
    pub split: Split,
    /// Carries the timestamp in `camera.time`.
    pub camera: Camera,
    pub image: Image,
    /// Dynamic-foreground mask.
    pub mask: Mask,
    /// Class ids per scale, in [`SCALES`] order.
    pub classes: [Vec<u16>; 3],
}

impl Frame {
    pub fn time(&self) -> f64 {
        self.camera.time
    }
}

/// A surface sample used to seed the initial cloud.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitPoint {
    pub position: [f64; 3],
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub name: String,
    pub width: usize,
    pub height: usize,
    /// Color rays see when they miss every surface.
    pub background: [f64; 3],
    pub classes: Vec<ClassInfo>,
    /// One row per class; row 0 is the all-zero void embedding.
    pub codebook: Vec<Vec<f64>>,
    pub frames: Vec<Frame>,
    pub init_points: Vec<InitPoint>,
}

#[derive(Serialize, Deserialize)]
struct FrameMeta {
    index: usize,
    view: usize,
    split: Split,
    camera: Camera,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    name: String,
    width: usize,
    height: usize,
    background: [f64; 3],
    classes: Vec<ClassInfo>,
    frames: Vec<FrameMeta>,
    init_points: Vec<InitPoint>,
}

#[derive(Serialize, Deserialize)]
struct CodebookMeta {
    rows: usize,
    dim: usize,
    dtype: String,
    classes: Vec<String>,
}

fn frame_name(i: usize) -> String {
    format!("{i:04}.png")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl SceneDataset {
    pub fn feature_dim(&self) -> usize {
        self.codebook.first().map_or(0, Vec::len)
    }

    pub fn class_id(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn canonical_rows(&self) -> Vec<&[f64]> {
        self.classes
            .iter()
            .zip(&self.codebook)
            .filter(|(c, _)| c.canonical)
            .map(|(_, row)| row.as_slice())
            .collect()
    }

    /// Rows that can appear in class maps (everything except canonical rows).
    pub fn scene_rows(&self) -> Vec<Vec<f64>> {
        self.classes
            .iter()
            .zip(&self.codebook)
            .filter(|(c, _)| !c.canonical)
            .map(|(_, row)| row.clone())
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<&Frame> {
        self.frames.iter().filter(|f| f.split == split).collect()
    }

    pub fn frame_indices(&self, split: Split) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| self.frames[i].split == split).collect()
    }

    /// High-dimensional feature target at pixel `p` of a frame for one scale.
    pub fn feature_at(&self, frame: &Frame, scale: usize, p: usize) -> &[f64] {
        &self.codebook[frame.classes[scale][p] as usize]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["frames", "masks", "classes/s", "classes/m", "classes/l"] {
            mkdir(&dir.join(sub))?;
        }
        for f in &self.frames {
            let name = frame_name(f.index);
            f.image.save_png(&dir.join("frames").join(&name))?;
            f.mask.save_png(&dir.join("masks").join(&name))?;
            for (s, scale) in SCALES.iter().enumerate() {
                save_png16(&dir.join("classes").join(scale).join(&name), self.width, self.height, &f.classes[s])?;
            }
        }
        let dim = self.feature_dim();
        let mut bytes = Vec::with_capacity(self.codebook.len() * dim * 4);
        for row in &self.codebook {
            for &v in row {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        write_file(&dir.join("codebook.bin"), &bytes)?;
        let meta = CodebookMeta {
            rows: self.codebook.len(),
            dim,
            dtype: "f32le".into(),
            classes: self.classes.iter().map(|c| c.name.clone()).collect(),
        };
        write_file(&dir.join("codebook.json"), serde_json::to_string_pretty(&meta).expect("codebook meta").as_bytes())?;
        let manifest = Manifest {
            name: self.name.clone(),
            width: self.width,
            height: self.height,
            background: self.background,
            classes: self.classes.clone(),
            frames: self
                .frames
                .iter()
                .map(|f| FrameMeta {
                    index: f.index,
                    view: f.view,
                    split: f.split,
                    camera: f.camera.clone(),
                })
                .collect(),
            init_points: self.init_points.clone(),
        };
        write_file(&dir.join("manifest.json"), serde_json::to_string(&manifest).expect("manifest").as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        if !mpath.exists() {
            return Err(Error::format(&mpath, "scene manifest not found"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&read_file(&mpath)?).map_err(|e| Error::format(&mpath, e.to_string()))?;
        let cpath = dir.join("codebook.json");
        let meta: CodebookMeta =
            serde_json::from_slice(&read_file(&cpath)?).map_err(|e| Error::format(&cpath, e.to_string()))?;
        let bpath = dir.join("codebook.bin");
        let bytes = read_file(&bpath)?;
        if bytes.len() != meta.rows * meta.dim * 4 || meta.rows != manifest.classes.len() {
            return Err(Error::format(&bpath, "codebook size disagrees with its sidecar"));
        }
        let codebook = bytes
            .chunks_exact(4 * meta.dim.max(1))
            .map(|row| {
                row.chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect()
            })
            .collect();
        let mut frames = Vec::with_capacity(manifest.frames.len());
        for m in manifest.frames {
            let name = frame_name(m.index);
            let image = Image::load_png_rgb(&dir.join("frames").join(&name))?;
            let mask = Mask::load_png(&dir.join("masks").join(&name))?;
            let mut classes: [Vec<u16>; 3] = Default::default();
            for (s, scale) in SCALES.iter().enumerate() {
                let path: PathBuf = dir.join("classes").join(scale).join(&name);
                let (w, h, data) = load_png16(&path)?;
                if w != manifest.width || h != manifest.height {
                    return Err(Error::format(&path, "class map size disagrees with manifest"));
                }
                if data.iter().any(|&c| c as usize >= manifest.classes.len()) {
                    return Err(Error::format(&path, "class id out of range"));
                }
                classes[s] = data;
            }
            if image.width != manifest.width || image.height != manifest.height {
                return Err(Error::format(&dir.join("frames").join(&name), "frame size disagrees with manifest"));
            }
            frames.push(Frame {
                index: m.index,
                view: m.view,
                split: m.split,
                camera: m.camera,
                image,
                mask,
                classes,
            });
        }
        Ok(Self {
            name: manifest.name,
            width: manifest.width,
            height: manifest.height,
            background: manifest.background,
            classes: manifest.classes,
            codebook,
            frames,
            init_points: manifest.init_points,
        })
    }
}
