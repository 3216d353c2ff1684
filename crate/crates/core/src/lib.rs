//! Semantic dynamic Gaussian splatting on the CPU.
//!
//! A cloud of 3D Gaussians with per-Gaussian semantic latents is fitted to
//! multi-view video of a synthetic scene. Training runs in two stages with
//! generation-aware anchors, and a texture-adaptive foreground weight guides
//! the photometric loss. See the book under `book/` for a walkthrough.

pub mod anchor;
pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod dataset;
pub mod deform;
pub mod densify;
pub mod error;
pub mod geom;
pub mod gradcheck;
pub mod guidance;
pub mod image;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod optim;
pub mod raster;
pub mod real;
pub mod semantics;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/rendering.md")]
    mod rendering {}
    #[doc = include_str!("../../../book/src/deformation.md")]
    mod deformation {}
    #[doc = include_str!("../../../book/src/anchors.md")]
    mod anchors {}
    #[doc = include_str!("../../../book/src/guidance.md")]
    mod guidance {}
    #[doc = include_str!("../../../book/src/semantics.md")]
    mod semantics {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
}
