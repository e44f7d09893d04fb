//! Scenes, their on-disk form, synthetic generation, and patch tiling.

pub mod manifest;
pub mod patch;
pub mod pnm;
pub mod raster;
pub mod synth;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use manifest::{load_dir, load_scene, write_scene, Manifest, Normalization};
pub use patch::{crop, stitch, Patch, PatchSet};
pub use synth::{synth_dataset, synth_scene, SynthParams};

/// Bands `[B, H, W]` in [0, 1] and an optional binary mask `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub bands: Tensor<f32>,
    pub mask: Option<Tensor<f32>>,
}

impl Scene {
    pub fn new(id: impl Into<String>, bands: Tensor<f32>, mask: Option<Tensor<f32>>) -> Result<Self> {
        let s = bands.shape();
        if s.len() != 3 {
            return Err(Error::Data(format!("bands must be [B, H, W], got {s:?}")));
        }
        if let Some(m) = &mask {
            if m.shape() != &s[1..] {
                return Err(Error::Data(format!("mask {:?} does not match bands {s:?}", m.shape())));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Data("mask is not binary".into()));
            }
        }
        Ok(Scene { id: id.into(), bands, mask })
    }

    pub fn num_bands(&self) -> usize {
        self.bands.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.bands.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.bands.shape()[2]
    }
}
