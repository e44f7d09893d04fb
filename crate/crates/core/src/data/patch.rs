//! Non-overlapping tiling of a reflect-padded scene, and its inverse.

use super::Scene;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub scene_id: String,
    pub row: usize,
    pub col: usize,
    /// `[B, P, P]`
    pub bands: Tensor<f32>,
    /// `[P, P]`
    pub mask: Option<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patch_size: usize,
    pub height: usize,
    pub width: usize,
    pub rows: usize,
    pub cols: usize,
    pub patches: Vec<Patch>,
}

/// Source index for padded position `i` of an axis of length `n`, mirroring
/// about the edge samples without repeating them.
pub fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

fn tile(plane: &[f32], h: usize, w: usize, r0: usize, c0: usize, p: usize, out: &mut Vec<f32>) {
    for i in 0..p {
        let row = reflect(r0 + i, h) * w;
        out.extend((0..p).map(|j| plane[row + reflect(c0 + j, w)]));
    }
}

pub fn crop(scene: &Scene, patch_size: usize) -> Result<PatchSet> {
    if patch_size == 0 || !patch_size.is_multiple_of(16) {
        return Err(Error::InvalidParameter(format!("patch size {patch_size} is not a positive multiple of 16")));
    }
    let (b, h, w, p) = (scene.num_bands(), scene.height(), scene.width(), patch_size);
    if h == 0 || w == 0 {
        return Err(Error::Data(format!("{}: empty scene", scene.id)));
    }
    let (rows, cols) = (h.div_ceil(p), w.div_ceil(p));
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut data = Vec::with_capacity(b * p * p);
            for k in 0..b {
                tile(&scene.bands.data()[k * h * w..(k + 1) * h * w], h, w, r * p, c * p, p, &mut data);
            }
            let mask = match &scene.mask {
                Some(m) => {
                    let mut v = Vec::with_capacity(p * p);
                    tile(m.data(), h, w, r * p, c * p, p, &mut v);
                    Some(Tensor::from_vec(&[p, p], v)?)
                }
                None => None,
            };
            patches.push(Patch { scene_id: scene.id.clone(), row: r, col: c, bands: Tensor::from_vec(&[b, p, p], data)?, mask });
        }
    }
    Ok(PatchSet { patch_size: p, height: h, width: w, rows, cols, patches })
}

/// Places one `[P, P]` map per patch (in `set` order) and trims the padding.
pub fn stitch(set: &PatchSet, maps: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    if maps.len() != set.patches.len() {
        return Err(Error::Data(format!("{} predictions for {} patches", maps.len(), set.patches.len())));
    }
    let (p, h, w) = (set.patch_size, set.height, set.width);
    let mut out = vec![0.0f32; h * w];
    for (patch, m) in set.patches.iter().zip(maps) {
        if m.numel() != p * p {
            return Err(Error::shape("stitch", format!("prediction {:?} for patch size {p}", m.shape())));
        }
        for i in 0..p {
            let y = patch.row * p + i;
            if y >= h {
                break;
            }
            for j in 0..p {
                let x = patch.col * p + j;
                if x >= w {
                    break;
                }
                out[y * w + x] = m.data()[i * p + j];
            }
        }
    }
    Tensor::from_vec(&[h, w], out)
}
