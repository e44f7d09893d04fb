//! Seeded synthetic cloud scenes.
//!
//! A scene is a smooth per-band background, a high-frequency land texture
//! shared across bands with per-band gains, and a cloud layer. The cloud mask
//! is the `round(density * H * W)` highest pixels of a smooth cloud field
//! (ties broken by pixel index), so masks are nested as density grows. Cloud
//! opacity ramps up from the mask boundary, giving soft edges.
//!
//! All randomness comes from SplitMix64 (state += 0x9e3779b97f4a7c15, then
//! the 0xbf58476d1ce4e5b9 / 0x94d049bb133111eb finalizer).

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::Scene;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    pub size: usize,
    pub bands: usize,
    /// Fraction of cloud pixels, in [0, 1].
    pub density: f64,
    /// Strength of the land texture, in [0, 1].
    pub texture: f64,
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise in [0, 1] over a lattice with `cells` cells per side.
fn value_noise(rng: &mut SplitMix64, size: usize, cells: usize) -> Vec<f64> {
    let g = cells + 1;
    let lattice: Vec<f64> = (0..g * g).map(|_| rng.random::<f64>()).collect();
    let scale = cells as f64 / size as f64;
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        let fy = (i as f64 + 0.5) * scale;
        let (y0, ty) = ((fy.floor() as usize).min(cells - 1), smoothstep(fy - fy.floor()));
        for j in 0..size {
            let fx = (j as f64 + 0.5) * scale;
            let (x0, tx) = ((fx.floor() as usize).min(cells - 1), smoothstep(fx - fx.floor()));
            let at = |y: usize, x: usize| lattice[y * g + x];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn octaves(rng: &mut SplitMix64, size: usize, cells: &[usize]) -> Vec<f64> {
    let mut acc = vec![0.0; size * size];
    let mut total = 0.0;
    for (k, &c) in cells.iter().enumerate() {
        let w = 0.5f64.powi(k as i32);
        total += w;
        for (a, v) in acc.iter_mut().zip(value_noise(rng, size, c.max(1))) {
            *a += w * v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= total);
    acc
}

pub fn synth_scene(seed: u64, id: &str, p: &SynthParams) -> Result<Scene> {
    if !(0.0..=1.0).contains(&p.density) {
        return Err(Error::InvalidParameter(format!("cloud density {} outside [0, 1]", p.density)));
    }
    if !(0.0..=1.0).contains(&p.texture) {
        return Err(Error::InvalidParameter(format!("texture level {} outside [0, 1]", p.texture)));
    }
    if p.size == 0 || p.bands == 0 {
        return Err(Error::InvalidParameter("scene size and band count must be positive".into()));
    }
    let (s, n) = (p.size, p.size * p.size);
    let mut rng = SplitMix64::seed_from_u64(seed);
    let coarse = (s / 16).max(2);

    let cloud = octaves(&mut rng, s, &[coarse / 2 + 1, coarse, 2 * coarse]);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cloud[b].total_cmp(&cloud[a]).then(a.cmp(&b)));
    let k = (p.density * n as f64).round() as usize;
    let mut mask = vec![0.0f32; n];
    for &i in &order[..k] {
        mask[i] = 1.0;
    }
    let level = if k > 0 { cloud[order[k - 1]] } else { f64::INFINITY };
    let alpha: Vec<f64> =
        (0..n).map(|i| if mask[i] > 0.0 { 0.45 + 0.55 * smoothstep((cloud[i] - level) / 0.08) } else { 0.0 }).collect();

    let texture = octaves(&mut rng, s, &[(s / 4).max(2), (s / 2).max(2)]);
    let puff = octaves(&mut rng, s, &[(s / 8).max(2)]);
    let mut bands = Vec::with_capacity(p.bands * n);
    for _ in 0..p.bands {
        let base = 0.08 + 0.25 * rng.random::<f64>();
        let gain = p.texture * (0.15 + 0.25 * rng.random::<f64>());
        let bright = 0.72 + 0.12 * rng.random::<f64>();
        let bg = octaves(&mut rng, s, &[coarse]);
        for i in 0..n {
            let land = base + 0.2 * (bg[i] - 0.5) + gain * (texture[i] - 0.5) * 2.0;
            let c = bright + 0.15 * (puff[i] - 0.5);
            let v = land * (1.0 - alpha[i]) + c * alpha[i];
            bands.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Scene::new(id, Tensor::from_vec(&[p.bands, s, s], bands)?, Some(Tensor::from_vec(&[s, s], mask)?))
}

/// `count` scenes with densities in [0.1, 0.6] and texture in [0.2, 0.8],
/// each generated from its own seed derived from `seed`.
pub fn synth_dataset(seed: u64, count: usize, size: usize, bands: usize) -> Result<Vec<Scene>> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let params = SynthParams {
                size,
                bands,
                density: 0.1 + 0.5 * rng.random::<f64>(),
                texture: 0.2 + 0.6 * rng.random::<f64>(),
            };
            synth_scene(rng.random(), &format!("scene{i:04}"), &params)
        })
        .collect()
}
