//! Scene manifests: JSON naming per-band rasters and an optional mask, with
//! paths relative to the manifest file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pnm;
use super::raster::Raster;
use super::Scene;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Per-band extremes computed from the raster.
    Minmax,
    /// Per-band `[lo, hi]` from `band_ranges`.
    Given,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub id: String,
    pub band_files: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_file: Option<PathBuf>,
    pub normalization: Normalization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_ranges: Option<Vec<[f64; 2]>>,
}

fn normalize(v: &mut [f32], lo: f64, hi: f64) {
    let span = hi - lo;
    for x in v {
        *x = if span > 0.0 { ((*x as f64 - lo) / span).clamp(0.0, 1.0) as f32 } else { 0.0 };
    }
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Reads and normalizes the scene; relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Scene> {
        if self.band_files.is_empty() {
            return Err(Error::Data(format!("{}: no band files", self.id)));
        }
        let ranges = match (self.normalization, &self.band_ranges) {
            (Normalization::Given, Some(r)) if r.len() == self.band_files.len() => Some(r),
            (Normalization::Given, _) => {
                return Err(Error::Data(format!("{}: \"given\" normalization needs one band range per band", self.id)))
            }
            (Normalization::Minmax, _) => None,
        };
        let mut dims = None;
        let mut data = Vec::new();
        for (k, f) in self.band_files.iter().enumerate() {
            let r = Raster::read(&base.join(f))?;
            match dims {
                None => dims = Some((r.height, r.width)),
                Some(d) if d != (r.height, r.width) => {
                    return Err(Error::Data(format!(
                        "{}: band {} is {}x{}, band 0 is {}x{}",
                        self.id, k, r.height, r.width, d.0, d.1
                    )))
                }
                Some(_) => {}
            }
            let mut v = r.data;
            let (lo, hi) = match ranges {
                Some(r) => (r[k][0], r[k][1]),
                None => v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x as f64), b.max(x as f64))),
            };
            normalize(&mut v, lo, hi);
            data.extend(v);
        }
        let (h, w) = dims.expect("at least one band");
        let bands = Tensor::from_vec(&[self.band_files.len(), h, w], data)?;
        let mask = match &self.mask_file {
            Some(f) => {
                let (mh, mw, m) = pnm::read_pgm(&base.join(f))?;
                if (mh, mw) != (h, w) {
                    return Err(Error::Data(format!("{}: mask is {mh}x{mw}, bands are {h}x{w}", self.id)));
                }
                Some(Tensor::from_vec(&[h, w], m)?)
            }
            None => None,
        };
        Scene::new(self.id.clone(), bands, mask)
    }
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    Manifest::read(path)?.load(path.parent().unwrap_or(Path::new(".")))
}

/// Every `*.json` manifest in `dir`, in file-name order.
pub fn load_dir(dir: &Path) -> Result<Vec<Scene>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("{}: no scene manifests", dir.display())));
    }
    paths.iter().map(|p| load_scene(p)).collect()
}

/// Writes bands, mask and manifest as `<id>_b{k}.ctfr`, `<id>_mask.pgm`, `<id>.json`.
pub fn write_scene(dir: &Path, scene: &Scene) -> Result<PathBuf> {
    let (h, w) = (scene.height(), scene.width());
    let mut band_files = Vec::new();
    for k in 0..scene.num_bands() {
        let name = PathBuf::from(format!("{}_b{k}.ctfr", scene.id));
        Raster::new(h, w, scene.bands.data()[k * h * w..(k + 1) * h * w].to_vec())?.write(&dir.join(&name))?;
        band_files.push(name);
    }
    let mask_file = match &scene.mask {
        Some(m) => {
            let name = PathBuf::from(format!("{}_mask.pgm", scene.id));
            pnm::write_pgm(&dir.join(&name), h, w, m.data())?;
            Some(name)
        }
        None => None,
    };
    let m = Manifest {
        id: scene.id.clone(),
        band_files,
        mask_file,
        normalization: Normalization::Given,
        band_ranges: Some(vec![[0.0, 1.0]; scene.num_bands()]),
    };
    let path = dir.join(format!("{}.json", scene.id));
    std::fs::write(&path, serde_json::to_string_pretty(&m)?)?;
    Ok(path)
}
