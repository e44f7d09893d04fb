//! Training, evaluation and prediction.
//!
//! Optimizer: SGD with momentum, `v <- mu v + g`, `w <- w - lr v`, under the
//! polynomial schedule `lr0 (1 - step/total)^power`.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{crop, stitch, Scene};
use crate::error::{Error, Result};
use crate::layers::{apply_stat_updates, Ctx};
use crate::metrics::{confusion, ConfusionCounts};
use crate::model::Model;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the schedule length; `None` runs every epoch.
    pub max_steps: Option<usize>,
    pub poly_power: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub patch_size: usize,
    /// L2 coefficient added to gradients.
    pub weight_decay: f64,
    /// Random horizontal and vertical flips.
    pub augment: bool,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            lr0: 0.001,
            momentum: 0.9,
            batch_size: 32,
            epochs: 50,
            max_steps: None,
            poly_power: 0.9,
            seed: 0,
            val_fraction: 0.1,
            patch_size: 384,
            weight_decay: 0.0,
            augment: false,
            threshold: 0.5,
        }
    }

    /// Laptop-scale run on 64x64 synthetic scenes.
    pub fn desk() -> Self {
        TrainConfig { lr0: 0.05, batch_size: 8, epochs: 25, max_steps: Some(500), patch_size: 64, ..Self::paper() }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.max_steps == Some(0) {
            return bad("batch_size, epochs and max_steps must be >= 1");
        }
        if !(self.poly_power > 0.0) {
            return bad("poly_power must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must be in (0, 1)");
        }
        Ok(())
    }
}

/// A section of a run config: a preset name or the full structure.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Section<T> {
    Preset(String),
    Full(T),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Section<ModelConfig>,
    #[serde(default = "desk_section")]
    pub train: Section<TrainConfig>,
}

fn desk_section() -> Section<TrainConfig> {
    Section::Preset("desk".into())
}

impl RunConfig {
    /// Accepts `{"model": ..., "train": ...}`, a bare model config, or a JSON string naming a model preset.
    pub fn parse(json: &str) -> Result<(ModelConfig, TrainConfig)> {
        let v: serde_json::Value = serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))?;
        let run = match &v {
            serde_json::Value::Object(m) if m.contains_key("model") => {
                serde_json::from_value::<RunConfig>(v).map_err(|e| Error::Config(e.to_string()))?
            }
            serde_json::Value::String(s) => RunConfig { model: Section::Preset(s.clone()), train: desk_section() },
            _ => RunConfig {
                model: Section::Full(serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?),
                train: desk_section(),
            },
        };
        let model = match run.model {
            Section::Preset(n) => ModelConfig::preset(&n).ok_or_else(|| Error::Config(format!("unknown model preset {n:?}")))?,
            Section::Full(c) => c,
        };
        let train = match run.train {
            Section::Preset(n) => TrainConfig::preset(&n).ok_or_else(|| Error::Config(format!("unknown train preset {n:?}")))?,
            Section::Full(c) => c,
        };
        model.validate()?;
        train.validate()?;
        Ok((model, train))
    }
}

pub fn lr_schedule(step: usize, total: usize, cfg: &TrainConfig) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::InvalidParameter(format!("schedule step {step} outside [0, {total}]")));
    }
    Ok(cfg.lr0 * (1.0 - step as f64 / total as f64).powf(cfg.poly_power))
}

pub struct Sgd<T: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    /// Applies one update from `(param, gradient)` pairs.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)], lr: f64) {
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, g) in grads {
            let w = store.get_mut(*id).data_mut();
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![T::zero(); w.len()]);
            for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi + gi + wd * *wi;
                *wi = *wi - lr * *vi;
            }
        }
    }
}

/// One training example: bands `[B, P, P]` and mask `[1, P, P]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Tensor<f32>,
    pub y: Tensor<f32>,
}

/// Crops every labelled scene into samples.
pub fn samples(scenes: &[Scene], patch_size: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for s in scenes {
        if s.mask.is_none() {
            return Err(Error::Data(format!("{}: scene has no mask", s.id)));
        }
        for p in crop(s, patch_size)?.patches {
            let m = p.mask.expect("labelled scene");
            out.push(Sample { x: p.bands, y: m.reshape(&[1, patch_size, patch_size])? });
        }
    }
    Ok(out)
}

/// Deterministic shuffled split; the validation part holds `round(fraction * n)` scenes.
pub fn split_scenes(mut scenes: Vec<Scene>, fraction: f64, seed: u64) -> (Vec<Scene>, Vec<Scene>) {
    scenes.shuffle(&mut SplitMix64::seed_from_u64(seed ^ 0x5711_7000));
    let nv = ((fraction * scenes.len() as f64).round() as usize).min(scenes.len().saturating_sub(1));
    let train = scenes.split_off(nv);
    (train, scenes)
}

fn batch<T: Scalar>(items: &[&Sample], flips: &[(bool, bool)]) -> Result<(Tensor<T>, Tensor<T>)> {
    let flip = |t: &Tensor<f32>, (fh, fv): (bool, bool)| -> Tensor<T> {
        let s = t.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = t.data();
        let mut out = Vec::with_capacity(d.len());
        for k in 0..c {
            for i in 0..h {
                let si = if fv { h - 1 - i } else { i };
                for j in 0..w {
                    let sj = if fh { w - 1 - j } else { j };
                    out.push(T::of(d[(k * h + si) * w + sj] as f64));
                }
            }
        }
        Tensor::from_vec(s, out).expect("same shape")
    };
    let xs: Vec<_> = items.iter().zip(flips).map(|(s, &f)| flip(&s.x, f)).collect();
    let ys: Vec<_> = items.iter().zip(flips).map(|(s, &f)| flip(&s.y, f)).collect();
    Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Option<ConfusionCounts>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainReport {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,epoch,lr,loss\n");
        for r in &self.steps {
            s.push_str(&format!("{},{},{:e},{:e}\n", r.step, r.epoch, r.lr, r.loss));
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_miou,val_f1,val_oa\n");
        let na = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        for e in &self.epochs {
            let m = e.val.map(|c| c.metrics());
            s.push_str(&format!(
                "{},{:e},{},{},{}\n",
                e.epoch,
                e.train_loss,
                na(m.and_then(|m| m.miou)),
                na(m.and_then(|m| m.f1)),
                na(m.and_then(|m| m.oa))
            ));
        }
        s
    }
}

/// Total optimizer steps for `n` training samples.
pub fn total_steps(n: usize, cfg: &TrainConfig) -> usize {
    let full = cfg.epochs * n.div_ceil(cfg.batch_size);
    cfg.max_steps.map_or(full, |m| m.min(full))
}

/// Trains `store` in place. `log` receives each step record as it is produced.
pub fn train<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut log: impl FnMut(&StepLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let s = train_set[0].x.shape();
    model.config.check_input(s[0], s[1], s[2])?;
    let total = total_steps(train_set.len(), cfg);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut rng = SplitMix64::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        epoch += 1;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if step == total {
                break;
            }
            let items: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let flips: Vec<(bool, bool)> =
                items.iter().map(|_| if cfg.augment { (rng.random(), rng.random()) } else { (false, false) }).collect();
            let (x, y) = batch::<T>(&items, &flips)?;
            let lr = lr_schedule(step, total, cfg)?;
            let (loss, grads, stats) = {
                let mut cx = Ctx::train(store, model.config.bn_momentum);
                let xv = cx.graph.input(x)?;
                let out = model.forward(&mut cx, xv).and_then(|p| cx.graph.dice_bce(p, &y));
                let l = match out {
                    Ok(l) => l,
                    Err(e) if e.kind() == "non_finite" => return Err(Error::NonFiniteLoss { step }),
                    Err(e) => return Err(e),
                };
                let loss = cx.graph.value(l)[0].f64();
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step });
                }
                cx.graph.backward(l)?;
                let grads: Vec<(ParamId, Vec<T>)> = cx.graph.param_grads().into_iter().map(|(id, g)| (id, g.to_vec())).collect();
                (loss, grads, std::mem::take(&mut cx.stat_updates))
            };
            opt.step(store, &grads, lr);
            apply_stat_updates(store, stats);
            let rec = StepLog { step, epoch, lr, loss };
            log(&rec);
            report.steps.push(rec);
            sum += loss;
            count += 1;
            step += 1;
        }
        let val = if val_set.is_empty() { None } else { Some(evaluate(model, store, val_set, cfg.threshold, cfg.batch_size)?) };
        report.epochs.push(EpochLog { epoch, train_loss: sum / count.max(1) as f64, val });
    }
    Ok(report)
}

/// Confusion counts over `set`, merged across batches evaluated in parallel.
pub fn evaluate<T: Scalar>(model: &Model, store: &ParamStore<T>, set: &[Sample], threshold: f64, batch_size: usize) -> Result<ConfusionCounts> {
    let batches: Vec<&[Sample]> = set.chunks(batch_size.max(1)).collect();
    batches
        .par_iter()
        .map(|b| {
            let items: Vec<&Sample> = b.iter().collect();
            let (x, y) = batch::<T>(&items, &vec![(false, false); items.len()])?;
            let m = model.predict_mask(store, &x, threshold)?;
            confusion(m.data(), y.data())
        })
        .try_reduce(ConfusionCounts::default, |a, b| Ok(a + b))
}

/// Scene-level prediction: crop, infer per patch, stitch.
pub struct Prediction {
    pub mask: Tensor<f32>,
    /// Counts against the scene mask, when it has one.
    pub counts: Option<ConfusionCounts>,
}

pub fn predict<T: Scalar>(model: &Model, store: &ParamStore<T>, scene: &Scene, patch_size: usize, threshold: f64) -> Result<Prediction> {
    let set = crop(scene, patch_size)?;
    model.config.check_input(scene.num_bands(), patch_size, patch_size)?;
    let maps = set
        .patches
        .par_iter()
        .map(|p| {
            let x = p.bands.cast::<T>().reshape(&[1, scene.num_bands(), patch_size, patch_size])?;
            let m = model.predict_mask(store, &x, threshold)?;
            m.cast::<f32>().reshape(&[patch_size, patch_size])
        })
        .collect::<Result<Vec<_>>>()?;
    let mask = stitch(&set, &maps)?;
    let counts = scene.mask.as_ref().map(|t| confusion(mask.data(), t.data())).transpose()?;
    Ok(Prediction { mask, counts })
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &std::path::Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)?;
    }
    std::fs::File::create(path)?.write_all(text.as_bytes())?;
    Ok(())
}
