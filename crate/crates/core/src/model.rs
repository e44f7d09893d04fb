//! Full segmentation network: encoder, pyramid neck, gated-skip decoder, sigmoid head.

use crate::autograd::Var;
use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::cost::CostReport;
use crate::error::{Error, Result};
use crate::gate::Lwam;
use crate::layers::{Builder, Conv2d, CostCx, Ctx, Dsc};
use crate::params::ParamStore;
use crate::pyramid::Neck;
use crate::tensor::{Scalar, Tensor};

/// Upsample x2, concatenate the (gated) skip if any, then two DSC units.
#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub path: String,
    pub skip_channels: Option<usize>,
    pub gate: Option<Lwam>,
    pub dsc: [Dsc; 2],
}

impl DecoderLevel {
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var, skip: Option<Var>) -> Result<Var> {
        let mut y = cx.graph.upsample2x(x).map_err(|e| e.at(&self.path))?;
        if let Some(s) = skip {
            let s = match &self.gate {
                Some(g) => g.forward(cx, s)?,
                None => s,
            };
            y = cx.graph.concat(&[y, s], 1).map_err(|e| e.at(&self.path))?;
        }
        let y = self.dsc[0].forward(cx, y)?;
        self.dsc[1].forward(cx, y)
    }

    pub fn cost(&self, cc: &mut CostCx, x: &[usize], skip: Option<&[usize]>) -> Result<Vec<usize>> {
        let mut s = vec![x[0], x[1], 2 * x[2], 2 * x[3]];
        if let Some(k) = skip {
            if let Some(g) = &self.gate {
                g.cost(cc, k)?;
            }
            s[1] += k[1];
        }
        let s = self.dsc[0].cost(cc, &s)?;
        self.dsc[1].cost(cc, &s)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub neck: Neck,
    pub decoder: Vec<DecoderLevel>,
    pub head: Conv2d,
}

impl Model {
    /// Builds the layer graph and an f64 store initialized from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<(Model, ParamStore<f64>)> {
        config.validate()?;
        let mut b = Builder::new(config.seed);
        let backbone = Backbone::new(&mut b, config)?;
        let deep = *config.stage_channels.last().expect("validated non-empty");
        let neck = Neck::new(&mut b, deep, &config.fpm)?;
        let s = config.stages();
        // skip widths at strides 2, 4, ...: the stem and every stage but the last
        let skip_widths: Vec<usize> =
            std::iter::once(config.stem_channels).chain(config.stage_channels[..s - 1].iter().copied()).collect();
        let mut decoder = Vec::new();
        let mut c = neck.out_channels();
        for (j, &out) in config.decoder_channels.iter().enumerate() {
            let path = format!("decoder.level{}", j + 1);
            let skip = (j < s).then(|| skip_widths[s - 1 - j]);
            let gate = match skip {
                Some(k) if config.lwam.enabled => Some(Lwam::new(&mut b, &format!("{path}.gate"), k, &config.lwam)?),
                _ => None,
            };
            let inp = c + skip.unwrap_or(0);
            let dsc = [
                Dsc::new(&mut b, &format!("{path}.dsc1"), inp, out, 1)?,
                Dsc::new(&mut b, &format!("{path}.dsc2"), out, out, 1)?,
            ];
            decoder.push(DecoderLevel { path, skip_channels: skip, gate, dsc });
            c = out;
        }
        let head = Conv2d::pointwise(&mut b, "head", c, 1, true)?;
        Ok((Model { config: config.clone(), backbone, neck, decoder, head }, b.store))
    }

    /// Builds and casts the store to `T`.
    pub fn new<T: Scalar>(config: &ModelConfig) -> Result<(Model, ParamStore<T>)> {
        let (m, s) = Self::build(config)?;
        Ok((m, s.cast()))
    }

    /// Cloud probabilities `[N, 1, H, W]`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let enc = self.backbone.forward(cx, x)?;
        let s = self.config.stages();
        let mut y = self.neck.forward(cx, enc.features[s])?;
        for (j, level) in self.decoder.iter().enumerate() {
            let skip = (j < s).then(|| enc.features[s - 1 - j]);
            y = level.forward(cx, y, skip)?;
        }
        let y = self.head.forward(cx, y)?;
        cx.graph.sigmoid(y)
    }

    /// Inference-mode forward on a batch.
    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cx = Ctx::eval(store);
        let v = cx.graph.input(x.clone())?;
        let y = self.forward(&mut cx, v)?;
        Ok(cx.graph.tensor(y))
    }

    /// Binary mask `probability >= threshold`.
    pub fn predict_mask<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>, threshold: f64) -> Result<Tensor<T>> {
        let p = self.infer(store, x)?;
        binarize(&p, threshold)
    }

    pub fn cost<T: Scalar>(&self, store: &ParamStore<T>, input_shape: &[usize]) -> Result<CostReport> {
        let mut cc = CostCx::new(store);
        let feats = self.backbone.cost(&mut cc, input_shape)?;
        let s = self.config.stages();
        let mut y = self.neck.cost(&mut cc, &feats[s])?;
        for (j, level) in self.decoder.iter().enumerate() {
            let skip = (j < s).then(|| feats[s - 1 - j].as_slice());
            y = level.cost(&mut cc, &y, skip)?;
        }
        self.head.cost(&mut cc, &y)?;
        Ok(CostReport::from_rows(input_shape, cc.rows))
    }
}

/// `1` where `p >= threshold`, else `0`.
pub fn binarize<T: Scalar>(p: &Tensor<T>, threshold: f64) -> Result<Tensor<T>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter(format!("threshold {threshold} outside (0, 1)")));
    }
    let t = T::of(threshold);
    Ok(p.map(|v| if v >= t { T::one() } else { T::zero() }))
}
