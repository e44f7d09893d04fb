//! Parameterized building blocks with uniform forward and cost accounting.
//!
//! Layers are plain structs holding [`ParamId`]s; values live in a
//! [`ParamStore`] so one layer definition serves both f32 and f64 stores.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;

use crate::autograd::{Graph, Var};
use crate::cost::CostRow;
use crate::error::{Error, Result};
use crate::ops::conv::{ConvGeom, ConvSpec};
use crate::params::{Kind, ParamId, ParamStore};
use crate::tensor::{numel, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

/// Per-pass state: the tape, read access to weights, and collected side outputs.
pub struct Ctx<'s, T: Scalar> {
    pub graph: Graph<T>,
    pub store: &'s ParamStore<T>,
    /// Batchnorm uses batch statistics when set.
    pub train: bool,
    pub bn_momentum: f64,
    /// New running statistics produced by training-mode batchnorm.
    pub stat_updates: Vec<(ParamId, Vec<T>)>,
    /// Attention weights, recorded when enabled.
    pub probes: Option<Vec<(String, Tensor<T>)>>,
}

impl<'s, T: Scalar> Ctx<'s, T> {
    /// Training pass: records the tape and uses batch statistics.
    pub fn train(store: &'s ParamStore<T>, bn_momentum: f64) -> Self {
        Ctx { graph: Graph::new(), store, train: true, bn_momentum, stat_updates: Vec::new(), probes: None }
    }

    /// Inference pass: nothing recorded, running statistics.
    pub fn eval(store: &'s ParamStore<T>) -> Self {
        Ctx { graph: Graph::inference(), store, train: false, bn_momentum: 0.0, stat_updates: Vec::new(), probes: None }
    }

    /// Recording pass with running statistics.
    pub fn eval_recording(store: &'s ParamStore<T>) -> Self {
        Ctx { graph: Graph::new(), ..Self::eval(store) }
    }

    pub fn with_probes(mut self) -> Self {
        self.probes = Some(Vec::new());
        self
    }

    pub fn p(&mut self, id: ParamId) -> Result<Var> {
        self.graph.param(self.store, id)
    }

    fn probe(&mut self, path: &str, v: Var) {
        if let Some(probes) = &mut self.probes {
            probes.push((path.to_string(), self.graph.tensor(v)));
        }
    }
}

/// Writes collected running statistics back into the store.
pub fn apply_stat_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<(ParamId, Vec<T>)>) {
    for (id, v) in updates {
        store.get_mut(id).data_mut().copy_from_slice(&v);
    }
}

/// Registers parameters with deterministic initialization.
pub struct Builder {
    pub store: ParamStore<f64>,
    rng: SplitMix64,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Builder { store: ParamStore::new(), rng: SplitMix64::seed_from_u64(seed) }
    }

    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidParameter(format!("{name}: {e}")))?;
        let data: Vec<f64> = (0..numel(shape)).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.add(name, Kind::Param, Tensor::from_vec(shape, data)?)
    }

    /// Kaiming fan-in normal for a conv weight `[cout, cin/g, k, k]`.
    pub fn conv_weight(&mut self, name: &str, shape: [usize; 4]) -> Result<ParamId> {
        let fan_in = (shape[1] * shape[2] * shape[3]).max(1);
        self.normal(name, &shape, (2.0 / fan_in as f64).sqrt())
    }

    /// Small normal (sigma 0.02) for linear weights and tokens.
    pub fn small_normal(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.normal(name, shape, 0.02)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], kind: Kind, v: f64) -> Result<ParamId> {
        self.store.add(name, kind, Tensor::full(shape, v))
    }
}

/// Shape propagation and tallying for the profiler.
pub struct CostCx {
    pub rows: Vec<CostRow>,
    seen: HashSet<ParamId>,
    numels: Vec<(usize, Kind)>,
}

impl CostCx {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        let numels = store.entries().iter().map(|e| (e.tensor.numel(), e.kind)).collect();
        CostCx { rows: Vec::new(), seen: HashSet::new(), numels }
    }

    /// Adds a row; each trainable parameter is counted the first time it appears.
    pub fn record(&mut self, path: &str, params: &[ParamId], macs: u64) {
        let mut count = 0u64;
        for &id in params {
            let (n, kind) = self.numels[id.0];
            if kind == Kind::Param && self.seen.insert(id) {
                count += n as u64;
            }
        }
        self.rows.push(CostRow { layer: path.to_string(), params: count, macs });
    }
}

fn wrap<R>(path: &str, r: Result<R>) -> Result<R> {
    r.map_err(|e| e.at(path))
}

// ----- primitives -----

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub path: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        path: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 || groups == 0 || !in_ch.is_multiple_of(groups) || !out_ch.is_multiple_of(groups) {
            return Err(Error::Config(format!("{path}: conv {in_ch}->{out_ch} with groups {groups}")));
        }
        let weight = b.conv_weight(&format!("{path}.weight"), [out_ch, in_ch / groups, kernel, kernel])?;
        let bias = if bias { Some(b.constant(&format!("{path}.bias"), &[out_ch], Kind::Param, 0.0)?) } else { None };
        let spec = ConvSpec::same(kernel, stride, dilation, groups);
        Ok(Conv2d { path: path.to_string(), weight, bias, spec, in_ch, out_ch, kernel })
    }

    pub fn pointwise(b: &mut Builder, path: &str, in_ch: usize, out_ch: usize, bias: bool) -> Result<Self> {
        Self::new(b, path, in_ch, out_ch, 1, 1, 1, 1, bias)
    }

    fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch / self.spec.groups, self.kernel, self.kernel]
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = cx.p(self.weight)?;
        let b = self.bias.map(|id| cx.p(id)).transpose()?;
        wrap(&self.path, cx.graph.conv2d(x, w, b, self.spec))
    }

    pub fn cost(&self, cc: &mut CostCx, x: &[usize]) -> Result<Vec<usize>> {
        let g = wrap(&self.path, ConvGeom::new(x, &self.weight_shape(), self.spec))?;
        let ids: Vec<ParamId> = std::iter::once(self.weight).chain(self.bias).collect();
        cc.record(&self.path, &ids, g.macs());
        Ok(g.out_shape().to_vec())
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub path: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder, path: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            path: path.to_string(),
            gamma: b.constant(&format!("{path}.gamma"), &[channels], Kind::Param, 1.0)?,
            beta: b.constant(&format!("{path}.beta"), &[channels], Kind::Param, 0.0)?,
            running_mean: b.constant(&format!("{path}.running_mean"), &[channels], Kind::Buffer, 0.0)?,
            running_var: b.constant(&format!("{path}.running_var"), &[channels], Kind::Buffer, 1.0)?,
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let gamma = cx.p(self.gamma)?;
        let beta = cx.p(self.beta)?;
        if cx.train {
            let (y, stats) = wrap(&self.path, cx.graph.batch_norm(x, gamma, beta, None, BN_EPS))?;
            let (mean, var) = stats.expect("training mode returns stats");
            let s = cx.graph.shape(x);
            let count = (s[0] * s[2] * s[3]) as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = T::of(cx.bn_momentum);
            let keep = T::one() - m;
            let rm = cx.store.get(self.running_mean).data();
            let rv = cx.store.get(self.running_var).data();
            let new_mean = rm.iter().zip(&mean).map(|(&r, &b)| keep * r + m * b).collect();
            let new_var = rv.iter().zip(&var).map(|(&r, &b)| keep * r + m * b * T::of(unbias)).collect();
            cx.stat_updates.push((self.running_mean, new_mean));
            cx.stat_updates.push((self.running_var, new_var));
            Ok(y)
        } else {
            let rm = cx.store.get(self.running_mean).data();
            let rv = cx.store.get(self.running_var).data();
            let (y, _) = wrap(&self.path, cx.graph.batch_norm(x, gamma, beta, Some((rm, rv)), BN_EPS))?;
            Ok(y)
        }
    }

    pub fn cost(&self, cc: &mut CostCx, x: &[usize]) -> Result<Vec<usize>> {
        if x.len() != 4 || x[1] != self.channels {
            return Err(Error::shape("batchnorm", format!("expected {} channels, got {x:?}", self.channels)).at(&self.path));
        }
        cc.record(&self.path, &[self.gamma, self.beta, self.running_mean, self.running_var], 0);
        Ok(x.to_vec())
    }
}

/// Conv (no bias) followed by batchnorm and optionally relu6.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        path: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
        act: bool,
    ) -> Result<Self> {
        let conv = Conv2d::new(b, &format!("{path}.conv"), in_ch, out_ch, kernel, stride, dilation, groups, false)?;
        let bn = BatchNorm2d::new(b, &format!("{path}.bn"), out_ch)?;
        Ok(ConvBn { conv, bn, act })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        if self.act {
            cx.graph.relu6(y)
        } else {
            Ok(y)
        }
    }

    pub fn cost(&self, cc: &mut CostCx, x: &[usize]) -> Result<Vec<usize>> {
        let s = self.conv.cost(cc, x)?;
        self.bn.cost(cc, &s)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub path: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, path: &str, inp: usize, out: usize, bias: bool) -> Result<Self> {
        if inp == 0 || out == 0 {
            return Err(Error::Config(format!("{path}: linear {inp}->{out}")));
        }
        let weight = b.small_normal(&format!("{path}.weight"), &[out, inp])?;
        let bias = if bias { Some(b.constant(&format!("{path}.bias"), &[out], Kind::Param, 0.0)?) } else { None };
        Ok(Linear { path: path.to_string(), weight, bias, inp, out })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = cx.p(self.weight)?;
        let b = self.bias.map(|id| cx.p(id)).transpose()?;
        wrap(&self.path, cx.graph.linear(x, w, b))
    }

    pub fn cost(&self, cc: &mut CostCx, x: &[usize]) -> Result<Vec<usize>> {
        if x.last() != Some(&self.inp) {
            return Err(Error::shape("linear", format!("expected last dim {}, got {x:?}", self.inp)).at(&self.path));
        }
        let rows = numel(&x[..x.len() - 1]) as u64;
        let ids: Vec<ParamId> = std::iter::once(self.weight).chain(self.bias).collect();
        cc.record(&self.path, &ids, rows * (self.inp * self.out) as u64);
        let mut s = x.to_vec();
        *s.last_mut().expect("rank >= 1") = self.out;
        Ok(s)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub path: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, path: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            path: path.to_string(),
            gamma: b.constant(&format!("{path}.gamma"), &[dim], Kind::Param, 1.0)?,
            beta: b.constant(&format!("{path}.beta"), &[dim], Kind::Param, 0.0)?,
            dim,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let g = cx.p(self.gamma)?;
        let b = cx.p(self.beta)?;
        wrap(&self.path, cx.graph.layer_norm(x, g, b, LN_EPS))
    }

    pub fn cost(&self, cc: &mut CostCx, x: &[usize]) -> Result<Vec<usize>> {
        cc.record(&self.path, &[self.gamma, self.beta], 0);
        Ok(x.to_vec())
    }
}

// ----- composites -----

/// Depthwise 3x3 + BN + relu6, then pointwise + BN + relu6.
#[derive(Clone, Debug)]
pub struct Dsc {
    pub dw: ConvBn,
    pub pw: ConvBn,
}

impl Dsc {
    pub fn new(b: &mut Builder, path: &str, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        Ok(Dsc {
            dw: ConvBn::new(b, &format!("{path}.dw"), in_ch, in_ch, 3, stride, 1, in_ch, true)?,
            pw: ConvBn::new(b, &format!("{path}.pw"), in_ch, out_ch, 1, 1, 1, 1, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.dw.forward(cx, x)?;
        self.pw.forward(cx, y)
    }

    pub fn cost(&self, cc: &mut CostCx, x: &[usize]) -> Result<Vec<usize>> {
        let s = self.dw.cost(cc, x)?;
        self.pw.cost(cc, &s)
    }
}

/// Inverted bottleneck: pointwise expand, depthwise 3x3 (strided), pointwise project.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub expand: ConvBn,
    pub dw: ConvBn,
    pub project: ConvBn,
    pub residual: bool,
}

impl Bottleneck {
    pub fn new(b: &mut Builder, path: &str, in_ch: usize, out_ch: usize, stride: usize, expansion: usize) -> Result<Self> {
        let hidden = in_ch * expansion;
        Ok(Bottleneck {
            expand: ConvBn::new(b, &format!("{path}.expand"), in_ch, hidden, 1, 1, 1, 1, true)?,
            dw: ConvBn::new(b, &format!("{path}.dw"), hidden, hidden, 3, stride, 1, hidden, true)?,
            project: ConvBn::new(b, &format!("{path}.project"), hidden, out_ch, 1, 1, 1, 1, false)?,
            residual: stride == 1 && in_ch == out_ch,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.expand.forward(cx, x)?;
        let y = self.dw.forward(cx, y)?;
        let y = self.project.forward(cx, y)?;
        if self.residual {
            cx.graph.add(y, x)
        } else {
            Ok(y)
        }
    }

    pub fn cost(&self, cc: &mut CostCx, x: &[usize]) -> Result<Vec<usize>> {
        let s = self.expand.cost(cc, x)?;
        let s = self.dw.cost(cc, &s)?;
        self.project.cost(cc, &s)
    }
}

/// Scaled dot-product attention over `[B, heads, Lq, dh]` queries,
/// `[B, heads, dh, Lk]` keys and `[B, heads, Lk, dh]` values.
pub fn attend<T: Scalar>(cx: &mut Ctx<T>, path: &str, q: Var, kt: Var, v: Var) -> Result<Var> {
    let dh = *cx.graph.shape(q).last().expect("rank 4");
    let s = cx.graph.matmul(q, kt)?;
    let s = cx.graph.scale(s, 1.0 / (dh as f64).sqrt())?;
    let rank = cx.graph.shape(s).len();
    let a = cx.graph.softmax(s, rank - 1)?;
    cx.probe(path, a);
    cx.graph.matmul(a, v)
}

/// Splits the last axis of `[N, L, heads*dh]` into heads: `[N, heads, L, dh]`.
pub fn split_heads<T: Scalar>(cx: &mut Ctx<T>, x: Var, heads: usize) -> Result<Var> {
    let s = cx.graph.shape(x).to_vec();
    let (n, l, c) = (s[0], s[1], s[2]);
    let r = cx.graph.reshape(x, &[n, l, heads, c / heads])?;
    cx.graph.permute(r, &[0, 2, 1, 3])
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Scalar>(cx: &mut Ctx<T>, x: Var) -> Result<Var> {
    let s = cx.graph.shape(x).to_vec();
    let (n, h, l, dh) = (s[0], s[1], s[2], s[3]);
    let p = cx.graph.permute(x, &[0, 2, 1, 3])?;
    cx.graph.reshape(p, &[n, l, h * dh])
}

/// Multi-head self-attention over `[N, L, d]` with Q, K, V and output projections.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub path: String,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(b: &mut Builder, path: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{path}: dim {dim} not divisible by {heads} heads")));
        }
        Ok(SelfAttention {
            path: path.to_string(),
            q: Linear::new(b, &format!("{path}.q"), dim, dim, true)?,
            k: Linear::new(b, &format!("{path}.k"), dim, dim, true)?,
            v: Linear::new(b, &format!("{path}.v"), dim, dim, true)?,
            o: Linear::new(b, &format!("{path}.o"), dim, dim, true)?,
            heads,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let q = self.q.forward(cx, x)?;
        let k = self.k.forward(cx, x)?;
        let v = self.v.forward(cx, x)?;
        let q = split_heads(cx, q, self.heads)?;
        let k = split_heads(cx, k, self.heads)?;
        let kt = cx.graph.permute(k, &[0, 1, 3, 2])?;
        let v = split_heads(cx, v, self.heads)?;
        let a = attend(cx, &self.path, q, kt, v)?;
        let a = merge_heads(cx, a)?;
        self.o.forward(cx, a)
    }

    pub fn cost(&self, cc: &mut CostCx, x: &[usize]) -> Result<Vec<usize>> {
        self.q.cost(cc, x)?;
        self.k.cost(cc, x)?;
        self.v.cost(cc, x)?;
        let (n, l, d) = (x[0] as u64, x[1] as u64, x[2] as u64);
        cc.record(&format!("{}.scores", self.path), &[], 2 * n * l * l * d);
        self.o.cost(cc, x)
    }
}

/// Two-layer feed-forward network with relu6.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(b: &mut Builder, path: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::new(b, &format!("{path}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(b, &format!("{path}.fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.graph.relu6(h)?;
        self.fc2.forward(cx, h)
    }

    pub fn cost(&self, cc: &mut CostCx, x: &[usize]) -> Result<Vec<usize>> {
        let s = self.fc1.cost(cc, x)?;
        self.fc2.cost(cc, &s)
    }
}
