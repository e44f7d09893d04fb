//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation appends a node holding its output value. Nodes whose
//! inputs all lack gradient tracking are stored as constants, so an
//! inference-mode graph records no backward rules at all.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::conv::{self, ConvGeom, ConvSpec};
use crate::ops::shape::{
    broadcast_binary, broadcast_shape, check_expand, concat, concat_backward, concat_shape, expand,
    inverse_permutation, permute, permuted_shape, reduce_to_shape,
};
use crate::ops::{loss, matmul, norm, reduce, spatial};
use crate::params::{Kind, ParamId, ParamStore};
use crate::tensor::{numel, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu6(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, invstd: Vec<T>, train: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    LpPool { x: Var, p: f64 },
    Mean(Var),
    MaxPool { x: Var, arg: Vec<usize> },
    Upsample2x(Var),
    Expand(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Sum(Var),
    DiceBce { pred: Var, target: Vec<T> },
}

impl<T: Scalar> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Mul(a, b) => vec![*a, *b],
            Scale(x, _) | Relu6(x) | Sigmoid(x) | Softmax(x, _) | Mean(x) | Upsample2x(x) | Expand(x)
            | Reshape(x) | Sum(x) => vec![*x],
            MatMul { a, b, .. } => vec![*a, *b],
            Linear { x, w, b, .. } | Conv { x, w, b, .. } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            BatchNorm { x, gamma, beta, .. } | LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            LpPool { x, .. } | MaxPool { x, .. } | Permute { x, .. } => vec![*x],
            Concat { xs, .. } => xs.clone(),
            DiceBce { pred, .. } => vec![*pred],
        }
    }
}

struct Node<T: Scalar> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
    record: bool,
    backward_done: bool,
    regions: Option<u64>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A recording graph.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), params: HashMap::new(), record: true, backward_done: false, regions: None }
    }

    /// Also fingerprints which side of every kink (relu6 bounds, `|x|` at zero,
    /// pooling argmax, loss clamps) each value falls on. Two evaluations with
    /// equal fingerprints lie on the same smooth piece of the function.
    pub fn with_region_trace(mut self) -> Self {
        self.regions = Some(0xcbf2_9ce4_8422_2325);
        self
    }

    pub fn region_trace(&self) -> Option<u64> {
        self.regions
    }

    fn trace_regions(&mut self, codes: impl Iterator<Item = u64>) {
        if let Some(h) = self.regions.as_mut() {
            for c in codes {
                *h = (*h ^ c).wrapping_mul(0x0100_0000_01b3);
            }
        }
    }

    /// A graph that evaluates values only.
    pub fn inference() -> Self {
        Graph { record: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the graph can record a fresh pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.params.clear();
        self.backward_done = false;
        if self.regions.is_some() {
            self.regions = Some(0xcbf2_9ce4_8422_2325);
        }
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_vec(&n.shape, n.value.clone()).expect("node shape matches value")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, name: &'static str, value: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Result<Var> {
        debug_assert_eq!(value.len(), numel(&shape), "{name}");
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let rg = self.record && op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.nodes.push(Node { value, shape, op, requires_grad: rg, param: None });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf; tracked when `requires_grad` and the graph records.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let shape = t.shape().to_vec();
        let v = self.push("input", t.into_data(), shape, Op::Leaf)?;
        self.nodes[v.0].requires_grad = requires_grad && self.record;
        Ok(v)
    }

    /// An untracked input.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn constant(&mut self, shape: &[usize], value: Vec<T>) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(Error::shape("constant", format!("{shape:?} vs {} values", value.len())));
        }
        self.push("constant", value, shape.to_vec(), Op::Leaf)
    }

    /// The leaf for a stored tensor. Each id maps to one leaf per graph, so a
    /// parameter used several times accumulates its gradient in one place.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let e = store.entry(id);
        let v = self.leaf(e.tensor.clone(), e.kind == Kind::Param)?;
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        Ok(v)
    }

    /// Gradients of all parameter leaves after [`Graph::backward`].
    pub fn param_grads(&self) -> Vec<(ParamId, &[T])> {
        let mut out: Vec<(ParamId, &[T])> =
            self.params.iter().filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_shape("add", self.shape(a), self.shape(b))?;
        let v = broadcast_binary(self.value(a), self.shape(a), self.value(b), self.shape(b), &out, |x, y| x + y);
        self.push("add", v, out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_shape("mul", self.shape(a), self.shape(b))?;
        let v = broadcast_binary(self.value(a), self.shape(a), self.value(b), self.shape(b), &out, |x, y| x * y);
        self.push("mul", v, out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let v = self.value(x).iter().map(|&e| e * c).collect();
        self.push("scale", v, self.shape(x).to_vec(), Op::Scale(x, c))
    }

    pub fn relu6(&mut self, x: Var) -> Result<Var> {
        let six = T::of(6.0);
        let v = self.value(x).iter().map(|&e| e.max(T::zero()).min(six)).collect();
        if self.regions.is_some() {
            let codes: Vec<u64> = self.value(x).iter().map(|&e| (e > T::zero()) as u64 + (e >= six) as u64).collect();
            self.trace_regions(codes.into_iter());
        }
        self.push("relu6", v, self.shape(x).to_vec(), Op::Relu6(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).iter().map(|&e| sigmoid(e)).collect();
        self.push("sigmoid", v, self.shape(x).to_vec(), Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        if !self.value(x).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let v = reduce::softmax(self.value(x), &shape, axis);
        self.push("softmax", v, shape, Op::Softmax(x, axis))
    }

    // ----- products -----

    /// `[..., m, k] @ [..., k, n]` with equal leading extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        if sb[r - 2] != k {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {} ({sa:?} @ {sb:?})", sb[r - 2])));
        }
        let batch = numel(&sa[..r - 2]);
        let v = matmul::bmm(self.value(a), self.value(b), batch, m, k, n);
        let mut out = sa.clone();
        out[r - 1] = n;
        self.push("matmul", v, out, Op::MatMul { a, b, batch, m, k, n })
    }

    /// `x: [..., inp]`, `w: [out, inp]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[1]) {
            return Err(Error::shape("linear", format!("input {sx:?} vs weight {sw:?}")));
        }
        let (out, inp) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::shape("linear", format!("bias {:?} vs out {out}", self.shape(b))));
            }
        }
        let rows = numel(&sx[..sx.len() - 1]);
        let v = matmul::linear(self.value(x), self.value(w), b.map(|b| self.value(b)), rows, inp, out);
        let mut shape = sx;
        *shape.last_mut().expect("rank >= 1") = out;
        self.push("linear", v, shape, Op::Linear { x, w, b, rows, inp, out })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), spec)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape("conv2d", format!("bias {:?} vs Cout {}", self.shape(b), geom.cout)));
            }
        }
        let v = conv::forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        self.push("conv2d", v, geom.out_shape().to_vec(), Op::Conv { x, w, b, geom })
    }

    // ----- normalization -----

    /// Batch normalization of `[N, C, H, W]`. With `running = None` the batch
    /// statistics are used and returned as `(mean, biased variance)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("batchnorm", format!("expected [N,C,H,W], got {s:?}")));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batchnorm", format!("affine params must be [{c}]")));
        }
        let (mean, var, stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let (m, v) = norm::batch_stats(self.value(x), n, c, plane);
                (m.clone(), v.clone(), Some((m, v)))
            }
        };
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let y = norm::batch_norm_apply(self.value(x), &mean, &invstd, self.value(gamma), self.value(beta), c, plane);
        let train = stats.is_some();
        let out = self.push("batchnorm", y, s, Op::BatchNorm { x, gamma, beta, mean, invstd, train })?;
        Ok((out, stats))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("layernorm", "rank 0 input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layernorm", format!("affine params must be [{d}]")));
        }
        let (y, mean, rstd) = norm::layer_norm(self.value(x), self.value(gamma), self.value(beta), d, eps);
        self.push("layernorm", y, s, Op::LayerNorm { x, gamma, beta, mean, rstd })
    }

    // ----- reductions and resampling -----

    /// `(mean over axes of |x|^p)^(1/p)`, keeping reduced axes as extent 1.
    pub fn lp_pool(&mut self, x: Var, axes: &[usize], p: f64) -> Result<Var> {
        if !(p >= 1.0) || !p.is_finite() {
            return Err(Error::InvalidParameter(format!("lp_pool: p must be a finite value >= 1, got {p}")));
        }
        let s = self.shape(x).to_vec();
        let out = reduce::reduced_shape("lp_pool", &s, axes)?;
        let v = reduce::lp_pool(self.value(x), &s, &out, p);
        if p == 1.0 && self.regions.is_some() {
            let codes: Vec<u64> = self.value(x).iter().map(|&e| (e > T::zero()) as u64 + (e < T::zero()) as u64 * 2).collect();
            self.trace_regions(codes.into_iter());
        }
        self.push("lp_pool", v, out, Op::LpPool { x, p })
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let out = reduce::reduced_shape("mean", &s, axes)?;
        let v = reduce::mean(self.value(x), &s, &out);
        self.push("mean", v, out, Op::Mean(x))
    }

    /// Mean over the spatial axes of `[N, C, H, W]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected rank 4, got {:?}", self.shape(x))));
        }
        self.mean(x, &[2, 3])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().fold(T::zero(), |a, &v| a + v);
        self.push("sum", vec![s], vec![], Op::Sum(x))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("max_pool2d", format!("expected rank 4, got {s:?}")));
        }
        if kernel == 0 || stride == 0 {
            return Err(Error::InvalidParameter("max_pool2d: kernel and stride must be >= 1".into()));
        }
        if s[2] < kernel || s[3] < kernel {
            return Err(Error::DegenerateOutput { op: "max_pool2d", detail: format!("{s:?} smaller than kernel {kernel}") });
        }
        let (v, arg, ho, wo) = spatial::max_pool2d(self.value(x), s[0] * s[1], s[2], s[3], kernel, stride);
        self.trace_regions(arg.iter().map(|&a| a as u64));
        self.push("max_pool2d", v, vec![s[0], s[1], ho, wo], Op::MaxPool { x, arg })
    }

    /// Bilinear x2 upsampling with half-pixel centers.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 {
            return Err(Error::shape("upsample2x", format!("expected non-empty [N,C,H,W], got {s:?}")));
        }
        let v = spatial::upsample2x(self.value(x), s[0] * s[1], s[2], s[3]);
        self.push("upsample2x", v, vec![s[0], s[1], 2 * s[2], 2 * s[3]], Op::Upsample2x(x))
    }

    // ----- structural -----

    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_expand(self.shape(x), shape)?;
        let v = expand(self.value(x), self.shape(x), shape);
        self.push("expand", v, shape.to_vec(), Op::Expand(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::shape("reshape", format!("cannot view {:?} as {shape:?}", self.shape(x))));
        }
        let v = self.value(x).to_vec();
        self.push("reshape", v, shape.to_vec(), Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = permuted_shape(self.shape(x), perm)?;
        let v = permute(self.value(x), self.shape(x), perm);
        self.push("permute", v, out, Op::Permute { x, perm: perm.to_vec() })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let shapes: Vec<&[usize]> = xs.iter().map(|&v| self.shape(v)).collect();
        let out = concat_shape(&shapes, axis)?;
        let parts: Vec<(&[T], &[usize])> = xs.iter().map(|&v| (self.value(v), self.shape(v))).collect();
        let v = concat(&parts, axis);
        self.push("concat", v, out, Op::Concat { xs: xs.to_vec(), axis })
    }

    // ----- loss -----

    /// Dice + mean binary cross-entropy against a `{0, 1}` target of equal shape.
    pub fn dice_bce(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape("dice_bce", format!("pred {:?} vs target {:?}", self.shape(pred), target.shape())));
        }
        if target.data().iter().any(|&y| y != T::zero() && y != T::one()) {
            return Err(Error::Data("dice_bce: target values must be 0 or 1".into()));
        }
        let (d, b) = loss::dice_bce(self.value(pred), target.data());
        if self.regions.is_some() {
            let (lo, hi) = (T::of(loss::EPS), T::of(1.0 - loss::EPS));
            let codes: Vec<u64> = self.value(pred).iter().map(|&e| (e < lo) as u64 + (e > hi) as u64 * 2).collect();
            self.trace_regions(codes.into_iter());
        }
        self.push("dice_bce", vec![d + b], vec![], Op::DiceBce { pred, target: target.data().to_vec() })
    }

    // ----- backward -----

    /// Propagates d`loss`/d(node) to every tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::NonScalarLoss(node.shape.clone()));
        }
        if !node.requires_grad {
            return Err(Error::DetachedGraph);
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            for (input, gi) in self.local_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut self.grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    /// Input gradients of node `i` given its output gradient `g`.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let shp = |v: Var| self.nodes[v.0].shape.as_slice();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let out = node.shape.as_slice();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, reduce_to_shape(g, out, shp(*a))), (*b, reduce_to_shape(g, out, shp(*b)))],
            Op::Mul(a, b) => {
                let mut res = Vec::new();
                if rg(*a) {
                    let gb = broadcast_binary(g, out, val(*b), shp(*b), out, |x, y| x * y);
                    res.push((*a, reduce_to_shape(&gb, out, shp(*a))));
                }
                if rg(*b) {
                    let ga = broadcast_binary(g, out, val(*a), shp(*a), out, |x, y| x * y);
                    res.push((*b, reduce_to_shape(&ga, out, shp(*b))));
                }
                res
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|&v| v * *c).collect())],
            Op::Relu6(x) => {
                let six = T::of(6.0);
                let gx = g.iter().zip(val(*x)).map(|(&gv, &xv)| if xv > T::zero() && xv < six { gv } else { T::zero() });
                vec![(*x, gx.collect())]
            }
            Op::Sigmoid(x) => {
                let gx = g.iter().zip(&node.value).map(|(&gv, &y)| gv * y * (T::one() - y));
                vec![(*x, gx.collect())]
            }
            Op::Softmax(x, axis) => vec![(*x, reduce::softmax_backward(g, &node.value, out, *axis))],
            Op::MatMul { a, b, batch, m, k, n } => {
                let (ga, gb) = matmul::bmm_backward(g, val(*a), val(*b), *batch, *m, *k, *n);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Linear { x, w, b, rows, inp, out: o } => {
                let (gx, gw, gb) = matmul::linear_backward(g, val(*x), val(*w), *rows, *inp, *o);
                let mut res = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    res.push((*b, gb));
                }
                res
            }
            Op::Conv { x, w, b, geom } => {
                let mut res = Vec::new();
                if rg(*x) {
                    res.push((*x, conv::backward_input(g, val(*w), geom)));
                }
                if rg(*w) {
                    res.push((*w, conv::backward_weight(g, val(*x), geom)));
                }
                if let Some(b) = b {
                    res.push((*b, conv::backward_bias(g, geom)));
                }
                res
            }
            Op::BatchNorm { x, gamma, beta, mean, invstd, train } => {
                let s = shp(*x);
                let (gx, gg, gb) =
                    norm::batch_norm_backward(g, val(*x), mean, invstd, val(*gamma), s[0], s[1], s[2] * s[3], *train);
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let d = *out.last().expect("rank >= 1");
                let (gx, gg, gb) = norm::layer_norm_backward(g, val(*x), mean, rstd, val(*gamma), d);
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::LpPool { x, p } => {
                vec![(*x, reduce::lp_pool_backward(g, val(*x), &node.value, shp(*x), out, *p))]
            }
            Op::Mean(x) => vec![(*x, reduce::mean_backward(g, shp(*x), out))],
            Op::MaxPool { x, arg } => {
                let mut gx = vec![T::zero(); val(*x).len()];
                for (&a, &gv) in arg.iter().zip(g) {
                    gx[a] = gx[a] + gv;
                }
                vec![(*x, gx)]
            }
            Op::Upsample2x(x) => {
                let s = shp(*x);
                vec![(*x, spatial::upsample2x_backward(g, s[0] * s[1], s[2], s[3]))]
            }
            Op::Expand(x) => vec![(*x, reduce_to_shape(g, out, shp(*x)))],
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Permute { x, perm } => vec![(*x, permute(g, out, &inverse_permutation(perm)))],
            Op::Concat { xs, axis } => {
                let shapes: Vec<Vec<usize>> = xs.iter().map(|&v| shp(v).to_vec()).collect();
                xs.iter().copied().zip(concat_backward(g, &shapes, *axis)).collect()
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::DiceBce { pred, target } => vec![(*pred, loss::dice_bce_backward(val(*pred), target, g[0]))],
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
