//! Finite-difference checks of analytic gradients (f64), using the five-point
//! central stencil `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
//!
//! Error per tensor is `max|analytic - numeric| / max(max|analytic|, max|numeric|, FLOOR)`
//! over the checked elements; a check reports the worst tensor.
//!
//! Differences are taken on the smooth piece containing the evaluation point:
//! when a probe at `x +- h` or `x +- 2h` lands on the other side of a kink (see
//! [`Graph::with_region_trace`]), the step is quartered and the probe
//! repeated, up to [`MAX_REFINE`] times. A probe that still straddles a kink
//! is used as is and counts against the check.

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::backbone::MobileFormerBlock;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::gate::Lwam;
use crate::layers::{Builder, Ctx};
use crate::model::Model;
use crate::ops::conv::ConvSpec;
use crate::params::ParamStore;
use crate::pyramid::{Lwfpm, SdBlock};
use crate::tensor::Tensor;

/// Gradient magnitude below which errors are measured absolutely.
pub const FLOOR: f64 = 1e-6;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;
pub const MAX_REFINE: usize = 6;

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub eps: f64,
    /// Elements checked per tensor; `None` checks all.
    pub per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions { eps: 1e-5, per_tensor: None, seed: 7 }
    }
}

impl FdOptions {
    /// Settings for whole blocks: a wider step keeps roundoff in deep
    /// compositions well below the tolerance, and `per_tensor` elements are
    /// sampled from every tensor.
    pub fn composite(per_tensor: Option<usize>) -> Self {
        FdOptions { eps: 1e-3, per_tensor, seed: 7 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Tensor with the largest error.
    pub worst: String,
    pub checked: usize,
    /// Probes whose step was shrunk to stay off a kink.
    pub refined: usize,
    /// Probes that straddled a kink even at the smallest step.
    pub straddled: usize,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn pick(n: usize, k: Option<usize>, rng: &mut SplitMix64) -> Vec<usize> {
    match k {
        Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
        _ => (0..n).collect(),
    }
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(n).map(|v| v.abs()).fold(FLOOR, f64::max);
    diff / scale
}

/// Five-point central difference at step `eps`, shrinking the step while any
/// probe leaves the region of `at(0)`. Returns the estimate and the number
/// of shrinks, or `None` in place of the count if no step stayed on one piece.
fn central(eps: f64, at: impl Fn(f64) -> Result<(f64, Option<u64>)>) -> Result<(f64, Option<usize>)> {
    let (_, here) = at(0.0)?;
    let mut h = eps;
    let mut last = 0.0;
    for k in 0..=MAX_REFINE {
        let mut f = [0.0; 4];
        let mut same = true;
        for (slot, m) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
            let (v, r) = at(m * h)?;
            *slot = v;
            same &= r == here;
        }
        last = (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * h);
        if same {
            return Ok((last, Some(k)));
        }
        h /= 4.0;
    }
    Ok((last, None))
}

struct Tally {
    worst: f64,
    worst_name: String,
    checked: usize,
    refined: usize,
    straddled: usize,
}

impl Tally {
    fn new() -> Self {
        Tally { worst: 0.0, worst_name: String::new(), checked: 0, refined: 0, straddled: 0 }
    }

    fn add(&mut self, name: &str, a: &[f64], n: &[f64]) {
        let e = rel_err(a, n);
        self.checked += a.len();
        if e >= self.worst {
            self.worst = e;
            self.worst_name = name.to_string();
        }
    }

    fn note(&mut self, shrinks: Option<usize>) {
        match shrinks {
            Some(0) => {}
            Some(_) => self.refined += 1,
            None => self.straddled += 1,
        }
    }

    fn finish(self, name: &str, tolerance: f64) -> GradCheck {
        GradCheck {
            name: name.to_string(),
            max_rel_err: self.worst,
            worst: self.worst_name,
            checked: self.checked,
            refined: self.refined,
            straddled: self.straddled,
            tolerance,
        }
    }
}

/// Checks d f / d inputs for a scalar-valued graph function.
pub fn check_inputs(
    name: &str,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    opts: &FdOptions,
    tolerance: f64,
) -> Result<GradCheck> {
    let eval = |xs: &[Tensor<f64>], record: bool| -> Result<(f64, Option<u64>, Vec<Option<Vec<f64>>>)> {
        let mut g = if record { Graph::new() } else { Graph::inference().with_region_trace() };
        let vars = xs.iter().map(|t| g.leaf(t.clone(), true)).collect::<Result<Vec<_>>>()?;
        let y = f(&mut g, &vars)?;
        let v = g.value(y)[0];
        if record {
            g.backward(y)?;
            Ok((v, None, vars.iter().map(|&x| g.grad(x).map(|s| s.to_vec())).collect()))
        } else {
            Ok((v, g.region_trace(), vec![]))
        }
    };
    let (_, _, grads) = eval(inputs, true)?;
    let mut rng = SplitMix64::seed_from_u64(opts.seed);
    let mut tally = Tally::new();
    let xs = std::cell::RefCell::new(inputs.to_vec());
    for (i, grad) in grads.iter().enumerate() {
        let n = xs.borrow()[i].numel();
        let full = grad.clone().unwrap_or_else(|| vec![0.0; n]);
        let idx = pick(n, opts.per_tensor, &mut rng);
        let mut a = Vec::with_capacity(idx.len());
        let mut num = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = xs.borrow()[i].data()[j];
            let (d, shrinks) = central(opts.eps, |h| {
                xs.borrow_mut()[i].data_mut()[j] = orig + h;
                let r = eval(&xs.borrow(), false);
                xs.borrow_mut()[i].data_mut()[j] = orig;
                r.map(|(v, t, _)| (v, t))
            })?;
            tally.note(shrinks);
            a.push(full[j]);
            num.push(d);
        }
        tally.add(&format!("input{i}"), &a, &num);
    }
    Ok(tally.finish(name, tolerance))
}

/// Checks d f / d params for every trainable tensor of `store`.
pub fn check_params(
    name: &str,
    store: &mut ParamStore<f64>,
    train: bool,
    f: impl Fn(&mut Ctx<f64>) -> Result<Var>,
    opts: &FdOptions,
    tolerance: f64,
) -> Result<GradCheck> {
    type Grads = Vec<(crate::params::ParamId, Vec<f64>)>;
    let eval = |store: &ParamStore<f64>, record: bool| -> Result<(f64, Option<u64>, Grads)> {
        let mut cx = Ctx::train(store, 0.1);
        cx.train = train;
        if !record {
            cx.graph = Graph::inference().with_region_trace();
        }
        let y = f(&mut cx)?;
        let v = cx.graph.value(y)[0];
        if record {
            cx.graph.backward(y)?;
            Ok((v, None, cx.graph.param_grads().into_iter().map(|(id, g)| (id, g.to_vec())).collect()))
        } else {
            Ok((v, cx.graph.region_trace(), vec![]))
        }
    };
    let (_, _, grads) = eval(store, true)?;
    let mut rng = SplitMix64::seed_from_u64(opts.seed);
    let mut tally = Tally::new();
    for id in store.trainable() {
        let n = store.get(id).numel();
        let full = grads.iter().find(|(g, _)| *g == id).map(|(_, g)| g.clone()).unwrap_or_else(|| vec![0.0; n]);
        let idx = pick(n, opts.per_tensor, &mut rng);
        let mut a = Vec::with_capacity(idx.len());
        let mut num = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = store.get(id).data()[j];
            let cell = std::cell::RefCell::new(&mut *store);
            let (d, shrinks) = central(opts.eps, |h| {
                cell.borrow_mut().get_mut(id).data_mut()[j] = orig + h;
                let r = eval(&cell.borrow(), false);
                cell.borrow_mut().get_mut(id).data_mut()[j] = orig;
                r.map(|(v, t, _)| (v, t))
            })?;
            tally.note(shrinks);
            a.push(full[j]);
            num.push(d);
        }
        let pname = store.entry(id).name.clone();
        tally.add(&pname, &a, &num);
    }
    Ok(tally.finish(name, tolerance))
}

// ----- the suite -----

fn rand_tensor(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values in `[lo, hi)` at least `gap` away from every point in `avoid`.
fn rand_away(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64, avoid: &[f64], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if avoid.iter().all(|a| (v - a).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// `sum(r * y)` with fixed random weights `r`, so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let r = rand_tensor(&mut rng, &shape, -1.0, 1.0);
    let r = g.constant(&shape, r.into_data())?;
    let p = g.mul(y, r)?;
    g.sum(p)
}

type PrimFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Every primitive op against finite differences.
pub fn primitive_suite(opts: &FdOptions) -> Result<Vec<GradCheck>> {
    let mut rng = SplitMix64::seed_from_u64(opts.seed);
    let mut r = |s: &[usize]| rand_tensor(&mut rng, s, -2.0, 2.0);
    let mut cases: Vec<(&str, Vec<Tensor<f64>>, PrimFn)> = vec![
        ("add_broadcast", vec![r(&[2, 3, 4]), r(&[1, 3, 1])], Box::new(|g, v| g.add(v[0], v[1]))),
        ("mul_broadcast", vec![r(&[2, 3, 4]), r(&[2, 1, 4])], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", vec![r(&[5])], Box::new(|g, v| g.scale(v[0], -1.5))),
        ("sigmoid", vec![r(&[3, 4])], Box::new(|g, v| g.sigmoid(v[0]))),
        ("softmax", vec![r(&[2, 5, 3])], Box::new(|g, v| g.softmax(v[0], 1))),
        ("matmul", vec![r(&[2, 3, 4]), r(&[2, 4, 5])], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("linear", vec![r(&[2, 3, 6]), r(&[4, 6]), r(&[4])], Box::new(|g, v| g.linear(v[0], v[1], Some(v[2])))),
        (
            "conv2d_dilated",
            vec![r(&[1, 2, 6, 6]), r(&[3, 2, 3, 3]), r(&[3])],
            Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(1, 2, 2, 1))),
        ),
        (
            "conv2d_depthwise_strided",
            vec![r(&[2, 4, 7, 7]), r(&[4, 1, 3, 3])],
            Box::new(|g, v| g.conv2d(v[0], v[1], None, ConvSpec::new(2, 1, 1, 4))),
        ),
        (
            "batchnorm_train",
            vec![r(&[2, 3, 3, 3]), r(&[3]), r(&[3])],
            Box::new(|g, v| Ok(g.batch_norm(v[0], v[1], v[2], None, 1e-5)?.0)),
        ),
        (
            "batchnorm_eval",
            vec![r(&[2, 3, 3, 3]), r(&[3]), r(&[3])],
            Box::new(|g, v| Ok(g.batch_norm(v[0], v[1], v[2], Some((&[0.1, -0.2, 0.3], &[1.0, 0.5, 2.0])), 1e-5)?.0)),
        ),
        ("layernorm", vec![r(&[2, 3, 8]), r(&[8]), r(&[8])], Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))),
        ("mean", vec![r(&[2, 3, 4, 4])], Box::new(|g, v| g.mean(v[0], &[2, 3]))),
        ("upsample2x", vec![r(&[2, 2, 3, 4])], Box::new(|g, v| g.upsample2x(v[0]))),
        ("expand", vec![r(&[2, 1, 3])], Box::new(|g, v| g.expand(v[0], &[2, 4, 3]))),
        ("reshape", vec![r(&[2, 6])], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        ("permute", vec![r(&[2, 3, 4])], Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        ("concat", vec![r(&[2, 1, 3]), r(&[2, 2, 3])], Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        ("sum", vec![r(&[3, 3])], Box::new(|g, v| g.sum(v[0]))),
    ];
    cases.push(("relu6", vec![rand_away(&mut rng, &[4, 5], -3.0, 9.0, &[0.0, 6.0], 1e-3)], Box::new(|g, v| g.relu6(v[0]))));
    for (label, p) in [("lp_pool_p1", 1.0), ("lp_pool_p2", 2.0), ("lp_pool_p3", 3.0)] {
        cases.push((
            label,
            vec![rand_tensor(&mut rng, &[2, 3, 4, 4], 0.1, 2.0)],
            Box::new(move |g, v| g.lp_pool(v[0], &[2, 3], p)),
        ));
    }
    cases.push((
        "lp_pool_channels",
        vec![rand_tensor(&mut rng, &[2, 3, 4, 4], 0.1, 2.0)],
        Box::new(|g, v| g.lp_pool(v[0], &[1], 2.0)),
    ));
    // distinct values keep every window's argmax stable under perturbation
    let mut mp: Vec<f64> = (0..2 * 16).map(|i| (i * 7 % 32) as f64 * 0.1).collect();
    mp.iter_mut().enumerate().for_each(|(i, v)| *v += 0.001 * i as f64);
    cases.push(("max_pool2d", vec![Tensor::from_vec(&[1, 2, 4, 4], mp)?], Box::new(|g, v| g.max_pool2d(v[0], 2, 2))));
    let target = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0])?;
    cases.push((
        "dice_bce",
        vec![rand_tensor(&mut rng, &[1, 1, 3, 3], 0.05, 0.95)],
        Box::new(move |g, v| g.dice_bce(v[0], &target)),
    ));

    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, inputs, f))| {
            let seed = 1000 + i as u64;
            check_inputs(
                name,
                &inputs,
                |g, v| {
                    let y = f(g, v)?;
                    if g.shape(y).is_empty() {
                        Ok(y)
                    } else {
                        weighted_sum(g, y, seed)
                    }
                },
                opts,
                PRIMITIVE_TOL,
            )
        })
        .collect()
}

/// Composite blocks and the full model at the miniature config.
pub fn composite_suite(cfg: &ModelConfig, opts: &FdOptions) -> Result<Vec<GradCheck>> {
    let mut rng = SplitMix64::seed_from_u64(opts.seed ^ 0x5eed);
    let mut out = Vec::new();
    let c0 = cfg.stem_channels;
    let c1 = cfg.stage_channels[0];
    let (m, d) = (cfg.tokens, cfg.token_dim);

    // Mobile-Former block, strided, with tokens as an input.
    {
        let mut b = Builder::new(1);
        let block = MobileFormerBlock::new(&mut b, "mf", c0, c1, 2, d, cfg.heads, cfg.ffn_expansion, cfg.mobile_expansion)?;
        let x = rand_tensor(&mut rng, &[2, c0, 8, 8], -1.0, 1.0);
        let z = rand_tensor(&mut rng, &[2, m, d], -1.0, 1.0);
        let mut store = b.store;
        out.push(check_params(
            "mobile_former_block",
            &mut store,
            true,
            |cx| {
                let xv = cx.graph.input(x.clone())?;
                let zv = cx.graph.input(z.clone())?;
                let (y, zo) = block.forward(cx, xv, zv)?;
                let a = weighted_sum(&mut cx.graph, y, 11)?;
                let bz = weighted_sum(&mut cx.graph, zo, 12)?;
                cx.graph.add(a, bz)
            },
            opts,
            COMPOSITE_TOL,
        )?);
    }

    // SDblock with its shared conv.
    {
        let mut b = Builder::new(2);
        let inner = cfg.fpm.inner_width;
        let sd = SdBlock::new(&mut b, "sd", c1, inner, 2)?;
        let sc = crate::layers::Conv2d::new(&mut b, "sc", inner, inner, 3, 1, 1, 1, false)?;
        let x = rand_tensor(&mut rng, &[2, c1, 5, 5], -1.0, 1.0);
        let mut store = b.store;
        out.push(check_params(
            "sd_block",
            &mut store,
            true,
            |cx| {
                let xv = cx.graph.input(x.clone())?;
                let y = sd.forward(cx, xv, &sc)?;
                weighted_sum(&mut cx.graph, y, 13)
            },
            opts,
            COMPOSITE_TOL,
        )?);
    }

    // Whole pyramid.
    {
        let mut b = Builder::new(3);
        let fpm = Lwfpm::new(&mut b, "fpm", c1, &cfg.fpm)?;
        let x = rand_tensor(&mut rng, &[2, c1, 4, 4], -1.0, 1.0);
        let mut store = b.store;
        out.push(check_params(
            "lwfpm",
            &mut store,
            true,
            |cx| {
                let xv = cx.graph.input(x.clone())?;
                let y = fpm.forward(cx, xv)?;
                weighted_sum(&mut cx.graph, y, 14)
            },
            opts,
            COMPOSITE_TOL,
        )?);
    }

    // Attention gate, also checked with respect to its input (strictly positive).
    {
        let mut b = Builder::new(4);
        let gate = Lwam::new(&mut b, "lwam", c1, &cfg.lwam)?;
        let x = rand_tensor(&mut rng, &[2, c1, 4, 4], 0.1, 2.0);
        let mut store = b.store;
        out.push(check_params(
            "lwam",
            &mut store,
            true,
            |cx| {
                let xv = cx.graph.input(x.clone())?;
                let y = gate.forward(cx, xv)?;
                weighted_sum(&mut cx.graph, y, 15)
            },
            opts,
            COMPOSITE_TOL,
        )?);
        let frozen = store.clone();
        out.push(check_inputs(
            "lwam_input",
            &[x],
            |g, v| {
                let mut cx = Ctx::train(&frozen, 0.1);
                cx.graph = std::mem::take(g);
                let y = gate.forward(&mut cx, v[0])?;
                let l = weighted_sum(&mut cx.graph, y, 16)?;
                *g = std::mem::take(&mut cx.graph);
                Ok(l)
            },
            opts,
            COMPOSITE_TOL,
        )?);
    }

    // Full model with the training loss.
    {
        let (model, mut store) = Model::build(cfg)?;
        let s = 32usize.max(cfg.output_stride());
        let x = rand_tensor(&mut rng, &[2, cfg.bands, s, s], 0.0, 1.0);
        let t: Vec<f64> = (0..2 * s * s).map(|i| if (i / s + i % s) % 5 < 2 { 1.0 } else { 0.0 }).collect();
        let target = Tensor::from_vec(&[2, 1, s, s], t)?;
        out.push(check_params(
            "full_model",
            &mut store,
            true,
            |cx| {
                let xv = cx.graph.input(x.clone())?;
                let y = model.forward(cx, xv)?;
                cx.graph.dice_bce(y, &target)
            },
            opts,
            COMPOSITE_TOL,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencil_is_exact_for_quartics() {
        let f = |x: f64| x.powi(4) - 3.0 * x.powi(3) + x;
        let (d, k) = central(1e-2, |h| Ok((f(0.7 + h), Some(0)))).unwrap();
        let exact = 4.0 * 0.7f64.powi(3) - 9.0 * 0.49 + 1.0;
        assert!((d - exact).abs() < 1e-9, "{d} vs {exact}");
        assert_eq!(k, Some(0));
    }

    #[test]
    fn step_shrinks_off_a_kink() {
        // |x - 0.3| probed at 0.3005: the first steps cross the kink.
        let at = |h: f64| {
            let x = 0.3005 + h;
            Ok(((x - 0.3).abs(), Some((x > 0.3) as u64)))
        };
        let (d, k) = central(1e-3, at).unwrap();
        assert!((d - 1.0).abs() < 1e-9);
        assert!(matches!(k, Some(n) if n > 0));
    }

    #[test]
    fn persistent_straddle_is_reported() {
        let at = |h: f64| Ok((h.abs(), Some((h > 0.0) as u64 + (h < 0.0) as u64 * 2)));
        let (_, k) = central(1e-3, at).unwrap();
        assert_eq!(k, None);
    }

    #[test]
    fn relative_error_floors_small_gradients() {
        assert!((rel_err(&[1e-9], &[2e-9]) - 1e-3).abs() < 1e-12);
        assert!((rel_err(&[1.0, 2.0], &[1.0, 2.002]) - 0.002 / 2.002).abs() < 1e-12);
    }
}
