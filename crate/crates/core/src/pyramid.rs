//! Lightweight feature pyramid over the deepest encoder features.
//!
//! Five parallel paths: global pooling, pointwise, and one SDblock per
//! dilation rate. The SDblocks share a single 3x3 convolution, and their
//! outputs are fused hierarchically by running sums before concatenation.

use crate::autograd::Var;
use crate::config::FpmConfig;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Builder, Conv2d, ConvBn, CostCx, Ctx};
use crate::tensor::Scalar;

/// Pointwise reduce, shared 3x3, dilated 3x3, plus a residual from the reduced tensor.
#[derive(Clone, Debug)]
pub struct SdBlock {
    pub path: String,
    pub rate: usize,
    pub pw: ConvBn,
    /// Batchnorm following the shared conv; not shared.
    pub sc_bn: BatchNorm2d,
    pub dc: ConvBn,
}

impl SdBlock {
    pub fn new(b: &mut Builder, path: &str, in_ch: usize, inner: usize, rate: usize) -> Result<Self> {
        Ok(SdBlock {
            path: path.to_string(),
            rate,
            pw: ConvBn::new(b, &format!("{path}.pw"), in_ch, inner, 1, 1, 1, 1, true)?,
            sc_bn: BatchNorm2d::new(b, &format!("{path}.sc_bn"), inner)?,
            dc: ConvBn::new(b, &format!("{path}.dc"), inner, inner, 3, 1, rate, 1, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var, sc: &Conv2d) -> Result<Var> {
        let p = self.pw.forward(cx, x)?;
        let s = sc.forward(cx, p)?;
        let s = self.sc_bn.forward(cx, s)?;
        let s = cx.graph.relu6(s)?;
        let d = self.dc.forward(cx, s)?;
        cx.graph.add(d, p).map_err(|e| e.at(&self.path))
    }

    pub fn cost(&self, cc: &mut CostCx, x: &[usize], sc: &Conv2d) -> Result<Vec<usize>> {
        let p = self.pw.cost(cc, x)?;
        let s = sc.cost(cc, &p)?;
        let s = self.sc_bn.cost(cc, &s)?;
        self.dc.cost(cc, &s)
    }
}

#[derive(Clone, Debug)]
pub struct Lwfpm {
    pub in_ch: usize,
    pub inner: usize,
    pub out_ch: usize,
    pub hff: bool,
    /// Pointwise conv (with bias) applied to the pooled vector.
    pub gap: Conv2d,
    pub pw: ConvBn,
    /// The shared 3x3 convolution.
    pub sc: Conv2d,
    pub sd: Vec<SdBlock>,
    pub fuse: ConvBn,
}

impl Lwfpm {
    pub fn new(b: &mut Builder, path: &str, in_ch: usize, cfg: &FpmConfig) -> Result<Self> {
        let inner = cfg.inner_width;
        let gap = Conv2d::pointwise(b, &format!("{path}.gap"), in_ch, inner, true)?;
        let pw = ConvBn::new(b, &format!("{path}.pw"), in_ch, inner, 1, 1, 1, 1, true)?;
        let sc = Conv2d::new(b, &format!("{path}.sc"), inner, inner, 3, 1, 1, 1, false)?;
        let sd = cfg
            .dilation_rates
            .iter()
            .map(|&r| SdBlock::new(b, &format!("{path}.sd{r}"), in_ch, inner, r))
            .collect::<Result<Vec<_>>>()?;
        let paths = 2 + sd.len();
        let fuse = ConvBn::new(b, &format!("{path}.fuse"), paths * inner, cfg.out_channels, 1, 1, 1, 1, true)?;
        Ok(Lwfpm { in_ch, inner, out_ch: cfg.out_channels, hff: cfg.hff, gap, pw, sc, sd, fuse })
    }

    /// The five path outputs before fusion, in concatenation order.
    pub fn paths<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Vec<Var>> {
        let s = cx.graph.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.in_ch {
            return Err(Error::shape("lwfpm", format!("expected {} channels, got {s:?}", self.in_ch)));
        }
        if s[2] == 0 || s[3] == 0 {
            return Err(Error::DegenerateOutput { op: "lwfpm", detail: format!("empty spatial input {s:?}") });
        }
        let g = cx.graph.global_avg_pool(x)?;
        let g = self.gap.forward(cx, g)?;
        let g = cx.graph.relu6(g)?;
        let g = cx.graph.expand(g, &[s[0], self.inner, s[2], s[3]])?;
        let p = self.pw.forward(cx, x)?;
        let mut out = vec![g, p];
        let mut acc: Option<Var> = None;
        for block in &self.sd {
            let d = block.forward(cx, x, &self.sc)?;
            let f = match (self.hff, acc) {
                (true, Some(prev)) => cx.graph.add(prev, d)?,
                _ => d,
            };
            acc = Some(f);
            out.push(f);
        }
        Ok(out)
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let paths = self.paths(cx, x)?;
        let c = cx.graph.concat(&paths, 1)?;
        self.fuse.forward(cx, c)
    }

    pub fn cost(&self, cc: &mut CostCx, x: &[usize]) -> Result<Vec<usize>> {
        self.gap.cost(cc, &[x[0], x[1], 1, 1])?;
        self.pw.cost(cc, x)?;
        for block in &self.sd {
            block.cost(cc, x, &self.sc)?;
        }
        let paths = 2 + self.sd.len();
        self.fuse.cost(cc, &[x[0], paths * self.inner, x[2], x[3]])
    }
}

/// The module between encoder and decoder: the pyramid, or its pointwise stand-in.
#[derive(Clone, Debug)]
pub enum Neck {
    Pyramid(Lwfpm),
    Pointwise(ConvBn),
}

impl Neck {
    pub fn new(b: &mut Builder, in_ch: usize, cfg: &FpmConfig) -> Result<Self> {
        if cfg.enabled {
            Ok(Neck::Pyramid(Lwfpm::new(b, "fpm", in_ch, cfg)?))
        } else {
            Ok(Neck::Pointwise(ConvBn::new(b, "fpm_off.pw", in_ch, cfg.out_channels, 1, 1, 1, 1, true)?))
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Neck::Pyramid(p) => p.out_ch,
            Neck::Pointwise(c) => c.conv.out_ch,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        match self {
            Neck::Pyramid(p) => p.forward(cx, x),
            Neck::Pointwise(c) => c.forward(cx, x),
        }
    }

    pub fn cost(&self, cc: &mut CostCx, x: &[usize]) -> Result<Vec<usize>> {
        match self {
            Neck::Pyramid(p) => p.cost(cc, x),
            Neck::Pointwise(c) => c.cost(cc, x),
        }
    }
}
