//! CNN-Transformer encoder: a strided 3x3 stem followed by stages of
//! Mobile-Former blocks that exchange information with a small set of
//! learned global tokens.

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{attend, merge_heads, split_heads, Bottleneck, Builder, Conv2d, ConvBn, CostCx, Ctx, FeedForward, LayerNorm, Linear, SelfAttention};
use crate::params::ParamId;
use crate::tensor::Scalar;

/// One block: Mobile2Former, Former, Mobile, Former2Mobile, in that order.
#[derive(Clone, Debug)]
pub struct MobileFormerBlock {
    pub path: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub heads: usize,
    pub token_dim: usize,
    /// Token-side query projection of Mobile2Former.
    pub m2f_q: Linear,
    pub m2f_out: Linear,
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub mobile: Bottleneck,
    /// Token-side key and value projections of Former2Mobile.
    pub f2m_k: Linear,
    pub f2m_v: Linear,
    pub f2m_out: Conv2d,
}

impl MobileFormerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        path: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        token_dim: usize,
        heads: usize,
        ffn_expansion: usize,
        mobile_expansion: usize,
    ) -> Result<Self> {
        if !in_ch.is_multiple_of(heads) || !out_ch.is_multiple_of(heads) {
            return Err(Error::Config(format!("{path}: channels {in_ch}/{out_ch} not divisible by {heads} heads")));
        }
        let d = token_dim;
        Ok(MobileFormerBlock {
            path: path.to_string(),
            in_ch,
            out_ch,
            heads,
            token_dim,
            m2f_q: Linear::new(b, &format!("{path}.m2f.q"), d, in_ch, true)?,
            m2f_out: Linear::new(b, &format!("{path}.m2f.out"), in_ch, d, true)?,
            ln1: LayerNorm::new(b, &format!("{path}.former.ln1"), d)?,
            attn: SelfAttention::new(b, &format!("{path}.former.attn"), d, heads)?,
            ln2: LayerNorm::new(b, &format!("{path}.former.ln2"), d)?,
            ffn: FeedForward::new(b, &format!("{path}.former.ffn"), d, d * ffn_expansion)?,
            mobile: Bottleneck::new(b, &format!("{path}.mobile"), in_ch, out_ch, stride, mobile_expansion)?,
            f2m_k: Linear::new(b, &format!("{path}.f2m.k"), d, out_ch, true)?,
            f2m_v: Linear::new(b, &format!("{path}.f2m.v"), d, out_ch, true)?,
            f2m_out: Conv2d::pointwise(b, &format!("{path}.f2m.out"), out_ch, out_ch, true)?,
        })
    }

    /// `x: [N, C_in, H, W]`, `z: [N, M, d]` to `([N, C_out, H/s, W/s], [N, M, d])`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var, z: Var) -> Result<(Var, Var)> {
        self.forward_inner(cx, x, z).map_err(|e| e.at(&self.path))
    }

    fn forward_inner<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var, z: Var) -> Result<(Var, Var)> {
        let xs = cx.graph.shape(x).to_vec();
        let zs = cx.graph.shape(z).to_vec();
        if xs.len() != 4 || xs[1] != self.in_ch {
            return Err(Error::shape("mobile_former", format!("expected {} input channels, got {xs:?}", self.in_ch)));
        }
        if zs.len() != 3 || zs[0] != xs[0] || zs[2] != self.token_dim {
            return Err(Error::shape("mobile_former", format!("tokens {zs:?} do not match batch {} / dim {}", xs[0], self.token_dim)));
        }
        let (n, h) = (xs[0], self.heads);

        // Mobile2Former: tokens query the raw pixels.
        let q = self.m2f_q.forward(cx, z)?;
        let q = split_heads(cx, q, h)?;
        let dh = self.in_ch / h;
        let kt = cx.graph.reshape(x, &[n, h, dh, xs[2] * xs[3]])?;
        let v = cx.graph.permute(kt, &[0, 1, 3, 2])?;
        let a = attend(cx, &format!("{}.m2f", self.path), q, kt, v)?;
        let a = merge_heads(cx, a)?;
        let a = self.m2f_out.forward(cx, a)?;
        let z = cx.graph.add(z, a)?;

        // Former: pre-norm self-attention and feed-forward.
        let t = self.ln1.forward(cx, z)?;
        let t = self.attn.forward(cx, t)?;
        let z = cx.graph.add(z, t)?;
        let t = self.ln2.forward(cx, z)?;
        let t = self.ffn.forward(cx, t)?;
        let z = cx.graph.add(z, t)?;

        // Mobile.
        let y = self.mobile.forward(cx, x)?;

        // Former2Mobile: pixels query the projected tokens.
        let ys = cx.graph.shape(y).to_vec();
        let dh = self.out_ch / h;
        let hw = ys[2] * ys[3];
        let yr = cx.graph.reshape(y, &[n, h, dh, hw])?;
        let q = cx.graph.permute(yr, &[0, 1, 3, 2])?;
        let k = self.f2m_k.forward(cx, z)?;
        let k = split_heads(cx, k, h)?;
        let kt = cx.graph.permute(k, &[0, 1, 3, 2])?;
        let v = self.f2m_v.forward(cx, z)?;
        let v = split_heads(cx, v, h)?;
        let a = attend(cx, &format!("{}.f2m", self.path), q, kt, v)?;
        let a = cx.graph.permute(a, &[0, 1, 3, 2])?;
        let a = cx.graph.reshape(a, &ys)?;
        let a = self.f2m_out.forward(cx, a)?;
        let y = cx.graph.add(y, a)?;
        Ok((y, z))
    }

    pub fn cost(&self, cc: &mut CostCx, x: &[usize], z: &[usize]) -> Result<Vec<usize>> {
        let (n, m) = (x[0] as u64, z[1] as u64);
        let hw = (x[2] * x[3]) as u64;
        self.m2f_q.cost(cc, z)?;
        cc.record(&format!("{}.m2f.attn", self.path), &[], 2 * n * m * hw * self.in_ch as u64);
        let mut zc = z.to_vec();
        *zc.last_mut().expect("rank 3") = self.in_ch;
        self.m2f_out.cost(cc, &zc)?;
        self.ln1.cost(cc, z)?;
        self.attn.cost(cc, z)?;
        self.ln2.cost(cc, z)?;
        self.ffn.cost(cc, z)?;
        let y = self.mobile.cost(cc, x)?;
        self.f2m_k.cost(cc, z)?;
        self.f2m_v.cost(cc, z)?;
        let hw = (y[2] * y[3]) as u64;
        cc.record(&format!("{}.f2m.attn", self.path), &[], 2 * n * m * hw * self.out_ch as u64);
        self.f2m_out.cost(cc, &y)
    }

    /// Output projections of both cross-attention gates.
    pub fn cross_attention_outputs(&self) -> Vec<ParamId> {
        let mut v = self.m2f_out.params();
        v.extend(self.f2m_out.params());
        v
    }
}

pub struct BackboneOutput {
    /// Feature maps at output strides 2, 4, ..., 2^(1+stages), shallowest first.
    pub features: Vec<Var>,
    pub tokens: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: ConvBn,
    pub tokens: ParamId,
    pub stages: Vec<Vec<MobileFormerBlock>>,
    pub bands: usize,
    pub output_stride: usize,
    token_shape: [usize; 2],
}

impl Backbone {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let stem = ConvBn::new(b, "encoder.stem", cfg.bands, cfg.stem_channels, 3, 2, 1, 1, true)?;
        let tokens = b.small_normal("encoder.tokens", &[cfg.tokens, cfg.token_dim])?;
        let mut stages = Vec::new();
        let mut c = cfg.stem_channels;
        for (s, (&out, &blocks)) in cfg.stage_channels.iter().zip(&cfg.stage_blocks).enumerate() {
            let mut stage = Vec::new();
            for i in 0..blocks {
                let path = format!("encoder.stage{}.block{}", s + 1, i + 1);
                let stride = if i == 0 { 2 } else { 1 };
                stage.push(MobileFormerBlock::new(
                    b,
                    &path,
                    c,
                    out,
                    stride,
                    cfg.token_dim,
                    cfg.heads,
                    cfg.ffn_expansion,
                    cfg.mobile_expansion,
                )?);
                c = out;
            }
            stages.push(stage);
        }
        Ok(Backbone {
            stem,
            tokens,
            stages,
            bands: cfg.bands,
            output_stride: cfg.output_stride(),
            token_shape: [cfg.tokens, cfg.token_dim],
        })
    }

    fn check(&self, x: &[usize]) -> Result<()> {
        let s = self.output_stride;
        if x.len() != 4 || x[1] != self.bands {
            return Err(Error::shape("encoder", format!("expected [N, {}, H, W], got {x:?}", self.bands)));
        }
        if x[2] == 0 || x[3] == 0 || !x[2].is_multiple_of(s) || !x[3].is_multiple_of(s) {
            return Err(Error::shape(
                "encoder",
                format!("spatial size {}x{} is not a multiple of {s}; pad the input upstream", x[2], x[3]),
            ));
        }
        Ok(())
    }

    /// Initial tokens broadcast over the batch: `[N, M, d]`.
    pub fn initial_tokens<T: Scalar>(&self, cx: &mut Ctx<T>, n: usize) -> Result<Var> {
        let t = cx.p(self.tokens)?;
        let [m, d] = self.token_shape;
        let t = cx.graph.reshape(t, &[1, m, d])?;
        cx.graph.expand(t, &[n, m, d])
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<BackboneOutput> {
        let xs = cx.graph.shape(x).to_vec();
        self.check(&xs)?;
        let mut y = self.stem.forward(cx, x)?;
        let mut z = self.initial_tokens(cx, xs[0])?;
        let mut features = vec![y];
        for stage in &self.stages {
            for block in stage {
                (y, z) = block.forward(cx, y, z)?;
            }
            features.push(y);
        }
        Ok(BackboneOutput { features, tokens: z })
    }

    /// Returns feature shapes at strides 2, 4, ....
    pub fn cost(&self, cc: &mut CostCx, x: &[usize]) -> Result<Vec<Vec<usize>>> {
        self.check(x)?;
        let mut y = self.stem.cost(cc, x)?;
        cc.record("encoder.tokens", &[self.tokens], 0);
        let z = [x[0], self.token_shape[0], self.token_shape[1]];
        let mut shapes = vec![y.clone()];
        for stage in &self.stages {
            for block in stage {
                y = block.cost(cc, &y, &z)?;
            }
            shapes.push(y.clone());
        }
        Ok(shapes)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &MobileFormerBlock> {
        self.stages.iter().flatten()
    }
}
