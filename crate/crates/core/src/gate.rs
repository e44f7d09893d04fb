//! Lightweight attention gate for skip connections: a channel gate built
//! from two LP-pooled descriptors and a shared MLP, cascaded into a spatial
//! gate built from two channel-wise LP-pooled maps and a 3x3 conv.

use crate::autograd::Var;
use crate::config::LwamConfig;
use crate::error::{Error, Result};
use crate::layers::{Builder, Conv2d, CostCx, Ctx, Linear};
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub path: String,
    pub channels: usize,
    pub ps: [f64; 2],
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelAttention {
    pub fn new(b: &mut Builder, path: &str, channels: usize, cfg: &LwamConfig) -> Result<Self> {
        let hidden = (channels / cfg.mlp_reduction).max(1);
        Ok(ChannelAttention {
            path: path.to_string(),
            channels,
            ps: [cfg.pooling_ps[0], cfg.pooling_ps[1]],
            fc1: Linear::new(b, &format!("{path}.fc1"), channels, hidden, true)?,
            fc2: Linear::new(b, &format!("{path}.fc2"), hidden, channels, true)?,
        })
    }

    /// Gate of shape `[N, C, 1, 1]` with values in (0, 1).
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let s = cx.graph.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::shape("channel_attention", format!("expected {} channels, got {s:?}", self.channels)).at(&self.path));
        }
        let mut sum = None;
        for &p in &self.ps {
            let d = cx.graph.lp_pool(x, &[2, 3], p)?;
            let d = cx.graph.reshape(d, &[s[0], s[1]])?;
            let h = self.fc1.forward(cx, d)?;
            let h = cx.graph.relu6(h)?;
            let o = self.fc2.forward(cx, h)?;
            sum = Some(match sum {
                Some(acc) => cx.graph.add(acc, o)?,
                None => o,
            });
        }
        let g = cx.graph.sigmoid(sum.expect("two paths"))?;
        cx.graph.reshape(g, &[s[0], s[1], 1, 1])
    }

    pub fn cost(&self, cc: &mut CostCx, x: &[usize]) -> Result<Vec<usize>> {
        let v = [x[0], self.channels];
        for _ in 0..2 {
            let h = self.fc1.cost(cc, &v)?;
            self.fc2.cost(cc, &h)?;
        }
        Ok(vec![x[0], self.channels, 1, 1])
    }
}

#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub ps: [f64; 2],
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(b: &mut Builder, path: &str, cfg: &LwamConfig) -> Result<Self> {
        Ok(SpatialAttention {
            ps: [cfg.pooling_ps[0], cfg.pooling_ps[1]],
            conv: Conv2d::new(b, &format!("{path}.conv"), 2, 1, 3, 1, 1, 1, true)?,
        })
    }

    /// Gate of shape `[N, 1, H, W]` with values in (0, 1).
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let a = cx.graph.lp_pool(x, &[1], self.ps[0])?;
        let b = cx.graph.lp_pool(x, &[1], self.ps[1])?;
        let c = cx.graph.concat(&[a, b], 1)?;
        let y = self.conv.forward(cx, c)?;
        cx.graph.sigmoid(y)
    }

    pub fn cost(&self, cc: &mut CostCx, x: &[usize]) -> Result<Vec<usize>> {
        self.conv.cost(cc, &[x[0], 2, x[2], x[3]])
    }
}

/// Channel gate then spatial gate, the latter computed on the channel-gated tensor.
#[derive(Clone, Debug)]
pub struct Lwam {
    pub cam: ChannelAttention,
    pub sam: SpatialAttention,
}

impl Lwam {
    pub fn new(b: &mut Builder, path: &str, channels: usize, cfg: &LwamConfig) -> Result<Self> {
        Ok(Lwam {
            cam: ChannelAttention::new(b, &format!("{path}.cam"), channels, cfg)?,
            sam: SpatialAttention::new(b, &format!("{path}.sam"), cfg)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let gc = self.cam.forward(cx, x)?;
        let y = cx.graph.mul(x, gc)?;
        let gs = self.sam.forward(cx, y)?;
        cx.graph.mul(y, gs)
    }

    pub fn cost(&self, cc: &mut CostCx, x: &[usize]) -> Result<Vec<usize>> {
        self.cam.cost(cc, x)?;
        self.sam.cost(cc, x)?;
        Ok(x.to_vec())
    }
}
