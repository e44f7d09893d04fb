//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpmConfig {
    /// When false the pyramid is replaced by one pointwise conv + BN + relu6.
    pub enabled: bool,
    pub inner_width: usize,
    pub out_channels: usize,
    pub dilation_rates: Vec<usize>,
    /// Progressive summation of the dilated branches before concatenation.
    pub hff: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LwamConfig {
    /// When false skips reach the decoder ungated.
    pub enabled: bool,
    pub pooling_ps: Vec<f64>,
    pub mlp_reduction: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub bands: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub tokens: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub mobile_expansion: usize,
    pub fpm: FpmConfig,
    pub lwam: LwamConfig,
    /// One entry per decoder level; there are `stages + 1` levels.
    pub decoder_channels: Vec<usize>,
    pub threshold: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-size network for 4-band 384x384 patches.
    pub fn reference() -> Self {
        ModelConfig {
            bands: 4,
            stem_channels: 16,
            stage_channels: vec![24, 32, 64, 96],
            stage_blocks: vec![1, 2, 2, 3],
            tokens: 6,
            token_dim: 160,
            heads: 4,
            ffn_expansion: 2,
            mobile_expansion: 3,
            fpm: FpmConfig {
                enabled: true,
                inner_width: 96,
                out_channels: 128,
                dilation_rates: vec![6, 12, 18],
                hff: true,
            },
            lwam: LwamConfig { enabled: true, pooling_ps: vec![1.0, 2.0], mlp_reduction: 8 },
            decoder_channels: vec![64, 32, 16, 8, 8],
            threshold: 0.5,
            bn_momentum: 0.1,
            seed: 0,
        }
    }

    /// Two-stage miniature used for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            bands: 4,
            stem_channels: 4,
            stage_channels: vec![8, 8],
            stage_blocks: vec![1, 1],
            tokens: 2,
            token_dim: 16,
            heads: 2,
            ffn_expansion: 2,
            mobile_expansion: 2,
            fpm: FpmConfig { enabled: true, inner_width: 4, out_channels: 8, dilation_rates: vec![1, 2, 3], hff: true },
            lwam: LwamConfig { enabled: true, pooling_ps: vec![1.0, 2.0], mlp_reduction: 2 },
            decoder_channels: vec![8, 4, 4],
            threshold: 0.5,
            bn_momentum: 0.1,
            seed: 0,
        }
    }

    /// Small network for desk-scale training on 64x64 synthetic scenes.
    pub fn desk() -> Self {
        ModelConfig {
            bands: 4,
            stem_channels: 8,
            stage_channels: vec![16, 24, 32],
            stage_blocks: vec![1, 1, 1],
            tokens: 4,
            token_dim: 32,
            heads: 2,
            ffn_expansion: 2,
            mobile_expansion: 2,
            fpm: FpmConfig { enabled: true, inner_width: 16, out_channels: 32, dilation_rates: vec![1, 2, 3], hff: true },
            lwam: LwamConfig { enabled: true, pooling_ps: vec![1.0, 2.0], mlp_reduction: 4 },
            decoder_channels: vec![24, 16, 8, 8],
            threshold: 0.5,
            bn_momentum: 0.1,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "reference" => Some(Self::reference()),
            "tiny" => Some(Self::tiny()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Ratio of input size to the deepest feature map.
    pub fn output_stride(&self) -> usize {
        1 << (1 + self.stages())
    }

    /// The four Table-I style ablation variants: (label, config).
    pub fn ablations(&self) -> Vec<(&'static str, ModelConfig)> {
        let with = |fpm: bool, lwam: bool| {
            let mut c = self.clone();
            c.fpm.enabled = fpm;
            c.lwam.enabled = lwam;
            c
        };
        vec![
            ("Backbone", with(false, false)),
            ("Backbone+LWFPM", with(true, false)),
            ("Backbone+LWAM", with(false, true)),
            ("Backbone+LWFPM+LWAM", with(true, true)),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.bands == 0 || self.stem_channels == 0 || self.tokens == 0 || self.token_dim == 0 {
            return bad("bands, stem_channels, tokens and token_dim must be >= 1".into());
        }
        if self.ffn_expansion == 0 || self.mobile_expansion == 0 {
            return bad("expansion factors must be >= 1".into());
        }
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_blocks.len() {
            return bad(format!(
                "stage_channels ({}) and stage_blocks ({}) must be non-empty and equally long",
                self.stage_channels.len(),
                self.stage_blocks.len()
            ));
        }
        if self.stage_channels.contains(&0) || self.stage_blocks.contains(&0) {
            return bad("stage widths and block counts must be >= 1".into());
        }
        if self.heads == 0 || !self.token_dim.is_multiple_of(self.heads) {
            return bad(format!("token_dim {} not divisible by heads {}", self.token_dim, self.heads));
        }
        for &c in std::iter::once(&self.stem_channels).chain(&self.stage_channels) {
            if c % self.heads != 0 {
                return bad(format!("feature width {c} not divisible by heads {}", self.heads));
            }
        }
        if self.decoder_channels.len() != self.stages() + 1 || self.decoder_channels.contains(&0) {
            return bad(format!(
                "decoder_channels needs {} non-zero entries (stages + 1), got {:?}",
                self.stages() + 1,
                self.decoder_channels
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad(format!("bn_momentum {} outside (0, 1]", self.bn_momentum));
        }
        let f = &self.fpm;
        if f.inner_width == 0 || f.out_channels == 0 {
            return bad("fpm widths must be >= 1".into());
        }
        if f.dilation_rates.is_empty()
            || f.dilation_rates[0] == 0
            || f.dilation_rates.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!("fpm dilation_rates {:?} must be >= 1 and strictly increasing", f.dilation_rates));
        }
        let l = &self.lwam;
        if l.pooling_ps.len() != 2 || l.pooling_ps.iter().any(|&p| !(p >= 1.0) || !p.is_finite()) {
            return bad(format!("lwam pooling_ps {:?} must hold exactly two finite values >= 1", l.pooling_ps));
        }
        if l.mlp_reduction == 0 {
            return bad("lwam mlp_reduction must be >= 1".into());
        }
        Ok(())
    }

    /// Checks that `(h, w)` can pass through the network unpadded.
    pub fn check_input(&self, bands: usize, h: usize, w: usize) -> Result<()> {
        if bands != self.bands {
            return Err(Error::shape("model", format!("input has {bands} bands, config expects {}", self.bands)));
        }
        let s = self.output_stride();
        if h == 0 || w == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::shape(
                "model",
                format!("input {h}x{w} must be a non-empty multiple of the output stride {s}; pad upstream"),
            ));
        }
        Ok(())
    }
}
