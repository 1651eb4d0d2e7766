//! Image-to-vector feature extractors for the style encoder.

use candle_core::{Module, Tensor};
use candle_nn::VarBuilder;

use crate::config::{BackboneKind, StyleConfig};
use crate::error::{Error, Result};
use crate::nn::{conv2d, group_norm, linear};

/// Maps a batch of canonical images `(B, 1, 64, 256)` to `(B, d)` features.
pub trait Backbone: Send + Sync {
    fn embed_dim(&self) -> usize;
    fn forward(&self, images: &Tensor) -> Result<Tensor>;
}

pub fn build_backbone(config: &StyleConfig, vb: VarBuilder) -> Result<Box<dyn Backbone>> {
    Ok(match config.backbone {
        BackboneKind::Mobilenet => Box::new(MobileNetLite::new(config, vb)?),
        BackboneKind::Plain => Box::new(PlainConvNet::new(config, vb)?),
    })
}

fn relu6(x: &Tensor) -> candle_core::Result<Tensor> {
    x.clamp(0f32, 6f32)
}

fn stem_pool(x: &Tensor, factor: usize) -> candle_core::Result<Tensor> {
    if factor > 1 {
        x.avg_pool2d(factor)
    } else {
        Ok(x.clone())
    }
}

struct ConvNormAct {
    conv: candle_nn::Conv2d,
    norm: candle_nn::GroupNorm,
    act: bool,
}

impl ConvNormAct {
    #[allow(clippy::too_many_arguments)]
    fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        groups: usize,
        act: bool,
        vb: VarBuilder,
    ) -> Result<Self> {
        Ok(Self {
            conv: conv2d(in_c, out_c, k, stride, k / 2, groups, vb.pp("conv"))?,
            norm: group_norm(out_c.min(8), out_c, vb.pp("norm"))?,
            act,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = self.norm.forward(&self.conv.forward(x)?)?;
        if self.act {
            relu6(&y)
        } else {
            Ok(y)
        }
    }
}

/// Inverted residual: 1×1 expansion, depthwise 3×3, linear 1×1 projection.
struct InvertedResidual {
    expand: ConvNormAct,
    depthwise: ConvNormAct,
    project: ConvNormAct,
    residual: bool,
}

impl InvertedResidual {
    fn new(in_c: usize, out_c: usize, stride: usize, expansion: usize, vb: VarBuilder) -> Result<Self> {
        let hidden = in_c * expansion;
        Ok(Self {
            expand: ConvNormAct::new(in_c, hidden, 1, 1, 1, true, vb.pp("expand"))?,
            depthwise: ConvNormAct::new(hidden, hidden, 3, stride, hidden, true, vb.pp("dw"))?,
            project: ConvNormAct::new(hidden, out_c, 1, 1, 1, false, vb.pp("project"))?,
            residual: stride == 1 && in_c == out_c,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = self
            .project
            .forward(&self.depthwise.forward(&self.expand.forward(x)?)?)?;
        if self.residual {
            y + x
        } else {
            Ok(y)
        }
    }
}

/// Lightweight inverted-residual network in the MobileNetV2 mould, with group
/// normalisation so small batches behave the same in training and inference.
pub struct MobileNetLite {
    pool: usize,
    stem: ConvNormAct,
    blocks: Vec<InvertedResidual>,
    head: candle_nn::Linear,
    dim: usize,
}

impl MobileNetLite {
    pub fn new(config: &StyleConfig, vb: VarBuilder) -> Result<Self> {
        let w = &config.widths;
        if w.is_empty() {
            return Err(Error::Config("style backbone needs at least one width".into()));
        }
        let stem = ConvNormAct::new(1, w[0], 3, 2, 1, true, vb.pp("stem"))?;
        let mut blocks = Vec::new();
        let last = w.len() - 1;
        for i in 1..w.len() {
            let stride = if i < last { 2 } else { 1 };
            blocks.push(InvertedResidual::new(
                w[i - 1],
                w[i],
                stride,
                2,
                vb.pp(format!("block{i}a")),
            )?);
            blocks.push(InvertedResidual::new(w[i], w[i], 1, 2, vb.pp(format!("block{i}b")))?);
        }
        Ok(Self {
            pool: config.stem_pool,
            stem,
            blocks,
            head: linear(w[last], config.embed_dim, vb.pp("embed"))?,
            dim: config.embed_dim,
        })
    }
}

impl Backbone for MobileNetLite {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = self.stem.forward(&stem_pool(images, self.pool)?)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        let pooled = x.mean(3)?.mean(2)?;
        Ok(self.head.forward(&pooled)?)
    }
}

/// Strided 3×3 convolution stack; the alternative backbone for ablations.
pub struct PlainConvNet {
    pool: usize,
    layers: Vec<ConvNormAct>,
    head: candle_nn::Linear,
    dim: usize,
}

impl PlainConvNet {
    pub fn new(config: &StyleConfig, vb: VarBuilder) -> Result<Self> {
        let w = &config.widths;
        if w.is_empty() {
            return Err(Error::Config("style backbone needs at least one width".into()));
        }
        let mut layers = Vec::new();
        let mut prev = 1;
        for (i, &c) in w.iter().enumerate() {
            let stride = if i + 1 < w.len() { 2 } else { 1 };
            layers.push(ConvNormAct::new(prev, c, 3, stride, 1, true, vb.pp(format!("conv{i}")))?);
            prev = c;
        }
        Ok(Self {
            pool: config.stem_pool,
            layers,
            head: linear(prev, config.embed_dim, vb.pp("embed"))?,
            dim: config.embed_dim,
        })
    }
}

impl Backbone for PlainConvNet {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = stem_pool(images, self.pool)?;
        for l in &self.layers {
            x = l.forward(&x)?;
        }
        Ok(self.head.forward(&x.mean(3)?.mean(2)?)?)
    }
}
