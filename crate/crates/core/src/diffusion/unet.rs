//! Three-level UNet over the latent grid with cross-attention to the
//! conditioning context.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Init, VarBuilder};

use crate::codec::{LATENT_CHANNELS, LATENT_HEIGHT, LATENT_WIDTH};
use crate::config::DiffusionConfig;
use crate::error::{Error, Result};
use crate::nn::{conv2d, group_norm, linear};

fn gn(ch: usize, vb: VarBuilder) -> Result<candle_nn::GroupNorm> {
    group_norm(8.min(ch), ch, vb)
}

/// Sinusoidal embedding of integer timesteps, `(B, dim)`.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &s in t {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(10000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let a = s as f64 * freq;
            data.push(if i < half { a.sin() } else { a.cos() });
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

struct ResBlock {
    norm1: candle_nn::GroupNorm,
    conv1: candle_nn::Conv2d,
    temb: candle_nn::Linear,
    norm2: candle_nn::GroupNorm,
    conv2: candle_nn::Conv2d,
    skip: Option<candle_nn::Conv2d>,
}

impl ResBlock {
    fn new(in_c: usize, out_c: usize, temb_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm1: gn(in_c, vb.pp("norm1"))?,
            conv1: conv2d(in_c, out_c, 3, 1, 1, 1, vb.pp("conv1"))?,
            temb: linear(temb_dim, out_c, vb.pp("temb"))?,
            norm2: gn(out_c, vb.pp("norm2"))?,
            conv2: conv2d(out_c, out_c, 3, 1, 1, 1, vb.pp("conv2"))?,
            skip: if in_c != out_c {
                Some(conv2d(in_c, out_c, 1, 1, 0, 1, vb.pp("skip"))?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.temb.forward(temb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let s = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + s)?)
    }
}

/// Queries from the feature map (plus a learned position table), keys and
/// values from the context tokens; masked tokens are ignored.
struct CrossAttention {
    norm: candle_nn::GroupNorm,
    pos: Tensor,
    q: candle_nn::Linear,
    k: candle_nn::Linear,
    v: candle_nn::Linear,
    out: candle_nn::Linear,
    heads: usize,
}

impl CrossAttention {
    fn new(ch: usize, ctx_dim: usize, positions: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm: gn(ch, vb.pp("norm"))?,
            pos: vb.get_with_hints((positions, ch), "pos", Init::Randn { mean: 0.0, stdev: 0.02 })?,
            q: linear(ch, ch, vb.pp("q"))?,
            k: linear(ctx_dim, ch, vb.pp("k"))?,
            v: linear(ctx_dim, ch, vb.pp("v"))?,
            out: linear(ch, ch, vb.pp("out"))?,
            heads,
        })
    }

    /// `x: (B, C, H, W)`, `ctx: (B, M, ctx_dim)`, `bias: (B, 1, 1, M)`.
    fn forward(&self, x: &Tensor, ctx: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let n = h * w;
        let m = ctx.dim(1)?;
        let dh = c / self.heads;
        let tokens = self
            .norm
            .forward(x)?
            .flatten_from(2)?
            .transpose(1, 2)?
            .broadcast_add(&self.pos)?;
        let split = |t: Tensor, len: usize| -> candle_core::Result<Tensor> {
            t.reshape((b, len, self.heads, dh))?.transpose(1, 2)?.contiguous()
        };
        let q = split(self.q.forward(&tokens)?, n)?;
        let k = split(self.k.forward(ctx)?, m)?;
        let v = split(self.v.forward(ctx)?, m)?;
        let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?.broadcast_add(bias)?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let o = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        let o = self.out.forward(&o)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + o)?)
    }
}

struct Level {
    res: ResBlock,
    attn: Option<CrossAttention>,
}

impl Level {
    fn forward(&self, x: &Tensor, temb: &Tensor, ctx: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let h = self.res.forward(x, temb)?;
        match &self.attn {
            Some(a) => a.forward(&h, ctx, bias),
            None => Ok(h),
        }
    }
}

pub struct UNet {
    temb1: candle_nn::Linear,
    temb2: candle_nn::Linear,
    time_dim: usize,
    conv_in: candle_nn::Conv2d,
    down: Vec<Level>,
    downsample: Vec<candle_nn::Conv2d>,
    mid: Level,
    up: Vec<Level>,
    upsample: Vec<candle_nn::Conv2d>,
    norm_out: candle_nn::GroupNorm,
    conv_out: candle_nn::Conv2d,
}

impl UNet {
    pub fn new(config: &DiffusionConfig, ctx_dim: usize, vb: VarBuilder) -> Result<Self> {
        let w = &config.widths;
        if w.len() != 3 {
            return Err(Error::Config("the denoiser has exactly three levels".into()));
        }
        let time_dim = w[0];
        let temb_dim = 2 * w[0];
        let sizes = [
            LATENT_HEIGHT * LATENT_WIDTH,
            LATENT_HEIGHT * LATENT_WIDTH / 4,
            LATENT_HEIGHT * LATENT_WIDTH / 16,
        ];
        let level = |lvl: usize, in_c: usize, out_c: usize, vb: VarBuilder| -> Result<Level> {
            let attn = if config.attention_levels.contains(&lvl) {
                if out_c % config.heads != 0 {
                    return Err(Error::Config(format!(
                        "width {out_c} not divisible by {} heads",
                        config.heads
                    )));
                }
                Some(CrossAttention::new(out_c, ctx_dim, sizes[lvl], config.heads, vb.pp("attn"))?)
            } else {
                None
            };
            Ok(Level {
                res: ResBlock::new(in_c, out_c, temb_dim, vb.pp("res"))?,
                attn,
            })
        };
        let down = vec![
            level(0, w[0], w[0], vb.pp("down0"))?,
            level(1, w[0], w[1], vb.pp("down1"))?,
            level(2, w[1], w[2], vb.pp("down2"))?,
        ];
        let downsample = vec![
            conv2d(w[0], w[0], 3, 2, 1, 1, vb.pp("ds0"))?,
            conv2d(w[1], w[1], 3, 2, 1, 1, vb.pp("ds1"))?,
        ];
        let mid = level(2, w[2], w[2], vb.pp("mid"))?;
        let up = vec![
            level(0, 2 * w[0], w[0], vb.pp("up0"))?,
            level(1, 2 * w[1], w[1], vb.pp("up1"))?,
            level(2, 2 * w[2], w[2], vb.pp("up2"))?,
        ];
        let upsample = vec![
            conv2d(w[1], w[0], 3, 1, 1, 1, vb.pp("us0"))?,
            conv2d(w[2], w[1], 3, 1, 1, 1, vb.pp("us1"))?,
        ];
        let out_vb = vb.pp("conv_out");
        let cfg = candle_nn::Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let conv_out = candle_nn::Conv2d::new(
            out_vb.get_with_hints((LATENT_CHANNELS, w[0], 3, 3), "weight", Init::Const(0.0))?,
            Some(out_vb.get_with_hints(LATENT_CHANNELS, "bias", Init::Const(0.0))?),
            cfg,
        );
        Ok(Self {
            temb1: linear(time_dim, temb_dim, vb.pp("temb1"))?,
            temb2: linear(temb_dim, temb_dim, vb.pp("temb2"))?,
            time_dim,
            conv_in: conv2d(LATENT_CHANNELS, w[0], 3, 1, 1, 1, vb.pp("conv_in"))?,
            down,
            downsample,
            mid,
            up,
            upsample,
            norm_out: gn(w[0], vb.pp("norm_out"))?,
            conv_out,
        })
    }

    /// `z: (B, 4, 8, 32)`, `ctx: (B, M, ctx_dim)`, `mask: (B, M)` of 0/1.
    pub fn forward(&self, z: &Tensor, t: &[usize], ctx: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let dt = z.dtype();
        let temb = timestep_embedding(t, self.time_dim, dt)?;
        let temb = self.temb2.forward(&self.temb1.forward(&temb)?.silu()?)?;
        // 0 where attended, large negative where masked
        let bias = ((mask.to_dtype(dt)? - 1.0)? * 1e9)?.unsqueeze(1)?.unsqueeze(1)?;

        let h0 = self.down[0].forward(&self.conv_in.forward(z)?, &temb, ctx, &bias)?;
        let h1 = self.down[1].forward(&self.downsample[0].forward(&h0)?, &temb, ctx, &bias)?;
        let h2 = self.down[2].forward(&self.downsample[1].forward(&h1)?, &temb, ctx, &bias)?;
        let m = self.mid.forward(&h2, &temb, ctx, &bias)?;
        let u2 = self.up[2].forward(&Tensor::cat(&[&m, &h2], 1)?, &temb, ctx, &bias)?;
        let u1 = self.upsample[1].forward(&u2.upsample_nearest2d(h1.dim(2)?, h1.dim(3)?)?)?;
        let u1 = self.up[1].forward(&Tensor::cat(&[&u1, &h1], 1)?, &temb, ctx, &bias)?;
        let u0 = self.upsample[0].forward(&u1.upsample_nearest2d(h0.dim(2)?, h0.dim(3)?)?)?;
        let u0 = self.up[0].forward(&Tensor::cat(&[&u0, &h0], 1)?, &temb, ctx, &bias)?;
        Ok(self.conv_out.forward(&self.norm_out.forward(&u0)?.silu()?)?)
    }
}
