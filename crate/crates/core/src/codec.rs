//! Image ⇄ latent-grid codecs.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::CodecConfig;
use crate::dataset::{ensure_canonical, CANONICAL_HEIGHT, CANONICAL_WIDTH};
use crate::error::{Error, Result};
use crate::raster::GrayImage;

pub const LATENT_CHANNELS: usize = 4;
pub const LATENT_HEIGHT: usize = CANONICAL_HEIGHT / 8;
pub const LATENT_WIDTH: usize = CANONICAL_WIDTH / 8;
pub const LATENT_SHAPE: [usize; 3] = [LATENT_CHANNELS, LATENT_HEIGHT, LATENT_WIDTH];
pub const LATENT_LEN: usize = LATENT_CHANNELS * LATENT_HEIGHT * LATENT_WIDTH;

/// Channel-major `(4, 8, 32)` latent plus the tag of the codec that made it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid {
    pub values: Vec<f32>,
    pub scale_tag: String,
}

impl LatentGrid {
    pub fn new(values: Vec<f32>, scale_tag: impl Into<String>) -> Result<Self> {
        if values.len() != LATENT_LEN {
            return Err(Error::shape(format!("{LATENT_SHAPE:?}"), format!("{} values", values.len())));
        }
        Ok(Self {
            values,
            scale_tag: scale_tag.into(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.values.clone(),
            (1, LATENT_CHANNELS, LATENT_HEIGHT, LATENT_WIDTH),
            &Device::Cpu,
        )?)
    }
}

/// Stacks latents into `(B, 4, 8, 32)`.
pub fn latents_to_tensor(latents: &[&LatentGrid]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(latents.len() * LATENT_LEN);
    for z in latents {
        if z.values.len() != LATENT_LEN {
            return Err(Error::shape(format!("{LATENT_SHAPE:?}"), format!("{}", z.values.len())));
        }
        data.extend_from_slice(&z.values);
    }
    Ok(Tensor::from_vec(
        data,
        (latents.len(), LATENT_CHANNELS, LATENT_HEIGHT, LATENT_WIDTH),
        &Device::Cpu,
    )?)
}

pub fn tensor_to_latents(t: &Tensor, tag: &str) -> Result<Vec<LatentGrid>> {
    let dims = t.dims();
    if dims.len() != 4 || dims[1..] != LATENT_SHAPE {
        return Err(Error::shape(format!("(B, 4, 8, 32)"), format!("{dims:?}")));
    }
    t.to_dtype(candle_core::DType::F32)?
        .flatten_from(1)?
        .to_vec2::<f32>()?
        .into_iter()
        .map(|v| LatentGrid::new(v, tag))
        .collect()
}

pub trait LatentCodec: Send + Sync {
    /// Identifier recorded in latents and checkpoints to prevent mixing.
    fn tag(&self) -> String;
    fn encode(&self, image: &GrayImage) -> Result<LatentGrid>;
    fn decode(&self, latent: &LatentGrid) -> Result<GrayImage>;
    /// Interval every encoded latent lies in, if the codec bounds it.
    fn latent_range(&self) -> Option<(f32, f32)> {
        None
    }
}

/// Weight-free codec. Each 8×8 block becomes four channels holding the means
/// of its 4×4 quadrants, mapped from [0,1] to [-1,1]. Decoding fills every
/// 4×4 cell with its value, so the round trip is exact for images that are
/// constant on the 4×4 cell grid and the cell-mean projection otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubCodec;

pub const STUB_TAG: &str = "stub-s2d-v1";
const CELL: usize = 4;

impl LatentCodec for StubCodec {
    fn latent_range(&self) -> Option<(f32, f32)> {
        Some((-1.0, 1.0))
    }

    fn tag(&self) -> String {
        STUB_TAG.into()
    }

    fn encode(&self, image: &GrayImage) -> Result<LatentGrid> {
        ensure_canonical(image)?;
        let mut z = vec![0f32; LATENT_LEN];
        for by in 0..LATENT_HEIGHT {
            for bx in 0..LATENT_WIDTH {
                for q in 0..LATENT_CHANNELS {
                    let (y0, x0) = (by * 8 + (q / 2) * CELL, bx * 8 + (q % 2) * CELL);
                    let mut s = 0f64;
                    for y in y0..y0 + CELL {
                        for x in x0..x0 + CELL {
                            s += image.get(y, x) as f64;
                        }
                    }
                    let mean = s / (CELL * CELL) as f64;
                    z[(q * LATENT_HEIGHT + by) * LATENT_WIDTH + bx] = (2.0 * mean - 1.0) as f32;
                }
            }
        }
        LatentGrid::new(z, STUB_TAG)
    }

    fn decode(&self, latent: &LatentGrid) -> Result<GrayImage> {
        check_decodable(latent, STUB_TAG)?;
        let mut img = GrayImage::blank(CANONICAL_HEIGHT, CANONICAL_WIDTH);
        for by in 0..LATENT_HEIGHT {
            for bx in 0..LATENT_WIDTH {
                for q in 0..LATENT_CHANNELS {
                    let v = latent.values[(q * LATENT_HEIGHT + by) * LATENT_WIDTH + bx];
                    let p = ((v + 1.0) * 0.5).clamp(0.0, 1.0);
                    let (y0, x0) = (by * 8 + (q / 2) * CELL, bx * 8 + (q % 2) * CELL);
                    for y in y0..y0 + CELL {
                        for x in x0..x0 + CELL {
                            img.set(y, x, p);
                        }
                    }
                }
            }
        }
        Ok(img)
    }
}

fn check_decodable(latent: &LatentGrid, tag: &str) -> Result<()> {
    if latent.values.len() != LATENT_LEN {
        return Err(Error::shape(format!("{LATENT_SHAPE:?}"), format!("{}", latent.values.len())));
    }
    if latent.scale_tag != tag {
        return Err(Error::Invalid(format!(
            "latent produced by codec {:?} cannot be decoded by {tag:?}",
            latent.scale_tag
        )));
    }
    Ok(())
}

/// An externally trained RGB image autoencoder working on `[-1, 1]` inputs
/// of shape `(3, 64, 256)` and producing `(4, 8, 32)` latents.
pub trait ImageAutoencoder: Send + Sync {
    fn name(&self) -> String;
    fn encode_rgb(&self, rgb: &[f32]) -> Result<Vec<f32>>;
    fn decode_rgb(&self, latent: &[f32]) -> Result<Vec<f32>>;
}

/// Wraps a pretrained autoencoder: replicates grayscale to three channels and
/// applies the latent scaling constant.
pub struct PretrainedAdapter {
    inner: Box<dyn ImageAutoencoder>,
    scale: f32,
}

impl PretrainedAdapter {
    pub fn new(inner: Box<dyn ImageAutoencoder>, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!("codec scale must be positive, got {scale}")));
        }
        Ok(Self {
            inner,
            scale: scale as f32,
        })
    }
}

impl LatentCodec for PretrainedAdapter {
    fn tag(&self) -> String {
        format!("pretrained:{}:{}", self.inner.name(), self.scale)
    }

    fn encode(&self, image: &GrayImage) -> Result<LatentGrid> {
        ensure_canonical(image)?;
        let plane: Vec<f32> = image.pixels().iter().map(|p| 2.0 * p - 1.0).collect();
        let rgb = [plane.as_slice(), &plane, &plane].concat();
        let z = self.inner.encode_rgb(&rgb)?;
        LatentGrid::new(z.into_iter().map(|v| v * self.scale).collect(), self.tag())
    }

    fn decode(&self, latent: &LatentGrid) -> Result<GrayImage> {
        check_decodable(latent, &self.tag())?;
        let z: Vec<f32> = latent.values.iter().map(|v| v / self.scale).collect();
        let rgb = self.inner.decode_rgb(&z)?;
        let n = CANONICAL_HEIGHT * CANONICAL_WIDTH;
        if rgb.len() != 3 * n {
            return Err(Error::shape(format!("{} values", 3 * n), format!("{}", rgb.len())));
        }
        let gray = (0..n)
            .map(|i| (((rgb[i] + rgb[n + i] + rgb[2 * n + i]) / 3.0 + 1.0) * 0.5).clamp(0.0, 1.0))
            .collect();
        GrayImage::from_vec(CANONICAL_HEIGHT, CANONICAL_WIDTH, gray)
    }
}

/// Codec selected by configuration.
pub fn build_codec(config: &CodecConfig) -> Result<Box<dyn LatentCodec>> {
    match config.kind.as_str() {
        "stub" => Ok(Box::new(StubCodec)),
        "pretrained-adapter" => Err(Error::Config(format!(
            "codec kind pretrained-adapter ({}) needs an ImageAutoencoder backend; none is \
             compiled into this build, use kind = \"stub\"",
            config
                .path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "no path".into())
        ))),
        other => Err(Error::Config(format!(
            "unknown codec kind {other:?} (stub, pretrained-adapter)"
        ))),
    }
}
