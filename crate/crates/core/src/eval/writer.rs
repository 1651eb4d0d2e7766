//! Independent writer classifier (residual CNN, unlike the style encoder's
//! inverted-residual backbone) and the writer-fidelity score.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::VarMap;
use rand::seq::SliceRandom;
use rand::Rng;

use super::image::FeatureExtractor;
use crate::config::WriterClassifierConfig;
use crate::dataset::{WordSample, WriterIndex};
use crate::error::{Error, Result};
use crate::nn::{conv2d, finite_scalar, group_norm, image_batch, linear, seeded_builder, Adam, AdamConfig};
use crate::raster::{GrayImage, BACKGROUND};
use crate::rng;

const INPUT_POOL: usize = 2;
const STEP_STREAM: u64 = 0x5752_4954;
const CHUNK: usize = 32;
/// Largest random translation (pixels) applied to training images.
const MAX_SHIFT: (i64, i64) = (6, 12);

struct ResBlock {
    conv1: candle_nn::Conv2d,
    norm1: candle_nn::GroupNorm,
    conv2: candle_nn::Conv2d,
    norm2: candle_nn::GroupNorm,
    skip: candle_nn::Conv2d,
}

impl ResBlock {
    fn new(c_in: usize, c_out: usize, vb: candle_nn::VarBuilder) -> Result<Self> {
        Ok(Self {
            conv1: conv2d(c_in, c_out, 3, 2, 1, 1, vb.pp("conv1"))?,
            norm1: group_norm(8, c_out, vb.pp("norm1"))?,
            conv2: conv2d(c_out, c_out, 3, 1, 1, 1, vb.pp("conv2"))?,
            norm2: group_norm(8, c_out, vb.pp("norm2"))?,
            skip: conv2d(c_in, c_out, 1, 2, 0, 1, vb.pp("skip"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&self.conv1.forward(x)?)?.relu()?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        Ok((h + self.skip.forward(x)?)?.relu()?)
    }
}

pub struct WriterClassifier {
    varmap: VarMap,
    blocks: Vec<ResBlock>,
    head: candle_nn::Linear,
    writers: WriterIndex,
}

impl WriterClassifier {
    pub fn new(config: &WriterClassifierConfig, writers: WriterIndex, seed: u64) -> Result<Self> {
        if config.widths.is_empty() || writers.is_empty() {
            return Err(Error::Config("writer classifier needs widths and at least one writer".into()));
        }
        let (varmap, vb) = seeded_builder(seed, DType::F32);
        let mut blocks = Vec::new();
        let mut c = 1;
        for (i, &w) in config.widths.iter().enumerate() {
            blocks.push(ResBlock::new(c, w, vb.pp(format!("block{i}")))?);
            c = w;
        }
        let head = linear(c, writers.len(), vb.pp("head"))?;
        Ok(Self {
            varmap,
            blocks,
            head,
            writers,
        })
    }

    pub fn writers(&self) -> &WriterIndex {
        &self.writers
    }

    /// Globally pooled penultimate features `(B, widths.last)`.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        // Ink as the positive signal, background at zero.
        let mut x = images.avg_pool2d(INPUT_POOL)?.affine(-1.0, 1.0)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.head.forward(&self.embed(images)?)?)
    }
}

/// Anything that names the writer of a word image.
pub trait WriterPredictor {
    fn writers(&self) -> &WriterIndex;
    fn predict(&self, images: &[&GrayImage]) -> Result<Vec<usize>>;
}

impl WriterPredictor for WriterClassifier {
    fn writers(&self) -> &WriterIndex {
        &self.writers
    }

    fn predict(&self, images: &[&GrayImage]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let best = self.logits(&image_batch(chunk)?)?.argmax(D::Minus1)?;
            out.extend(best.to_vec1::<u32>()?.into_iter().map(|k| k as usize));
        }
        Ok(out)
    }
}

impl FeatureExtractor for WriterClassifier {
    fn name(&self) -> String {
        "writer-classifier".into()
    }

    fn features(&self, images: &[&GrayImage]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let f = self.embed(&image_batch(chunk)?)?.to_dtype(DType::F64)?;
            out.extend(f.to_vec2::<f64>()?);
        }
        Ok(out)
    }
}

/// `img` moved by `(dy, dx)`, uncovered pixels set to the background.
fn shifted(img: &GrayImage, dy: i64, dx: i64) -> GrayImage {
    let (h, w) = (img.height() as i64, img.width() as i64);
    GrayImage::from_fn(img.height(), img.width(), |y, x| {
        let (sy, sx) = (y as i64 - dy, x as i64 - dx);
        if (0..h).contains(&sy) && (0..w).contains(&sx) {
            img.get(sy as usize, sx as usize)
        } else {
            BACKGROUND
        }
    })
}

/// Cross-entropy training on real samples, each randomly translated; the
/// writer set is taken from them.
pub fn train_writer_classifier(
    samples: &[&WordSample],
    config: &WriterClassifierConfig,
    seed: u64,
) -> Result<(WriterClassifier, Vec<f64>)> {
    let mut ids: Vec<String> = samples.iter().map(|s| s.writer_id.clone()).collect();
    ids.sort();
    ids.dedup();
    let model = WriterClassifier::new(config, WriterIndex::new(ids), seed)?;
    let labels: Vec<u32> = samples
        .iter()
        .map(|s| model.writers.label(&s.writer_id).expect("writer taken from samples") as u32)
        .collect();
    let mut opt = Adam::new(&model.varmap, AdamConfig::adam(config.lr, 0.0))?;
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut r = rng::derive(seed ^ STEP_STREAM, epoch as u64);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut r);
        let (mut total, mut n) = (0.0, 0);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let moved: Vec<GrayImage> = chunk
                .iter()
                .map(|&i| {
                    let dy = r.random_range(-MAX_SHIFT.0..=MAX_SHIFT.0);
                    let dx = r.random_range(-MAX_SHIFT.1..=MAX_SHIFT.1);
                    shifted(&samples[i].image, dy, dx)
                })
                .collect();
            let imgs: Vec<&GrayImage> = moved.iter().collect();
            let y: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
            let y = Tensor::from_vec(y, chunk.len(), &candle_core::Device::Cpu)?;
            let loss = candle_nn::loss::cross_entropy(&model.logits(&image_batch(&imgs)?)?, &y)?;
            total += finite_scalar(&loss, "writer classifier loss")?;
            n += 1;
            opt.backward_step(&loss)?;
        }
        losses.push(total / n as f64);
    }
    Ok((model, losses))
}

/// Fraction of images assigned to the writer they were generated for.
pub fn writer_fidelity(samples: &[(&GrayImage, &str)], predictor: &dyn WriterPredictor) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to score".into()));
    }
    let mut want = Vec::with_capacity(samples.len());
    for (_, w) in samples {
        want.push(
            predictor
                .writers()
                .label(w)
                .ok_or_else(|| Error::Data(format!("writer {w:?} unknown to the classifier")))?,
        );
    }
    let imgs: Vec<&GrayImage> = samples.iter().map(|(i, _)| *i).collect();
    let got = predictor.predict(&imgs)?;
    let hits = got.iter().zip(&want).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / samples.len() as f64)
}
