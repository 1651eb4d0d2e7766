//! Small convolutional-recurrent recognizer trained with CTC.

use candle_core::{DType, Module, Tensor};
use candle_nn::ops::log_softmax;
use candle_nn::VarMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ctc::{ctc_feasible, ctc_loss, greedy_decode};
use super::edit::{corpus_error_rates, ErrorRates};
use crate::config::HtrConfig;
use crate::dataset::{Charset, WordSample, CANONICAL_HEIGHT, CANONICAL_WIDTH};
use crate::error::{Error, Result};
use crate::nn::{conv2d, finite_scalar, group_norm, image_batch, linear, seeded_builder, Adam, AdamConfig, BiGru};
use crate::raster::GrayImage;
use crate::rng;

const INPUT_POOL: usize = 2;
const STEP_STREAM: u64 = 0x4854_5200;
const DECODE_CHUNK: usize = 32;

pub struct Recognizer {
    varmap: VarMap,
    convs: Vec<(candle_nn::Conv2d, candle_nn::GroupNorm)>,
    proj: candle_nn::Linear,
    rnn: BiGru,
    out: candle_nn::Linear,
    charset: Charset,
    frames: usize,
}

impl Recognizer {
    /// The first conv block halves both axes; later ones halve height only.
    pub fn new(config: &HtrConfig, charset: &Charset, seed: u64) -> Result<Self> {
        if config.widths.is_empty() || config.frames == 0 {
            return Err(Error::Config("htr: widths and frames must be non-empty/positive".into()));
        }
        let w_after = CANONICAL_WIDTH / INPUT_POOL / 2;
        if w_after % config.frames != 0 {
            return Err(Error::Config(format!(
                "htr: frames must divide the feature width {w_after}, got {}",
                config.frames
            )));
        }
        let mut h = CANONICAL_HEIGHT / INPUT_POOL;
        let (varmap, vb) = seeded_builder(seed, DType::F32);
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &w) in config.widths.iter().enumerate() {
            let vb = vb.pp(format!("conv{i}"));
            convs.push((conv2d(c_in, w, 3, 1, 1, 1, vb.pp("conv"))?, group_norm(8, w, vb.pp("norm"))?));
            c_in = w;
            h /= 2;
            if h == 0 {
                return Err(Error::Config("htr: too many conv blocks for the image height".into()));
            }
        }
        let proj = linear(c_in * h, config.hidden, vb.pp("proj"))?;
        let rnn = BiGru::new(config.hidden, config.hidden, config.layers, vb.pp("rnn"))?;
        let out = linear(rnn.output_dim(), charset.len() + 1, vb.pp("out"))?;
        Ok(Self {
            varmap,
            convs,
            proj,
            rnn,
            out,
            charset: charset.clone(),
            frames: config.frames,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    /// `(B, frames, |charset| + 1)` log-probabilities, blank at index 0.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        // Ink as positive signal on a zero background.
        let mut x = images.avg_pool2d(INPUT_POOL)?.affine(-1.0, 1.0)?;
        for (i, (conv, norm)) in self.convs.iter().enumerate() {
            x = norm.forward(&conv.forward(&x)?)?.relu()?;
            x = if i == 0 {
                x.max_pool2d(2)?
            } else {
                x.max_pool2d_with_stride((2, 1), (2, 1))?
            };
        }
        let (b, c, h, w) = x.dims4()?;
        let group = w / self.frames;
        let x = x
            .reshape((b, c, h, self.frames, group))?
            .mean(4)?
            .permute((0, 3, 1, 2))?
            .reshape((b, self.frames, c * h))?;
        let x = self.proj.forward(&x)?.relu()?;
        let x = self.rnn.forward(&x)?;
        Ok(log_softmax(&self.out.forward(&x)?, 2)?)
    }

    pub fn encode_label(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                self.charset
                    .class_of(c)
                    .map(|k| k as u32)
                    .ok_or_else(|| Error::Data(format!("character {c:?} not in the charset")))
            })
            .collect()
    }

    fn decode_label(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&k| self.charset.char_of(k as usize))
            .collect()
    }

    pub fn transcribe(&self, images: &[&GrayImage]) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(DECODE_CHUNK) {
            let lp = self.forward(&image_batch(chunk)?)?;
            out.extend(greedy_decode(&lp)?.iter().map(|ids| self.decode_label(ids)));
        }
        Ok(out)
    }

    pub fn error_rates(&self, samples: &[&WordSample]) -> Result<ErrorRates> {
        let imgs: Vec<&GrayImage> = samples.iter().map(|s| &s.image).collect();
        let hyp = self.transcribe(&imgs)?;
        let pairs: Vec<(&str, &str)> = samples
            .iter()
            .zip(&hyp)
            .map(|(s, h)| (s.transcription.as_str(), h.as_str()))
            .collect();
        corpus_error_rates(&pairs)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HtrTrainReport {
    pub epoch_losses: Vec<f64>,
    /// Samples dropped because their label cannot fit the frame count.
    pub skipped: usize,
}

/// Trains a fresh recognizer on `samples`.
pub fn ctc_train(
    samples: &[&WordSample],
    charset: &Charset,
    config: &HtrConfig,
    seed: u64,
) -> Result<(Recognizer, HtrTrainReport)> {
    let model = Recognizer::new(config, charset, seed)?;
    let mut report = HtrTrainReport::default();
    let mut usable = Vec::with_capacity(samples.len());
    for s in samples {
        let label = model.encode_label(&s.transcription)?;
        if label.is_empty() || !ctc_feasible(&label, model.frames) {
            log::warn!("skipping {:?}: cannot align to {} frames", s.transcription, model.frames);
            report.skipped += 1;
            continue;
        }
        usable.push((&s.image, label));
    }
    if usable.is_empty() {
        return Err(Error::Data("no trainable samples for the recognizer".into()));
    }
    let mut opt = Adam::new(model.varmap(), AdamConfig::adam(config.lr, 0.0))?;
    let batch = config.batch_size.max(1);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut rng::derive(seed ^ STEP_STREAM, epoch as u64));
        let mut total = 0.0;
        let mut n = 0;
        for chunk in order.chunks(batch) {
            let imgs: Vec<&GrayImage> = chunk.iter().map(|&i| usable[i].0).collect();
            let labels: Vec<Vec<u32>> = chunk.iter().map(|&i| usable[i].1.clone()).collect();
            let loss = ctc_loss(&model.forward(&image_batch(&imgs)?)?, &labels)?;
            total += finite_scalar(&loss, "ctc loss")?;
            n += 1;
            opt.backward_step(&loss)?;
        }
        let mean = total / n as f64;
        log::debug!("htr epoch {epoch}: ctc {mean:.4}");
        report.epoch_losses.push(mean);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::toy::{render_word, toy_charset, ToyStyle};

    fn samples(words: &[&str]) -> Vec<WordSample> {
        words
            .iter()
            .enumerate()
            .map(|(i, w)| WordSample {
                image: render_word(w, ToyStyle::ALL[i % 2], i % 9).unwrap(),
                transcription: w.to_string(),
                writer_id: format!("w{}", i % 2),
                split: Split::Train,
            })
            .collect()
    }

    #[test]
    fn output_shape_and_labels() {
        let words = ["ink", "pen"];
        let charset = toy_charset(&words.iter().map(|w| w.to_string()).collect::<Vec<_>>());
        let cfg = HtrConfig {
            widths: vec![4, 8],
            hidden: 8,
            layers: 1,
            ..HtrConfig::default()
        };
        let m = Recognizer::new(&cfg, &charset, 0).unwrap();
        let s = samples(&words);
        let lp = m.forward(&image_batch(&[&s[0].image, &s[1].image]).unwrap()).unwrap();
        assert_eq!(lp.dims(), &[2, 64, charset.len() + 1]);
        assert_eq!(m.encode_label("pen").unwrap().len(), 3);
        assert!(m.encode_label("pez").is_err());
        let bad = HtrConfig { frames: 48, ..cfg };
        assert!(Recognizer::new(&HtrConfig { frames: 16, ..HtrConfig::default() }, &charset, 0).is_ok());
        assert!(Recognizer::new(&bad, &charset, 0).is_err());
    }

    #[test]
    fn overfits_twenty_words_and_is_deterministic() {
        let words = [
            "the", "and", "deep", "style", "pen", "ink", "word", "write", "noise", "latent",
            "the", "and", "deep", "style", "pen", "ink", "word", "write", "noise", "latent",
        ];
        let owned = samples(&words);
        let refs: Vec<&WordSample> = owned.iter().collect();
        let charset = toy_charset(&words.iter().map(|w| w.to_string()).collect::<Vec<_>>());
        let cfg = HtrConfig {
            widths: vec![16, 32, 32],
            hidden: 64,
            layers: 2,
            frames: 16,
            epochs: 50,
            batch_size: 5,
            lr: 3e-3,
        };
        let (m, rep) = ctc_train(&refs, &charset, &cfg, 1).unwrap();
        let first = rep.epoch_losses[0];
        let last = *rep.epoch_losses.last().unwrap();
        assert!(last < first * 0.5, "{first} -> {last}");
        let rates = m.error_rates(&refs).unwrap();
        assert!(rates.cer < 0.05, "training CER {}", rates.cer);
        let short = HtrConfig { epochs: 2, ..cfg };
        let (_, a) = ctc_train(&refs[..4], &charset, &short, 5).unwrap();
        let (_, b) = ctc_train(&refs[..4], &charset, &short, 5).unwrap();
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }
}
