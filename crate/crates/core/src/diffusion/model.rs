//! Conditional denoiser, its objective, training loop and DDIM sampling.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};

use super::schedule::{ddim_step_tensor, q_sample_tensor, NoiseSchedule};
use super::unet::UNet;
use crate::checkpoint::Checkpoint;
use crate::codec::{LatentCodec, LATENT_CHANNELS, LATENT_HEIGHT, LATENT_LEN, LATENT_SHAPE, LATENT_WIDTH};
use crate::config::{DiffusionConfig, RunConfig, TextConfig};
use crate::dataset::{pick_with_top_up, Charset, Corpus, Split};
use crate::error::{Error, Result};
use crate::nn::{export_vars, finite_scalar, import_vars, seeded_builder, Adam, AdamConfig};
use crate::rng;
use crate::style::{Projector, StyleEncoder};
use crate::text::{tokenize, CharEncoder, HashedCharEncoder, TokenizedText};

pub const CHECKPOINT_KIND: &str = "diffusion";
const STEP_STREAM: u64 = 0x4449_4646;

/// Per-item conditioning: raw style vectors `(B, d)` and token sequences.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub style: Tensor,
    pub tokens: Vec<TokenizedText>,
}

impl Conditioning {
    pub fn new(style: Tensor, tokens: Vec<TokenizedText>) -> Result<Self> {
        let b = style.dim(0)?;
        if b != tokens.len() {
            return Err(Error::shape(format!("{b} token sequences"), format!("{}", tokens.len())));
        }
        Ok(Self { style, tokens })
    }

    pub fn from_rows(style: &[Vec<f32>], tokens: Vec<TokenizedText>) -> Result<Self> {
        let d = style.first().map(Vec::len).unwrap_or(0);
        if style.iter().any(|s| s.len() != d) {
            return Err(Error::Invalid("ragged style rows".into()));
        }
        let flat: Vec<f32> = style.iter().flatten().copied().collect();
        Self::new(Tensor::from_vec(flat, (style.len(), d), &Device::Cpu)?, tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Predicts the noise present in `z_t` at timestep `t` (one per item).
pub trait Denoiser {
    fn predict_eps(&self, z_t: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor>;
}

/// MSE between freshly drawn noise and the model's prediction. Every item
/// gets `t ~ U{1..T}` and `eps ~ N(0, I)` from `rng`.
pub fn training_loss<R: rand::Rng + ?Sized>(
    model: &dyn Denoiser,
    z0: &Tensor,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let b = z0.dim(0)?;
    if b != cond.len() {
        return Err(Error::shape(format!("{b} conditions"), format!("{}", cond.len())));
    }
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=schedule.timesteps)).collect();
    let eps = Tensor::from_vec(rng::normal_vec(rng, z0.elem_count()), z0.shape(), &Device::Cpu)?
        .to_dtype(z0.dtype())?;
    let z_t = q_sample_tensor(z0, &t, &eps, schedule)?;
    let pred = model.predict_eps(&z_t, &t, cond)?;
    if pred.dims() != z0.dims() {
        return Err(Error::shape(format!("{:?}", z0.dims()), format!("{:?}", pred.dims())));
    }
    Ok((pred - eps)?.sqr()?.mean_all()?)
}

/// Text encoder, the two projectors and the UNet, in one parameter store.
pub struct ConditionalDenoiser {
    varmap: VarMap,
    text: HashedCharEncoder,
    text_proj: Projector,
    style_proj: Projector,
    unet: UNet,
    config: DiffusionConfig,
    text_config: TextConfig,
    style_dim: usize,
    max_len: usize,
}

impl ConditionalDenoiser {
    pub fn new(
        config: &DiffusionConfig,
        text_config: &TextConfig,
        style_dim: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let (varmap, vb) = seeded_builder(seed, DType::F32);
        let text = HashedCharEncoder::new(text_config, max_len, vb.pp("text"))?;
        let text_proj = Projector::new(text.output_dim(), config.d_model, vb.pp("text_proj"))?;
        let style_proj = Projector::new(style_dim, config.d_model, vb.pp("style_proj"))?;
        let unet = UNet::new(config, config.d_model, vb.pp("unet"))?;
        Ok(Self {
            varmap,
            text,
            text_proj,
            style_proj,
            unet,
            config: config.clone(),
            text_config: text_config.clone(),
            style_dim,
            max_len,
        })
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn style_dim(&self) -> usize {
        self.style_dim
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.config
    }

    /// `(B, 1 + L_max, d_model)` context and its `(B, 1 + L_max)` mask: the
    /// projected style token first, then the projected text tokens.
    pub fn context(&self, cond: &Conditioning) -> Result<(Tensor, Tensor)> {
        let b = cond.len();
        if cond.style.dim(1)? != self.style_dim {
            return Err(Error::shape(
                format!("style width {}", self.style_dim),
                format!("{}", cond.style.dim(1)?),
            ));
        }
        let toks: Vec<&TokenizedText> = cond.tokens.iter().collect();
        let text = self.text_proj.forward(&self.text.forward(&toks)?)?;
        let style = self.style_proj.forward(&cond.style.to_dtype(DType::F32)?)?.unsqueeze(1)?;
        let ctx = Tensor::cat(&[style, text], 1)?;
        let mut mask = Vec::with_capacity(b * (1 + self.max_len));
        for t in &cond.tokens {
            mask.push(1f32);
            mask.extend(t.mask.iter().map(|&m| m as f32));
        }
        let mask = Tensor::from_vec(mask, (b, 1 + self.max_len), &Device::Cpu)?;
        Ok((ctx, mask))
    }

    pub fn to_checkpoint(&self, run: &RunConfig, meta: &DiffusionMeta) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        ck.set("diffusion_config", &self.config)?;
        ck.set("text_config", &self.text_config)?;
        ck.set("style_dim", &self.style_dim)?;
        ck.set("max_len", &self.max_len)?;
        ck.set("latent_shape", &LATENT_SHAPE)?;
        ck.set(
            "schedule",
            &serde_json::json!({
                "timesteps": self.config.timesteps,
                "beta_start": self.config.beta_start,
                "beta_end": self.config.beta_end,
                "shape": "linear",
            }),
        )?;
        ck.set("codec_tag", &meta.codec_tag)?;
        ck.set("charset", &meta.charset.chars().iter().collect::<String>())?;
        ck.set("charset_digest", &meta.charset.digest())?;
        ck.set("config", &run.to_json())?;
        ck.insert_tensors(export_vars(&self.varmap, "model.")?);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, DiffusionMeta)> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, found {}",
                ck.kind
            )));
        }
        let shape: Vec<usize> = ck.get("latent_shape")?;
        if shape != LATENT_SHAPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint latent shape {shape:?} differs from this build's {LATENT_SHAPE:?}"
            )));
        }
        let model = Self::new(
            &ck.get("diffusion_config")?,
            &ck.get("text_config")?,
            ck.get("style_dim")?,
            ck.get("max_len")?,
            0,
        )?;
        import_vars(&model.varmap, &ck.tensors, "model.")?;
        let charset = Charset::new(ck.get::<String>("charset")?.chars());
        if charset.digest() != ck.get::<String>("charset_digest")? {
            return Err(Error::Checkpoint("charset digest mismatch".into()));
        }
        let meta = DiffusionMeta {
            codec_tag: ck.get("codec_tag")?,
            charset,
        };
        Ok((model, meta))
    }
}

impl Denoiser for ConditionalDenoiser {
    fn predict_eps(&self, z_t: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor> {
        let (ctx, mask) = self.context(cond)?;
        self.unet.forward(&z_t.to_dtype(DType::F32)?, t, &ctx, &mask)
    }
}

/// Facts about the data a denoiser was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionMeta {
    pub codec_tag: String,
    pub charset: Charset,
}

/// Frozen-encoder features of the training split, computed once.
pub struct TrainingSet {
    latents: Vec<Vec<f32>>,
    styles: Vec<Vec<f32>>,
    tokens: Vec<TokenizedText>,
    same_writer: Vec<Vec<usize>>,
}

impl TrainingSet {
    pub fn build(
        corpus: &Corpus,
        encoder: &StyleEncoder,
        codec: &dyn LatentCodec,
        max_len: usize,
    ) -> Result<Self> {
        let idx = corpus.indices_in(Split::Train);
        if idx.is_empty() {
            return Err(Error::Data("diffusion training needs a non-empty train split".into()));
        }
        let images: Vec<_> = idx.iter().map(|&i| &corpus.get(i).image).collect();
        let styles = encoder
            .embed_many(&images)?
            .into_iter()
            .map(|e| e.values)
            .collect();
        let latents = images
            .iter()
            .map(|img| codec.encode(img).map(|z| z.values))
            .collect::<Result<Vec<_>>>()?;
        let tokens = idx
            .iter()
            .map(|&i| tokenize(&corpus.get(i).transcription, max_len))
            .collect::<Result<Vec<_>>>()?;
        let mut by_writer: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (pos, &i) in idx.iter().enumerate() {
            by_writer.entry(&corpus.get(i).writer_id).or_default().push(pos);
        }
        let same_writer = idx
            .iter()
            .map(|&i| by_writer[corpus.get(i).writer_id.as_str()].clone())
            .collect();
        Ok(Self {
            latents,
            styles,
            tokens,
            same_writer,
        })
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    /// Random batch; each item's style is the mean embedding of `k` images of
    /// its writer.
    pub fn batch<R: rand::Rng + ?Sized>(
        &self,
        size: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<(Tensor, Conditioning)> {
        let mut latents = Vec::with_capacity(size * LATENT_LEN);
        let mut styles = Vec::with_capacity(size);
        let mut tokens = Vec::with_capacity(size);
        for _ in 0..size {
            let i = rng.random_range(0..self.len());
            latents.extend_from_slice(&self.latents[i]);
            let picks = pick_with_top_up(&self.same_writer[i], k, rng);
            let d = self.styles[i].len();
            let mut s = vec![0f32; d];
            for &p in &picks {
                for (a, v) in s.iter_mut().zip(&self.styles[p]) {
                    *a += v / picks.len() as f32;
                }
            }
            styles.push(s);
            tokens.push(self.tokens[i].clone());
        }
        let z0 = Tensor::from_vec(
            latents,
            (size, LATENT_CHANNELS, LATENT_HEIGHT, LATENT_WIDTH),
            &Device::Cpu,
        )?;
        Ok((z0, Conditioning::from_rows(&styles, tokens)?))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DiffusionTrainReport {
    /// Loss of every optimizer step from step 1.
    pub losses: Vec<f64>,
}

impl DiffusionTrainReport {
    /// Mean loss over steps `[from, to)`.
    pub fn mean(&self, from: usize, to: usize) -> f64 {
        let s = &self.losses[from.min(self.losses.len())..to.min(self.losses.len())];
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Default)]
pub struct DiffusionTrainOptions<'a> {
    /// Where to write checkpoints; `checkpoint_every` controls the cadence
    /// and the final state is always written.
    pub checkpoint: Option<&'a Path>,
    /// Continue from this checkpoint's parameters, optimizer and step.
    pub resume: Option<&'a Checkpoint>,
    /// Stop after this many total steps instead of `train_steps`.
    pub stop_at: Option<usize>,
}

fn save_training_state(
    path: &Path,
    model: &ConditionalDenoiser,
    opt: &Adam,
    run: &RunConfig,
    meta: &DiffusionMeta,
    report: &DiffusionTrainReport,
) -> Result<()> {
    let mut ck = model.to_checkpoint(run, meta)?;
    ck.set("step", &opt.steps_taken())?;
    ck.set("losses", &report.losses)?;
    ck.insert_tensors(opt.export_state("opt.")?);
    ck.save(path)
}

/// Trains the conditional denoiser with the style encoder frozen.
pub fn train_diffusion(
    corpus: &Corpus,
    encoder: &StyleEncoder,
    codec: &dyn LatentCodec,
    run: &RunConfig,
    options: &DiffusionTrainOptions,
) -> Result<(ConditionalDenoiser, DiffusionTrainReport)> {
    let cfg = &run.diffusion;
    let max_len = run.data.max_word_length;
    let schedule = NoiseSchedule::from_config(cfg)?;
    let set = TrainingSet::build(corpus, encoder, codec, max_len)?;
    let model = ConditionalDenoiser::new(cfg, &run.text, encoder.embed_dim(), max_len, run.seed)?;
    let meta = DiffusionMeta {
        codec_tag: codec.tag(),
        charset: corpus.charset().clone(),
    };
    let mut opt = Adam::new(model.varmap(), AdamConfig::adamw(cfg.lr, cfg.weight_decay))?;
    let mut report = DiffusionTrainReport::default();
    if let Some(ck) = options.resume {
        let tag: String = ck.get("codec_tag")?;
        if tag != meta.codec_tag {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on codec {tag:?}, current codec is {:?}",
                meta.codec_tag
            )));
        }
        import_vars(model.varmap(), &ck.tensors, "model.")?;
        let step: u64 = ck.get("step")?;
        opt.import_state(&ck.tensors, "opt.", step)?;
        report.losses = ck.get("losses")?;
    }
    let total = options.stop_at.unwrap_or(cfg.train_steps);
    let start = opt.steps_taken() as usize;
    for step in start..total {
        let mut r = rng::derive(run.seed ^ STEP_STREAM, step as u64);
        let (z0, cond) = set.batch(cfg.batch_size, cfg.k_shot, &mut r)?;
        let loss = training_loss(&model, &z0, &cond, &schedule, &mut r)?;
        let v = finite_scalar(&loss, "diffusion loss")?;
        opt.backward_step(&loss)?;
        report.losses.push(v);
        let done = step + 1;
        if done % 100 == 0 {
            log::info!("diffusion step {done}: loss {:.4}", report.mean(done - 100, done));
        }
        if let Some(path) = options.checkpoint {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < total {
                save_training_state(path, &model, &opt, run, &meta, &report)?;
            }
        }
    }
    if let Some(path) = options.checkpoint {
        save_training_state(path, &model, &opt, run, &meta, &report)?;
    }
    Ok((model, report))
}

/// Deterministic DDIM trajectory from `z_start` at `pairs[0].0` to the final
/// latent estimate.
///
/// With `clip`, each step's clean estimate is clamped to that range before
/// it is renoised, while the predicted noise keeps its direction.
pub fn ddim_sample(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    z_start: &Tensor,
    pairs: &[(usize, usize)],
    cond: &Conditioning,
    clip: Option<(f32, f32)>,
) -> Result<Tensor> {
    let b = z_start.dim(0)?;
    let mut z = z_start.clone();
    for &(t, t_prev) in pairs {
        // Detached, or every step would keep the previous steps' graphs alive.
        let eps = model.predict_eps(&z, &vec![t; b], cond)?.detach().to_dtype(z.dtype())?;
        z = match clip {
            None => ddim_step_tensor(&z, &eps, t, t_prev, schedule)?,
            Some((lo, hi)) => {
                let ab = schedule.alpha_bar(t);
                let ab_prev = schedule.alpha_bar(t_prev);
                let x0 = ((&z - (&eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?.clamp(lo, hi)?;
                ((x0 * ab_prev.sqrt())? + (eps * (1.0 - ab_prev).sqrt())?)?
            }
        };
    }
    Ok(z)
}

/// Standard-normal starting latent for a request seed.
pub fn initial_noise(seed: u64) -> Vec<f32> {
    rng::normal_vec(&mut rng::seeded(seed), LATENT_LEN)
}
