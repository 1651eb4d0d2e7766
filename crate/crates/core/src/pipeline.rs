//! Trained models bundled for generation.

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::codec::{latents_to_tensor, tensor_to_latents, LatentCodec, LatentGrid};
use crate::dataset::{Charset, ExemplarSet};
use crate::diffusion::{
    ddim_sample, initial_noise, ConditionalDenoiser, Conditioning, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::raster::GrayImage;
use crate::style::{aggregate_exemplars, StyleEmbedding, StyleEncoder};
use crate::style_ops::{compose_strip, segment_long_word};
use crate::text::tokenize;

pub const DEFAULT_STEPS: usize = 50;

#[derive(Debug, Clone)]
pub enum StyleSource {
    Embedding(StyleEmbedding),
    Exemplars(ExemplarSet),
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub text: String,
    pub style: StyleSource,
    pub steps: usize,
    pub seed: u64,
    /// Start latent for the noise-bias path. Pure noise from `seed` if absent.
    pub init_latent: Option<LatentGrid>,
    /// Timestep `init_latent` sits at; defaults to T.
    pub start_t: Option<usize>,
}

impl GenerationRequest {
    pub fn new(text: impl Into<String>, style: StyleSource, seed: u64) -> Self {
        Self {
            text: text.into(),
            style,
            steps: DEFAULT_STEPS,
            seed,
            init_latent: None,
            start_t: None,
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_init_latent(mut self, z: LatentGrid, start_t: Option<usize>) -> Self {
        self.init_latent = Some(z);
        self.start_t = start_t;
        self
    }
}

pub struct Generator {
    encoder: StyleEncoder,
    denoiser: ConditionalDenoiser,
    codec: Box<dyn LatentCodec>,
    schedule: NoiseSchedule,
    charset: Charset,
    clip: Option<(f32, f32)>,
}

impl Generator {
    /// Fails if the denoiser was trained with a different codec or style width.
    pub fn new(
        encoder: StyleEncoder,
        denoiser: ConditionalDenoiser,
        codec: Box<dyn LatentCodec>,
        codec_tag: &str,
        charset: Charset,
    ) -> Result<Self> {
        if codec.tag() != codec_tag {
            return Err(Error::Checkpoint(format!(
                "denoiser expects codec {codec_tag:?}, got {:?}",
                codec.tag()
            )));
        }
        if encoder.embed_dim() != denoiser.style_dim() {
            return Err(Error::Checkpoint(format!(
                "style encoder width {} does not match the denoiser's {}",
                encoder.embed_dim(),
                denoiser.style_dim()
            )));
        }
        let schedule = NoiseSchedule::from_config(denoiser.config())?;
        let clip = codec.latent_range();
        Ok(Self {
            encoder,
            denoiser,
            codec,
            schedule,
            charset,
            clip,
        })
    }

    /// Clamp clean-latent estimates to the codec's range while sampling.
    /// On by default for codecs that declare a range.
    pub fn with_latent_clipping(mut self, on: bool) -> Self {
        self.clip = if on { self.codec.latent_range() } else { None };
        self
    }

    pub fn load(style: &Path, diffusion: &Path, codec: Box<dyn LatentCodec>) -> Result<Self> {
        let encoder = StyleEncoder::load(style)?;
        let ck = Checkpoint::load(diffusion, Some(crate::diffusion::CHECKPOINT_KIND))?;
        let (denoiser, meta) = ConditionalDenoiser::from_checkpoint(&ck)?;
        Self::new(encoder, denoiser, codec, &meta.codec_tag, meta.charset)
    }

    pub fn encoder(&self) -> &StyleEncoder {
        &self.encoder
    }

    pub fn codec(&self) -> &dyn LatentCodec {
        self.codec.as_ref()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn charset(&self) -> &Charset {
        &self.charset
    }

    pub fn max_len(&self) -> usize {
        self.denoiser.max_len()
    }

    /// Mean embedding of an exemplar set, or the given embedding.
    pub fn style_of(&self, source: &StyleSource) -> Result<StyleEmbedding> {
        match source {
            StyleSource::Embedding(e) => Ok(e.clone()),
            StyleSource::Exemplars(set) => {
                let imgs: Vec<&GrayImage> = set.images.iter().collect();
                aggregate_exemplars(&self.encoder.embed_many(&imgs)?)
            }
        }
    }

    pub fn sample(&self, request: &GenerationRequest) -> Result<GrayImage> {
        Ok(self.sample_batch(std::slice::from_ref(request))?.remove(0))
    }

    /// Requests that share a step count and start timestep run as one batch.
    /// Output order follows input order.
    pub fn sample_batch(&self, requests: &[GenerationRequest]) -> Result<Vec<GrayImage>> {
        let mut out: Vec<Option<GrayImage>> = vec![None; requests.len()];
        let mut groups: Vec<((usize, usize), Vec<usize>)> = Vec::new();
        for (i, r) in requests.iter().enumerate() {
            if r.steps == 0 {
                return Err(Error::Invalid("sampler steps must be at least 1".into()));
            }
            let start = r.start_t.unwrap_or(self.schedule.timesteps);
            self.schedule.check_step(start)?;
            let key = (r.steps, start);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, members)) => members.push(i),
                None => groups.push((key, vec![i])),
            }
        }
        for ((steps, start), members) in groups {
            let reqs: Vec<&GenerationRequest> = members.iter().map(|&i| &requests[i]).collect();
            let images = self.run_group(&reqs, steps, start)?;
            for (i, img) in members.into_iter().zip(images) {
                out[i] = Some(img);
            }
        }
        Ok(out.into_iter().map(|o| o.expect("every request belongs to a group")).collect())
    }

    fn run_group(&self, reqs: &[&GenerationRequest], steps: usize, start: usize) -> Result<Vec<GrayImage>> {
        let mut styles = Vec::with_capacity(reqs.len());
        let mut tokens = Vec::with_capacity(reqs.len());
        let mut starts = Vec::with_capacity(reqs.len());
        let tag = self.codec.tag();
        for r in reqs {
            let s = self.style_of(&r.style)?;
            if s.dim() != self.denoiser.style_dim() {
                return Err(Error::shape(
                    format!("style width {}", self.denoiser.style_dim()),
                    format!("{}", s.dim()),
                ));
            }
            if !s.is_finite() {
                return Err(Error::NonFinite("style embedding".into()));
            }
            styles.push(s.values);
            tokens.push(tokenize(&r.text, self.max_len())?);
            starts.push(match &r.init_latent {
                Some(z) => {
                    if z.scale_tag != tag {
                        return Err(Error::Checkpoint(format!(
                            "start latent from codec {:?}, sampling with {tag:?}",
                            z.scale_tag
                        )));
                    }
                    z.clone()
                }
                None => LatentGrid::new(initial_noise(r.seed), tag.clone())?,
            });
        }
        let z_start = latents_to_tensor(&starts.iter().collect::<Vec<_>>())?;
        let cond = Conditioning::from_rows(&styles, tokens)?;
        let pairs = self.schedule.sampling_pairs_from(start, steps)?;
        let z0 = ddim_sample(&self.denoiser, &self.schedule, &z_start, &pairs, &cond, self.clip)?;
        let latents = tensor_to_latents(&z0, &tag)?;
        latents
            .iter()
            .map(|z| {
                if !z.is_finite() {
                    return Err(Error::NonFinite("sampled latent".into()));
                }
                Ok(self.codec.decode(z)?.clamp01())
            })
            .collect()
    }

    /// Generates a word of any length: pieces of at most `max_len`
    /// characters, each sampled with a seed derived from `seed`, then joined.
    pub fn sample_long(
        &self,
        text: &str,
        style: &StyleSource,
        seed: u64,
        steps: usize,
        gap_px: usize,
    ) -> Result<GrayImage> {
        let parts = segment_long_word(text, self.max_len())?;
        let style = StyleSource::Embedding(self.style_of(style)?);
        let reqs: Vec<GenerationRequest> = parts
            .iter()
            .enumerate()
            .map(|(i, p)| GenerationRequest::new(p.clone(), style.clone(), seed.wrapping_add(i as u64)).with_steps(steps))
            .collect();
        compose_strip(&self.sample_batch(&reqs)?, gap_px)
    }
}
