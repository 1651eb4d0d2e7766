//! Regenerating a labelled corpus with a trained generator.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::dataset::{
    canonicalize_image, sample_exemplar_indices, Corpus, DatasetManifest, ManifestEntry, WordSample,
};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::pipeline::{GenerationRequest, Generator, StyleSource};
use crate::rng;
use crate::style::aggregate_exemplars;
use crate::style_ops::{noise_bias_init, perturb_style};

#[derive(Debug, Clone)]
pub struct RegenOptions {
    pub seed: u64,
    /// Exemplars per style vector.
    pub k: usize,
    /// Magnitude of Gaussian noise added to each style vector.
    pub style_noise: f64,
    pub steps: usize,
    /// Start from a noised exemplar at this timestep instead of pure noise.
    pub noise_bias_t: Option<usize>,
    pub batch_size: usize,
    /// Gap between pieces when a word is longer than the text limit.
    pub gap_px: usize,
}

impl Default for RegenOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            k: 5,
            style_noise: 0.0,
            steps: crate::pipeline::DEFAULT_STEPS,
            noise_bias_t: None,
            batch_size: 16,
            gap_px: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RegenFailure {
    pub index: usize,
    pub transcription: String,
    pub writer_id: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    /// `(source index, generated sample)` in source order.
    pub samples: Vec<(usize, WordSample)>,
    pub failures: Vec<RegenFailure>,
}

impl GeneratedCorpus {
    pub fn words(&self) -> Vec<&WordSample> {
        self.samples.iter().map(|(_, s)| s).collect()
    }

    /// PNGs under `dir/images` plus `dir/manifest.tsv`; returns the manifest
    /// path. Every PNG carries `tags` as text chunks, the manifest as comments.
    pub fn save(&self, dir: &Path, charset: &crate::dataset::Charset, tags: &[(&str, &str)]) -> Result<PathBuf> {
        let mut entries = Vec::with_capacity(self.samples.len());
        for (i, s) in &self.samples {
            let rel = PathBuf::from("images").join(format!("{i:05}_{}_{}.png", s.writer_id, s.transcription));
            s.image.save_png(dir.join(&rel), tags)?;
            entries.push(ManifestEntry {
                image_path: dir.join(rel),
                transcription: s.transcription.clone(),
                writer_id: s.writer_id.clone(),
                split: s.split,
            });
        }
        let manifest = DatasetManifest {
            entries,
            charset: charset.clone(),
        };
        let path = dir.join("manifest.tsv");
        write_atomic(&path, manifest.to_text_tagged(dir, tags).as_bytes())?;
        Ok(path)
    }
}

struct Prepared {
    index: usize,
    request: GenerationRequest,
    long: bool,
}

/// One generated image per entry of `targets`, same transcription, writer and
/// split. Style exemplars for each entry come from `pool`. Each entry draws
/// exemplars, style noise and its sampling seed from its own stream derived
/// from `options.seed` and its index.
pub fn regenerate_corpus(
    targets: &[&WordSample],
    pool: &Corpus,
    generator: &Generator,
    options: &RegenOptions,
) -> Result<GeneratedCorpus> {
    let mut failures = Vec::new();
    let mut prepared = Vec::with_capacity(targets.len());
    for (index, s) in targets.iter().enumerate() {
        match prepare(index, s, pool, generator, options) {
            Ok(p) => prepared.push(p),
            Err(e) => failures.push(failure(index, s, &e)),
        }
    }
    let mut samples = Vec::with_capacity(prepared.len());
    let (long, short): (Vec<Prepared>, Vec<Prepared>) = prepared.into_iter().partition(|p| p.long);
    for chunk in short.chunks(options.batch_size.max(1)) {
        let reqs: Vec<GenerationRequest> = chunk.iter().map(|p| p.request.clone()).collect();
        match generator.sample_batch(&reqs) {
            Ok(images) => {
                for (p, img) in chunk.iter().zip(images) {
                    samples.push((p.index, relabel(targets[p.index], img)));
                }
            }
            // Retry one by one so a single bad entry does not sink the batch.
            Err(_) => {
                for p in chunk {
                    match generator.sample(&p.request) {
                        Ok(img) => samples.push((p.index, relabel(targets[p.index], img))),
                        Err(e) => failures.push(failure(p.index, targets[p.index], &e)),
                    }
                }
            }
        }
    }
    for p in long {
        let r = &p.request;
        match generator
            .sample_long(&r.text, &r.style, r.seed, options.steps, options.gap_px)
            .and_then(|img| canonicalize_image(&img))
        {
            Ok(img) => samples.push((p.index, relabel(targets[p.index], img))),
            Err(e) => failures.push(failure(p.index, targets[p.index], &e)),
        }
    }
    samples.sort_by_key(|(i, _)| *i);
    failures.sort_by_key(|f| f.index);
    for f in &failures {
        log::warn!("regeneration of entry {} ({:?}) failed: {}", f.index, f.transcription, f.error);
    }
    Ok(GeneratedCorpus { samples, failures })
}

fn prepare(
    index: usize,
    s: &WordSample,
    pool: &Corpus,
    generator: &Generator,
    options: &RegenOptions,
) -> Result<Prepared> {
    let mut r = rng::derive(options.seed, index as u64);
    let picks = sample_exemplar_indices(pool, &s.writer_id, options.k, &mut r)?;
    let imgs: Vec<_> = picks.iter().map(|&i| &pool.get(i).image).collect();
    let mut style = aggregate_exemplars(&generator.encoder().embed_many(&imgs)?)?;
    if options.style_noise > 0.0 {
        style = perturb_style(&style, options.style_noise, &mut r)?;
    }
    let seed: u64 = r.random();
    let long = s.transcription.chars().count() > generator.max_len();
    let mut request = GenerationRequest::new(s.transcription.clone(), StyleSource::Embedding(style), seed)
        .with_steps(options.steps);
    if let Some(t) = options.noise_bias_t {
        if long {
            return Err(Error::Invalid("noise bias is not supported for segmented words".into()));
        }
        let z = noise_bias_init(imgs[0], t, generator.codec(), generator.schedule(), &mut r)?;
        request = request.with_init_latent(z, Some(t));
    }
    Ok(Prepared { index, request, long })
}

fn relabel(src: &WordSample, image: crate::raster::GrayImage) -> WordSample {
    WordSample {
        image,
        transcription: src.transcription.clone(),
        writer_id: src.writer_id.clone(),
        split: src.split,
    }
}

fn failure(index: usize, s: &WordSample, e: &Error) -> RegenFailure {
    RegenFailure {
        index,
        transcription: s.transcription.clone(),
        writer_id: s.writer_id.clone(),
        error: e.to_string(),
    }
}
