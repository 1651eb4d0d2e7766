//! Word-image corpora: manifests, canonical geometry and the samplers that
//! feed style-encoder and diffusion training.

mod canonical;
mod manifest;
mod sampling;

use std::collections::BTreeMap;

pub use canonical::{
    canonicalize_image, ensure_canonical, is_canonical, resize_area, scaled_size,
    CANONICAL_HEIGHT, CANONICAL_WIDTH,
};
pub use manifest::{Charset, DatasetManifest, ManifestEntry, Split, DEFAULT_MAX_WORD_LENGTH};
pub use sampling::{pick_with_top_up, sample_exemplar_indices, sample_exemplars, sample_triplets, ExemplarSet, TripletBatch, MAX_EXEMPLARS};

use crate::error::{Error, Result};
use crate::raster::GrayImage;

/// One canonical word image with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct WordSample {
    pub image: GrayImage,
    pub transcription: String,
    pub writer_id: String,
    pub split: Split,
}

/// Loaded, canonicalized samples. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Corpus {
    samples: Vec<WordSample>,
    charset: Charset,
    by_writer: BTreeMap<String, Vec<usize>>,
}

impl Corpus {
    pub fn new(samples: Vec<WordSample>, charset: Charset) -> Result<Self> {
        let mut by_writer: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            ensure_canonical(&s.image)?;
            if let Some(c) = s.transcription.chars().find(|c| !charset.contains(*c)) {
                return Err(Error::Data(format!(
                    "sample {i}: character {c:?} is not in the charset"
                )));
            }
            by_writer.entry(s.writer_id.clone()).or_default().push(i);
        }
        Ok(Self {
            samples,
            charset,
            by_writer,
        })
    }

    /// Loads and canonicalizes every image named by `manifest`.
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let samples = manifest
            .entries
            .iter()
            .map(|e| {
                let raw = GrayImage::load(&e.image_path)?;
                Ok(WordSample {
                    image: canonicalize_image(&raw)?,
                    transcription: e.transcription.clone(),
                    writer_id: e.writer_id.clone(),
                    split: e.split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples, manifest.charset.clone())
    }

    pub fn samples(&self) -> &[WordSample] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> &WordSample {
        &self.samples[i]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn charset(&self) -> &Charset {
        &self.charset
    }

    /// Indices of every sample by `writer_id`, across splits.
    pub fn writer_samples(&self, writer_id: &str) -> Option<&[usize]> {
        self.by_writer.get(writer_id).map(Vec::as_slice)
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    /// Sorted writer ids that have at least one training sample. A writer's
    /// position in this list is its classifier label.
    pub fn train_writers(&self) -> Vec<String> {
        self.by_writer
            .iter()
            .filter(|(_, idx)| idx.iter().any(|&i| self.samples[i].split == Split::Train))
            .map(|(w, _)| w.clone())
            .collect()
    }

    /// Corpus restricted to the given split.
    pub fn subset(&self, split: Split) -> Result<Corpus> {
        let samples = self
            .samples
            .iter()
            .filter(|s| s.split == split)
            .cloned()
            .collect();
        Corpus::new(samples, self.charset.clone())
    }
}

/// Maps writer ids onto dense classifier labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriterIndex {
    writers: Vec<String>,
}

impl WriterIndex {
    pub fn new(writers: Vec<String>) -> Self {
        Self { writers }
    }

    pub fn label(&self, writer_id: &str) -> Option<usize> {
        self.writers.iter().position(|w| w == writer_id)
    }

    pub fn writer(&self, label: usize) -> Option<&str> {
        self.writers.get(label).map(String::as_str)
    }

    pub fn writers(&self) -> &[String] {
        &self.writers
    }

    pub fn len(&self) -> usize {
        self.writers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.writers.is_empty()
    }
}
