//! Style encoder model, training loop and checkpoints.

use std::path::Path;

use candle_core::{DType, Module, Tensor};
use candle_nn::{VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use super::backbone::{build_backbone, Backbone};
use super::embedding::{Provenance, StyleEmbedding};
use super::loss::{hybrid_loss_from_parts, HybridLoss, HybridParams};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, StyleConfig};
use crate::dataset::{ensure_canonical, sample_triplets, Corpus, Split, TripletBatch, WriterIndex};
use crate::error::{Error, Result};
use crate::nn::{
    export_vars, finite_scalar, image_batch, import_vars, linear, seeded_builder, Adam, AdamConfig,
};
use crate::raster::GrayImage;
use crate::rng;

pub const CHECKPOINT_KIND: &str = "style-encoder";
const STEP_STREAM: u64 = 0x5354_594c;
const EMBED_CHUNK: usize = 64;

pub struct StyleEncoder {
    varmap: VarMap,
    backbone: Box<dyn Backbone>,
    head: candle_nn::Linear,
    writers: WriterIndex,
    config: StyleConfig,
    dtype: DType,
}

impl StyleEncoder {
    /// Freshly initialised encoder with one classifier output per writer.
    pub fn new(config: &StyleConfig, writers: WriterIndex, seed: u64) -> Result<Self> {
        if writers.is_empty() {
            return Err(Error::Data("style encoder needs at least one training writer".into()));
        }
        let (varmap, vb) = seeded_builder(seed, DType::F32);
        let backbone = build_backbone(config, vb.pp("backbone"))?;
        Self::from_parts(varmap, backbone, vb, writers, config.clone())
    }

    /// Assembles an encoder around any backbone whose variables live in
    /// `varmap`. The classifier head is created under `vb.pp("head")`.
    pub fn from_parts(
        varmap: VarMap,
        backbone: Box<dyn Backbone>,
        vb: VarBuilder,
        writers: WriterIndex,
        config: StyleConfig,
    ) -> Result<Self> {
        let dtype = vb.dtype();
        let head = linear(backbone.embed_dim(), writers.len(), vb.pp("head"))?;
        Ok(Self {
            varmap,
            backbone,
            head,
            writers,
            config,
            dtype,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.backbone.embed_dim()
    }

    pub fn writers(&self) -> &WriterIndex {
        &self.writers
    }

    pub fn config(&self) -> &StyleConfig {
        &self.config
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    /// `(B, 1, 64, 256)` to `(B, d)`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        self.backbone.forward(&images.to_dtype(self.dtype)?)
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.head.forward(features)?)
    }

    /// Hybrid loss of one triplet batch drawn from `corpus`.
    pub fn hybrid_loss(&self, corpus: &Corpus, batch: &TripletBatch) -> Result<HybridLoss> {
        let n = batch.len();
        let imgs: Vec<&GrayImage> = batch
            .anchors
            .iter()
            .chain(&batch.positives)
            .chain(&batch.negatives)
            .map(|&i| &corpus.get(i).image)
            .collect();
        let feats = self.forward(&image_batch(&imgs)?)?;
        let anchor = feats.narrow(0, 0, n)?;
        let positive = feats.narrow(0, n, n)?;
        let negative = feats.narrow(0, 2 * n, n)?;
        let logits = self.logits(&anchor)?;
        hybrid_loss_from_parts(
            &logits,
            &batch.anchor_labels,
            &anchor,
            &positive,
            &negative,
            HybridParams::new(self.config.margin, self.config.norm_p, self.config.variant),
        )
    }

    fn embed_rows(&self, images: &[&GrayImage]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EMBED_CHUNK) {
            for img in chunk {
                ensure_canonical(img)?;
            }
            let f = self.forward(&image_batch(chunk)?)?.to_dtype(DType::F32)?;
            out.extend(f.to_vec2::<f32>()?);
        }
        Ok(out)
    }

    /// Style embedding of one canonical word image.
    pub fn embed(&self, image: &GrayImage) -> Result<StyleEmbedding> {
        let mut v = self.embed_rows(&[image])?;
        Ok(StyleEmbedding::new(v.remove(0), Provenance::Single))
    }

    pub fn embed_many(&self, images: &[&GrayImage]) -> Result<Vec<StyleEmbedding>> {
        Ok(self
            .embed_rows(images)?
            .into_iter()
            .map(|v| StyleEmbedding::new(v, Provenance::Single))
            .collect())
    }

    /// Arg-max writer label per image.
    pub fn classify(&self, images: &[&GrayImage]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EMBED_CHUNK) {
            let logits = self.logits(&self.forward(&image_batch(chunk)?)?)?;
            out.extend(
                logits
                    .argmax(candle_core::D::Minus1)?
                    .to_vec1::<u32>()?
                    .into_iter()
                    .map(|l| l as usize),
            );
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, run: &RunConfig) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        ck.set("style_config", &self.config)?;
        ck.set("writers", &self.writers.writers())?;
        ck.set("embed_dim", &self.embed_dim())?;
        ck.set("d_model", &run.diffusion.d_model)?;
        ck.set("config", &run.to_json())?;
        ck.insert_tensors(export_vars(&self.varmap, "")?);
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>, run: &RunConfig) -> Result<()> {
        self.to_checkpoint(run)?.save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, found {}",
                ck.kind
            )));
        }
        let config: StyleConfig = ck.get("style_config")?;
        let writers: Vec<String> = ck.get("writers")?;
        let enc = Self::new(&config, WriterIndex::new(writers), 0)?;
        let d: usize = ck.get("embed_dim")?;
        if d != enc.embed_dim() {
            return Err(Error::Checkpoint(format!(
                "embed_dim field {d} disagrees with the stored config ({})",
                enc.embed_dim()
            )));
        }
        import_vars(&enc.varmap, &ck.tensors, "")?;
        Ok(enc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, Some(CHECKPOINT_KIND))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub class: f64,
    pub triplet: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StyleTrainReport {
    pub epochs: Vec<EpochLoss>,
}

/// Learning rate for a 0-based epoch under step decay.
pub fn style_learning_rate(config: &StyleConfig, epoch: usize) -> f64 {
    let drops = epoch / config.lr_step_epochs.max(1);
    config.lr * config.lr_decay.powi(drops as i32)
}

/// Trains a style encoder on the train split of `corpus`.
///
/// With a checkpoint path the model is saved after every epoch. A non-finite
/// loss stops training with `Error::NonFinite`; the file then still holds the
/// last completed epoch.
pub fn train_style_encoder(
    corpus: &Corpus,
    run: &RunConfig,
    checkpoint: Option<&Path>,
) -> Result<(StyleEncoder, StyleTrainReport)> {
    let cfg = &run.style;
    let writers = WriterIndex::new(corpus.train_writers());
    let encoder = StyleEncoder::new(cfg, writers.clone(), run.seed)?;
    let mut opt = Adam::new(encoder.varmap(), AdamConfig::adam(cfg.lr, cfg.weight_decay))?;
    let n_train = corpus.indices_in(Split::Train).len();
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| n_train.div_ceil(cfg.batch_size.max(1)))
        .max(1);
    let mut report = StyleTrainReport::default();
    let mut global = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = style_learning_rate(cfg, epoch);
        opt.set_learning_rate(lr);
        let (mut tot, mut cls, mut tri) = (0.0, 0.0, 0.0);
        for _ in 0..steps {
            let mut r = rng::derive(run.seed ^ STEP_STREAM, global);
            global += 1;
            let batch = sample_triplets(corpus, &writers, cfg.batch_size, &mut r)?;
            let loss = encoder.hybrid_loss(corpus, &batch)?;
            tot += finite_scalar(&loss.total, "style loss")?;
            let (_, c, t) = loss.values()?;
            cls += c;
            tri += t;
            opt.backward_step(&loss.total)?;
        }
        let k = steps as f64;
        let e = EpochLoss {
            epoch,
            lr,
            total: tot / k,
            class: cls / k,
            triplet: tri / k,
        };
        log::info!(
            "style epoch {epoch}: loss {:.4} (class {:.4}, triplet {:.4}) lr {lr:.2e}",
            e.total,
            e.class,
            e.triplet
        );
        report.epochs.push(e);
        if let Some(path) = checkpoint {
            let mut ck = encoder.to_checkpoint(run)?;
            ck.set("epochs_completed", &(epoch + 1))?;
            ck.set("losses", &report.epochs)?;
            ck.save(path)?;
        }
    }
    Ok((encoder, report))
}
