//! Run configuration.
//!
//! A TOML file with the sections below. Unknown keys are rejected. Command
//! line flags are applied on top of the file (flags win), and `set` accepts
//! `section.key=value` overrides with TOML-syntax values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub style: StyleConfig,
    pub text: TextConfig,
    pub codec: CodecConfig,
    pub diffusion: DiffusionConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            style: StyleConfig::default(),
            text: TextConfig::default(),
            codec: CodecConfig::default(),
            diffusion: DiffusionConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub charset_file: Option<PathBuf>,
    pub max_word_length: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            charset_file: None,
            max_word_length: crate::dataset::DEFAULT_MAX_WORD_LENGTH,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Inverted-residual network with depthwise convolutions.
    Mobilenet,
    /// Plain strided convolution stack.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Hybrid,
    Class,
    Triplet,
}

impl std::str::FromStr for LossVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "hybrid" => Ok(Self::Hybrid),
            "class" => Ok(Self::Class),
            "triplet" => Ok(Self::Triplet),
            o => Err(format!("unknown loss variant {o:?} (hybrid, class, triplet)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleConfig {
    pub backbone: BackboneKind,
    pub variant: LossVariant,
    /// Style embedding width d.
    pub embed_dim: usize,
    /// Channel widths of the backbone stages.
    pub widths: Vec<usize>,
    /// Average-pooling factor applied to the input before the first conv.
    pub stem_pool: usize,
    pub margin: f64,
    pub norm_p: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch; defaults to one pass over the train split.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_step_epochs: usize,
    pub weight_decay: f64,
}

impl Default for StyleConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Mobilenet,
            variant: LossVariant::Hybrid,
            embed_dim: 256,
            widths: vec![16, 24, 32, 64],
            stem_pool: 2,
            margin: 1.0,
            norm_p: 2.0,
            epochs: 20,
            batch_size: 320,
            steps_per_epoch: None,
            lr: 1e-3,
            lr_decay: 0.1,
            lr_step_epochs: 3,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    /// Number of hash buckets per hash function in the character embedding.
    pub hash_buckets: usize,
    pub char_dim: usize,
    /// Hidden width per direction of the bidirectional recurrent encoder.
    pub hidden: usize,
    pub layers: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            hash_buckets: 1024,
            char_dim: 64,
            hidden: 64,
            layers: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    /// `stub` or `pretrained-adapter`.
    pub kind: String,
    pub path: Option<PathBuf>,
    /// Latent scaling constant for the pretrained adapter.
    pub scale: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            kind: "stub".into(),
            path: None,
            scale: 0.18215,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub d_model: usize,
    pub widths: Vec<usize>,
    /// Resolution levels (0 = finest) that carry cross-attention.
    pub attention_levels: Vec<usize>,
    pub heads: usize,
    pub k_shot: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub train_steps: usize,
    /// Write a resumable checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            d_model: 320,
            widths: vec![64, 128, 256],
            attention_levels: vec![1, 2],
            heads: 4,
            k_shot: 5,
            lr: 1e-4,
            weight_decay: 0.2,
            batch_size: 320,
            train_steps: 100_000,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Exemplars per style vector; defaults to `diffusion.k_shot`.
    pub k: Option<usize>,
    /// Magnitude of Gaussian noise added to the style embedding (0 = off).
    pub style_noise: f64,
    /// Start sampling from a noised exemplar latent instead of pure noise.
    pub noise_bias: bool,
    /// Forward-noising step for the noise bias; defaults to the last step.
    pub noise_bias_t: Option<usize>,
    /// Batch size used when generating many images.
    pub batch_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            k: None,
            style_noise: 0.0,
            noise_bias: false,
            noise_bias_t: None,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub metrics: Vec<String>,
    pub htr: HtrConfig,
    pub writer: WriterClassifierConfig,
    /// Independent recognizer trainings whose CER/WER are averaged.
    pub htr_runs: usize,
    /// Average-pooling factor applied before pixel-space FID.
    pub fid_pool: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: vec!["fid".into(), "mssim".into(), "rmse".into(), "writer".into(), "htr".into()],
            htr: HtrConfig::default(),
            writer: WriterClassifierConfig::default(),
            htr_runs: 3,
            fid_pool: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HtrConfig {
    pub widths: Vec<usize>,
    pub hidden: usize,
    pub layers: usize,
    pub frames: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for HtrConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64],
            hidden: 64,
            layers: 2,
            frames: 64,
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WriterClassifierConfig {
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for WriterClassifierConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
        }
    }
}

fn merge_toml(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Exemplars per style vector at sampling time.
    pub fn sampling_k(&self) -> usize {
        self.sampler.k.unwrap_or(self.diffusion.k_shot)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Layers a TOML file over `self`: keys the file sets win, keys it
    /// omits keep their current values.
    pub fn layer_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.layer_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn layer_toml(&mut self, text: &str) -> Result<()> {
        let over: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut base = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        merge_toml(&mut base, toml::Value::Table(over));
        *self = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is serializable")
    }

    /// Digest of the canonical JSON form; stamped onto every artifact.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().to_string().as_bytes())[..16].to_string()
    }

    /// Applies a `dotted.key=value` override. The value is parsed as TOML
    /// and falls back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut cursor = &mut root;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = cursor
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {part} is not a section")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            cursor = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override {key}: {e}")))?;
        Ok(())
    }

    /// Checks cross-field constraints that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let s = &self.style;
        if s.embed_dim == 0 || s.widths.is_empty() || s.stem_pool == 0 {
            return bad("style: embed_dim, widths and stem_pool must be non-empty/positive".into());
        }
        if s.margin < 0.0 || s.norm_p < 1.0 {
            return bad("style: margin must be >= 0 and norm_p >= 1".into());
        }
        if s.batch_size == 0 || s.lr_step_epochs == 0 {
            return bad("style: batch_size and lr_step_epochs must be positive".into());
        }
        let d = &self.diffusion;
        if d.timesteps == 0 || !(0.0 < d.beta_start && d.beta_start <= d.beta_end && d.beta_end < 1.0)
        {
            return bad("diffusion: need timesteps >= 1 and 0 < beta_start <= beta_end < 1".into());
        }
        if d.widths.len() != 3 || d.widths.iter().any(|&w| w == 0) {
            return bad("diffusion: widths must list three positive channel counts".into());
        }
        if d.attention_levels.iter().any(|&l| l > 2) {
            return bad("diffusion: attention levels are 0, 1 or 2".into());
        }
        if d.heads == 0 || d.d_model % d.heads != 0 {
            return bad("diffusion: d_model must be divisible by heads".into());
        }
        for &w in &d.widths {
            if d.attention_levels.is_empty() {
                break;
            }
            if w % d.heads != 0 {
                return bad(format!("diffusion: width {w} not divisible by heads {}", d.heads));
            }
        }
        if d.k_shot == 0 || d.k_shot > crate::dataset::MAX_EXEMPLARS {
            return bad(format!(
                "diffusion: k_shot must be in 1..={}",
                crate::dataset::MAX_EXEMPLARS
            ));
        }
        if self.sampler.steps == 0 || self.sampler.steps > d.timesteps {
            return bad("sampler: steps must be in 1..=timesteps".into());
        }
        if let Some(k) = self.sampler.k {
            if k == 0 || k > crate::dataset::MAX_EXEMPLARS {
                return bad(format!("sampler: k must be in 1..={}", crate::dataset::MAX_EXEMPLARS));
            }
        }
        if self.sampler.style_noise < 0.0 {
            return bad("sampler: style_noise must be >= 0".into());
        }
        if let Some(t) = self.sampler.noise_bias_t {
            if t == 0 || t > d.timesteps {
                return bad("sampler: noise_bias_t must be in 1..=timesteps".into());
            }
        }
        if self.data.max_word_length == 0 {
            return bad("data: max_word_length must be positive".into());
        }
        for m in &self.eval.metrics {
            if !["fid", "mssim", "rmse", "writer", "htr", "perceptual"].contains(&m.as_str()) {
                return bad(format!("eval: unknown metric {m:?}"));
            }
        }
        Ok(())
    }

    /// Small configuration for the synthetic corpus: single-core friendly
    /// widths and short schedules.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.data.max_word_length = 8;
        c.style = StyleConfig {
            widths: vec![16, 24, 32, 48],
            epochs: 12,
            batch_size: 16,
            steps_per_epoch: Some(4),
            lr_step_epochs: 6,
            lr_decay: 0.3,
            ..StyleConfig::default()
        };
        c.text = TextConfig {
            hash_buckets: 256,
            char_dim: 32,
            hidden: 32,
            layers: 2,
        };
        c.diffusion = DiffusionConfig {
            d_model: 64,
            widths: vec![32, 64, 64],
            heads: 4,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 16,
            train_steps: 4500,
            attention_levels: vec![0, 1, 2],
            checkpoint_every: 0,
            ..DiffusionConfig::default()
        };
        c.sampler.batch_size = 40;
        c.eval.htr = HtrConfig {
            widths: vec![16, 32, 32],
            hidden: 64,
            layers: 2,
            frames: 16,
            epochs: 40,
            batch_size: 5,
            lr: 3e-3,
        };
        c.eval.writer = WriterClassifierConfig {
            widths: vec![16, 16, 32, 64],
            epochs: 60,
            batch_size: 10,
            lr: 2e-3,
        };
        c.eval.htr_runs = 1;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        c.validate().unwrap();
        RunConfig::toy().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("seed = 1\nsede = 2\n").is_err());
        assert!(RunConfig::from_toml("[style]\nmargn = 0.5\n").is_err());
        let c = RunConfig::from_toml("[style]\nmargin = 0.5\n").unwrap();
        assert_eq!(c.style.margin, 0.5);
        assert_eq!(c.style.epochs, 20);
    }

    #[test]
    fn dotted_overrides() {
        let mut c = RunConfig::default();
        c.set("diffusion.timesteps=10").unwrap();
        c.set("style.variant=\"class\"").unwrap();
        c.set("data.manifest=foo/bar.tsv").unwrap();
        c.set("seed=9").unwrap();
        assert_eq!(c.diffusion.timesteps, 10);
        assert_eq!(c.style.variant, LossVariant::Class);
        assert_eq!(c.data.manifest.as_deref(), Some(Path::new("foo/bar.tsv")));
        assert_eq!(c.seed, 9);
        assert!(c.set("diffusion.timestep=10").is_err());
        assert!(c.set("nonsense").is_err());
    }

    #[test]
    fn file_layers_over_preset() {
        let mut c = RunConfig::toy();
        c.layer_toml("seed = 3\n[diffusion]\nlr = 5e-4\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.diffusion.lr, 5e-4);
        assert_eq!(c.diffusion.d_model, RunConfig::toy().diffusion.d_model);
        assert!(c.layer_toml("[diffusion]\nlearning_rate = 1.0\n").is_err());
        assert!(c.layer_toml("not toml at all [").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn validation_catches_bad_schedules() {
        let mut c = RunConfig::default();
        c.diffusion.beta_end = 1.5;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.sampler.steps = 2000;
        assert!(c.validate().is_err());
    }
}
