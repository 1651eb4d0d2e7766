//! `scribe`: train, sample and evaluate few-shot styled word generators.

mod commands;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scribe_core::config::{LossVariant, RunConfig};
use scribe_core::{Error, ErrorKind, Result};

const AFTER_HELP: &str = "\
Configuration precedence, lowest to highest:
  1. --preset (built-in defaults)
  2. --config FILE (TOML; unknown keys are rejected)
  3. --set section.key=value (repeatable, applied in order)
  4. dedicated flags such as --seed, --epochs, --steps, --style-noise

Output paths (--out, --report) and checkpoint paths resolve against
$SCRIBE_ROOT when relative. Manifests and style directories resolve
against the working directory.

Exit codes: 0 ok, 2 config error, 3 data error, 4 checkpoint error,
5 numeric failure.";

#[derive(Debug, Parser)]
#[command(name = "scribe", version, about = "Few-shot styled handwriting generation with latent diffusion", after_help = AFTER_HELP)]
struct Cli {
    /// Built-in starting configuration.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// TOML run configuration applied on top of the preset.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set diffusion.lr=2e-4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed; overrides `seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for outputs and checkpoints.
    #[arg(long, global = true, env = "SCRIBE_ROOT", default_value = ".")]
    root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Desk-scale defaults.
    Default,
    /// Small models for the synthetic corpus.
    Toy,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset manifest (TSV: image_path, transcription, writer_id, split).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Charset file, one character per line.
    #[arg(long)]
    charset_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long, default_value = "checkpoints/style.safetensors")]
    style_ckpt: PathBuf,
    #[arg(long, default_value = "checkpoints/diffusion.safetensors")]
    diffusion_ckpt: PathBuf,
}

#[derive(Debug, Args)]
struct SamplingArgs {
    /// Exemplars per style (1..=5).
    #[arg(long)]
    k: Option<usize>,
    /// DDIM steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Magnitude of Gaussian noise added to the style vector.
    #[arg(long)]
    style_noise: Option<f64>,
    /// Start from a noised exemplar latent instead of pure noise.
    #[arg(long)]
    noise_bias: bool,
    /// Forward-noising step for --noise-bias (default: last step).
    #[arg(long)]
    noise_bias_t: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic toy corpus.
    Synth {
        #[arg(long, default_value = "toy")]
        out: PathBuf,
        /// Training writers (at most 4).
        #[arg(long, default_value_t = 4)]
        seen: usize,
        /// Held-out writers (0 or 1).
        #[arg(long, default_value_t = 1)]
        unseen: usize,
    },
    /// Train the style encoder on the manifest's train split.
    TrainStyle {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        /// Loss: hybrid, class or triplet.
        #[arg(long)]
        variant: Option<LossVariant>,
        #[arg(long, default_value = "checkpoints/style.safetensors")]
        out: PathBuf,
    },
    /// Train the conditional denoiser with a frozen style encoder.
    TrainDiffusion {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "checkpoints/style.safetensors")]
        style_ckpt: PathBuf,
        /// Total optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from this diffusion checkpoint (must differ from --out).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value = "checkpoints/diffusion.safetensors")]
        out: PathBuf,
    },
    /// Generate one word in a given style.
    Sample {
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        text: String,
        /// Directory of exemplar images of one writer.
        #[arg(long, conflicts_with = "writer")]
        style_dir: Option<PathBuf>,
        /// Writer id in --manifest to draw exemplars from.
        #[arg(long, required_unless_present = "style_dir")]
        writer: Option<String>,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Sweep between two styles; one grid per word, columns are weights.
    Interpolate {
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sampling: SamplingArgs,
        /// Style directory or writer id in --manifest.
        #[arg(long)]
        style_a: String,
        #[arg(long)]
        style_b: String,
        /// Weight of style B per column.
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        weights: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        words: Vec<String>,
        #[arg(long, default_value_t = 4)]
        pad: usize,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Convex mixture of several styles.
    Mix {
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sampling: SamplingArgs,
        /// Style directories or writer ids.
        #[arg(long, value_delimiter = ',', required = true)]
        styles: Vec<String>,
        /// Non-negative weights summing to 1, one per style.
        #[arg(long, value_delimiter = ',', required = true)]
        weights: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        words: Vec<String>,
        #[arg(long, default_value_t = 4)]
        pad: usize,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Write a line of text as one strip; long words are split and joined.
    Compose {
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sampling: SamplingArgs,
        /// Space-separated words.
        #[arg(long)]
        words: String,
        /// Style directory or writer id in --manifest.
        #[arg(long)]
        style: String,
        /// Pixels between words.
        #[arg(long, default_value_t = 24)]
        gap: usize,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Generate a synthetic copy of a manifest split.
    Regenerate {
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sampling: SamplingArgs,
        /// train, test_seen_style or test_unseen_style.
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value = "regenerated")]
        out: PathBuf,
    },
    /// Score a generated manifest against a real one.
    Evaluate {
        #[arg(long)]
        real_manifest: PathBuf,
        #[arg(long)]
        gen_manifest: PathBuf,
        #[arg(long)]
        charset_file: Option<PathBuf>,
        /// Comma list of fid, mssim, rmse, writer, htr, perceptual.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
        #[arg(long, default_value = "report.json")]
        report: PathBuf,
    },
}

/// Resolved global state shared by every command.
pub struct Context {
    pub run: RunConfig,
    pub root: PathBuf,
}

impl Context {
    pub fn under_root(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

fn apply_data(run: &mut RunConfig, data: &DataArgs) {
    if let Some(m) = &data.manifest {
        run.data.manifest = Some(m.clone());
    }
    if let Some(c) = &data.charset_file {
        run.data.charset_file = Some(c.clone());
    }
}

fn apply_sampling(run: &mut RunConfig, s: &SamplingArgs) {
    if let Some(k) = s.k {
        run.sampler.k = Some(k);
    }
    if let Some(steps) = s.steps {
        run.sampler.steps = steps;
    }
    if let Some(m) = s.style_noise {
        run.sampler.style_noise = m;
    }
    if s.noise_bias {
        run.sampler.noise_bias = true;
    }
    if let Some(t) = s.noise_bias_t {
        run.sampler.noise_bias_t = Some(t);
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut run = match cli.preset {
        Preset::Default => RunConfig::default(),
        Preset::Toy => RunConfig::toy(),
    };
    if let Some(path) = &cli.config {
        run.layer_file(path)?;
    }
    for s in &cli.sets {
        run.set(s)?;
    }
    if let Some(seed) = cli.seed {
        run.seed = seed;
    }
    match &cli.command {
        Command::Synth { .. } => {}
        Command::Evaluate { metrics, charset_file, .. } => {
            if let Some(m) = metrics {
                run.eval.metrics = m.clone();
            }
            if let Some(c) = charset_file {
                run.data.charset_file = Some(c.clone());
            }
        }
        Command::TrainStyle { data, epochs, variant, .. } => {
            apply_data(&mut run, data);
            if let Some(e) = epochs {
                run.style.epochs = *e;
            }
            if let Some(v) = variant {
                run.style.variant = *v;
            }
        }
        Command::TrainDiffusion { data, steps, .. } => {
            apply_data(&mut run, data);
            if let Some(s) = steps {
                run.diffusion.train_steps = *s;
            }
        }
        Command::Sample { data, sampling, .. }
        | Command::Interpolate { data, sampling, .. }
        | Command::Mix { data, sampling, .. }
        | Command::Compose { data, sampling, .. }
        | Command::Regenerate { data, sampling, .. } => {
            apply_data(&mut run, data);
            apply_sampling(&mut run, sampling);
        }
    }
    run.validate()?;
    Ok(run)
}

fn run(cli: Cli) -> Result<()> {
    let run = build_config(&cli)?;
    log::info!("config hash {}", run.hash());
    let ctx = Context { run, root: cli.root };
    match cli.command {
        Command::Synth { out, seen, unseen } => commands::synth(&ctx, &out, seen, unseen),
        Command::TrainStyle { out, .. } => commands::train_style(&ctx, &out),
        Command::TrainDiffusion { style_ckpt, resume, out, .. } => {
            commands::train_diffusion(&ctx, &style_ckpt, resume.as_deref(), &out)
        }
        Command::Sample { models, text, style_dir, writer, out, .. } => {
            let style = match (style_dir, writer) {
                (Some(d), _) => d.to_string_lossy().into_owned(),
                (None, Some(w)) => w,
                (None, None) => return Err(Error::Config("pass --style-dir or --writer".into())),
            };
            commands::sample(&ctx, &models.style_ckpt, &models.diffusion_ckpt, &text, &style, &out)
        }
        Command::Interpolate { models, style_a, style_b, weights, words, pad, out, .. } => {
            commands::interpolate(&ctx, &models.style_ckpt, &models.diffusion_ckpt, [&style_a, &style_b], &weights, &words, pad, &out)
        }
        Command::Mix { models, styles, weights, words, pad, out, .. } => {
            commands::mix(&ctx, &models.style_ckpt, &models.diffusion_ckpt, &styles, &weights, &words, pad, &out)
        }
        Command::Compose { models, words, style, gap, out, .. } => {
            commands::compose(&ctx, &models.style_ckpt, &models.diffusion_ckpt, &words, &style, gap, &out)
        }
        Command::Regenerate { models, split, out, .. } => {
            commands::regenerate(&ctx, &models.style_ckpt, &models.diffusion_ckpt, &split, &out)
        }
        Command::Evaluate { real_manifest, gen_manifest, report, .. } => {
            commands::evaluate(&ctx, &real_manifest, &gen_manifest, &report)
        }
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Checkpoint => 4,
        ErrorKind::Numeric => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
