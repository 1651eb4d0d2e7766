//! Subcommand bodies.

use std::path::{Path, PathBuf};

use scribe_core::checkpoint::Checkpoint;
use scribe_core::codec::build_codec;
use scribe_core::dataset::{
    canonicalize_image, sample_exemplars, Charset, Corpus, DatasetManifest, ExemplarSet, Split, WordSample,
};
use scribe_core::diffusion::{self, train_diffusion as fit_denoiser, DiffusionTrainOptions};
use scribe_core::eval::{self, regenerate_corpus, Metric, RegenOptions};
use scribe_core::grid::{emit_grid, GridLabels};
use scribe_core::io::write_atomic;
use scribe_core::pipeline::{GenerationRequest, Generator, StyleSource};
use scribe_core::raster::GrayImage;
use scribe_core::style::{train_style_encoder, StyleEmbedding, StyleEncoder};
use scribe_core::style_ops::{compose_strip, interpolate_styles, mix_styles, noise_bias_init, perturb_style};
use scribe_core::toy::{write_toy_dataset, ToySpec};
use scribe_core::{rng, Error, Result};
use serde_json::json;

use crate::Context;

// Random streams of the master seed, one per purpose.
const STYLE_STREAM: u64 = 0x5354_594c_4500;
const NOISE_STREAM: u64 = 0x4e4f_4953_4500;
const BIAS_STREAM: u64 = 0x4249_4153_0000;

/// Gap between the pieces of a word longer than the text limit.
const LONG_GAP: usize = 8;

const HASH_KEY: &str = "scribe:config_hash";

fn event(value: serde_json::Value) {
    log::info!("{value}");
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_alphanumeric() || matches!(c, '-' | '.' | '+') { c } else { '_' })
        .collect()
}

/// `{word}_{writer}_{variant}_{seed}.png`
fn file_name(word: &str, writer: &str, variant: &str, seed: u64) -> String {
    format!("{}_{}_{}_{seed}.png", slug(word), slug(writer), slug(variant))
}

/// Sampler settings folded into a short tag, e.g. `k5-noise0.25-bias1000`.
fn variant(ctx: &Context, kind: &str, gen: &Generator) -> String {
    let s = &ctx.run.sampler;
    let mut v = format!("{kind}k{}", ctx.run.sampling_k());
    if s.style_noise > 0.0 {
        v.push_str(&format!("-noise{}", s.style_noise));
    }
    if s.noise_bias {
        v.push_str(&format!("-bias{}", s.noise_bias_t.unwrap_or(gen.schedule().timesteps)));
    }
    v
}

fn save(ctx: &Context, img: &GrayImage, path: &Path) -> Result<()> {
    img.save_png(path, &[(HASH_KEY, &ctx.run.hash())])?;
    event(json!({"event": "wrote", "path": path}));
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    write_atomic(path, &bytes)?;
    event(json!({"event": "wrote", "path": path}));
    Ok(())
}

fn load_manifest(ctx: &Context, path: &Path, fallback: Option<&Charset>) -> Result<DatasetManifest> {
    let own = match &ctx.run.data.charset_file {
        Some(p) => Some(Charset::load(p)?),
        None => None,
    };
    DatasetManifest::load(path, own.as_ref().or(fallback), ctx.run.data.max_word_length)
}

fn configured_corpus(ctx: &Context) -> Result<Option<Corpus>> {
    match &ctx.run.data.manifest {
        Some(p) => Ok(Some(Corpus::from_manifest(&load_manifest(ctx, p, None)?)?)),
        None => Ok(None),
    }
}

fn required_corpus(ctx: &Context) -> Result<Corpus> {
    configured_corpus(ctx)?
        .ok_or_else(|| Error::Config("no dataset manifest: pass --manifest or set data.manifest".into()))
}

fn generator(ctx: &Context, style_ckpt: &Path, diffusion_ckpt: &Path) -> Result<Generator> {
    Generator::load(
        &ctx.under_root(style_ckpt),
        &ctx.under_root(diffusion_ckpt),
        build_codec(&ctx.run.codec)?,
    )
}

struct ResolvedStyle {
    label: String,
    exemplars: ExemplarSet,
}

/// A style is either a directory of exemplar PNGs (the first k in name
/// order) or a writer id whose exemplars are drawn from the manifest.
fn resolve_style(ctx: &Context, spec: &str, corpus: Option<&Corpus>) -> Result<ResolvedStyle> {
    let k = ctx.run.sampling_k();
    let dir = Path::new(spec);
    if dir.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        files.truncate(k);
        if files.is_empty() {
            return Err(Error::Data(format!("no PNG exemplars in {}", dir.display())));
        }
        let images = files
            .iter()
            .map(|p| canonicalize_image(&GrayImage::load(p)?))
            .collect::<Result<Vec<_>>>()?;
        let label = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "style".into());
        return Ok(ResolvedStyle {
            exemplars: ExemplarSet::new(images, label.clone())?,
            label,
        });
    }
    let corpus = corpus.ok_or_else(|| {
        Error::Config(format!("style {spec:?} is not a directory and no manifest was given"))
    })?;
    let exemplars = sample_exemplars(corpus, spec, k, &mut rng::derive(ctx.run.seed, STYLE_STREAM))?;
    Ok(ResolvedStyle {
        label: spec.to_string(),
        exemplars,
    })
}

fn embed(gen: &Generator, style: &ResolvedStyle) -> Result<StyleEmbedding> {
    gen.style_of(&StyleSource::Exemplars(style.exemplars.clone()))
}

/// One image of `text`. Style noise and the noise-bias start each come from
/// their own stream of `seed`. Words over the text limit are split and
/// joined, which rules out the noise bias.
fn generate(
    ctx: &Context,
    gen: &Generator,
    text: &str,
    base: &StyleEmbedding,
    exemplar: &GrayImage,
    seed: u64,
) -> Result<GrayImage> {
    let s = &ctx.run.sampler;
    let style = if s.style_noise > 0.0 {
        perturb_style(base, s.style_noise, &mut rng::derive(seed, NOISE_STREAM))?
    } else {
        base.clone()
    };
    if text.chars().count() > gen.max_len() {
        if s.noise_bias {
            return Err(Error::Config(format!(
                "noise bias supports words of at most {} characters",
                gen.max_len()
            )));
        }
        return gen.sample_long(text, &StyleSource::Embedding(style), seed, s.steps, LONG_GAP);
    }
    let mut req = GenerationRequest::new(text, StyleSource::Embedding(style), seed).with_steps(s.steps);
    if s.noise_bias {
        let t = s.noise_bias_t.unwrap_or(gen.schedule().timesteps);
        let z = noise_bias_init(exemplar, t, gen.codec(), gen.schedule(), &mut rng::derive(seed, BIAS_STREAM))?;
        req = req.with_init_latent(z, Some(t));
    }
    gen.sample(&req)
}

pub fn synth(ctx: &Context, out: &Path, seen: usize, unseen: usize) -> Result<()> {
    let dir = ctx.under_root(out);
    let spec = ToySpec {
        seen_writers: seen,
        unseen_writers: unseen,
        seed: ctx.run.seed,
        ..ToySpec::default()
    };
    let manifest = write_toy_dataset(&dir, &spec, &[(HASH_KEY, &ctx.run.hash())])?;
    event(json!({"event": "wrote", "path": manifest}));
    Ok(())
}

pub fn train_style(ctx: &Context, out: &Path) -> Result<()> {
    let corpus = required_corpus(ctx)?;
    let path = ctx.under_root(out);
    let (encoder, report) = train_style_encoder(&corpus, &ctx.run, Some(&path))?;
    for e in &report.epochs {
        event(json!({"event": "style_epoch", "epoch": e.epoch, "lr": e.lr, "loss": e.total, "class": e.class, "triplet": e.triplet}));
    }
    let train: Vec<&WordSample> = corpus
        .indices_in(Split::Train)
        .iter()
        .map(|&i| corpus.get(i))
        .collect();
    let mut correct = 0;
    for chunk in train.chunks(64) {
        let images: Vec<&GrayImage> = chunk.iter().map(|s| &s.image).collect();
        let predicted = encoder.classify(&images)?;
        correct += chunk
            .iter()
            .zip(predicted)
            .filter(|(s, p)| encoder.writers().label(&s.writer_id) == Some(*p))
            .count();
    }
    let accuracy = correct as f64 / train.len().max(1) as f64;
    event(json!({"event": "style_trained", "train_writer_accuracy": accuracy}));
    write_json(
        &path.with_extension("losses.json"),
        &json!({
            "config_hash": ctx.run.hash(),
            "epochs": report.epochs,
            "train_writer_accuracy": accuracy,
        }),
    )
}

pub fn train_diffusion(ctx: &Context, style_ckpt: &Path, resume: Option<&Path>, out: &Path) -> Result<()> {
    let corpus = required_corpus(ctx)?;
    let encoder = StyleEncoder::load(ctx.under_root(style_ckpt))?;
    let codec = build_codec(&ctx.run.codec)?;
    let path = ctx.under_root(out);
    let resumed = match resume {
        Some(r) => {
            let r = ctx.under_root(r);
            if r == path {
                return Err(Error::Config(
                    "--resume and --out must name different files; inputs are never overwritten".into(),
                ));
            }
            Some(Checkpoint::load(&r, Some(diffusion::CHECKPOINT_KIND))?)
        }
        None => None,
    };
    let options = DiffusionTrainOptions {
        checkpoint: Some(&path),
        resume: resumed.as_ref(),
        stop_at: None,
    };
    let (_, report) = fit_denoiser(&corpus, &encoder, codec.as_ref(), &ctx.run, &options)?;
    let n = report.losses.len();
    let head = report.mean(0, 50);
    let tail = report.mean(n.saturating_sub(50), n);
    event(json!({"event": "diffusion_trained", "steps": n, "first50": head, "last50": tail}));
    write_json(
        &path.with_extension("losses.json"),
        &json!({"config_hash": ctx.run.hash(), "losses": report.losses}),
    )
}

pub fn sample(ctx: &Context, style_ckpt: &Path, diffusion_ckpt: &Path, text: &str, style: &str, out: &Path) -> Result<()> {
    let gen = generator(ctx, style_ckpt, diffusion_ckpt)?;
    let corpus = configured_corpus(ctx)?;
    let style = resolve_style(ctx, style, corpus.as_ref())?;
    let base = embed(&gen, &style)?;
    let seed = ctx.run.seed;
    let img = generate(ctx, &gen, text, &base, &style.exemplars.images[0], seed)?;
    let name = file_name(text, &style.label, &variant(ctx, "", &gen), seed);
    save(ctx, &img, &ctx.under_root(out).join(name))
}

fn grid_rows(rows: Vec<Vec<GrayImage>>) -> Result<Vec<Vec<GrayImage>>> {
    rows.into_iter()
        .map(|r| r.iter().map(canonicalize_image).collect())
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn interpolate(
    ctx: &Context,
    style_ckpt: &Path,
    diffusion_ckpt: &Path,
    specs: [&String; 2],
    weights: &[f64],
    words: &[String],
    pad: usize,
    out: &Path,
) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Config("--weights needs at least one value".into()));
    }
    let gen = generator(ctx, style_ckpt, diffusion_ckpt)?;
    let corpus = configured_corpus(ctx)?;
    let a = resolve_style(ctx, specs[0], corpus.as_ref())?;
    let b = resolve_style(ctx, specs[1], corpus.as_ref())?;
    let (ea, eb) = (embed(&gen, &a)?, embed(&gen, &b)?);
    let seed = ctx.run.seed;
    let writer = format!("{}-{}", a.label, b.label);
    let tag = variant(ctx, "interp-", &gen);
    let cols: Vec<String> = weights.iter().map(|w| w.to_string()).collect();
    let mut all = Vec::with_capacity(words.len());
    for word in words {
        let mut row = Vec::with_capacity(weights.len());
        for &w in weights {
            let style = interpolate_styles(&ea, &eb, w)?;
            // The noise bias starts from the nearer endpoint's exemplar.
            let ex = if w <= 0.5 { &a.exemplars.images[0] } else { &b.exemplars.images[0] };
            row.push(generate(ctx, &gen, word, &style, ex, seed)?);
        }
        let row = grid_rows(vec![row])?;
        let labels = GridLabels {
            rows: vec![word.clone()],
            cols: cols.clone(),
        };
        let grid = emit_grid(&row, &labels, pad)?;
        save(ctx, &grid, &ctx.under_root(out).join(file_name(word, &writer, &tag, seed)))?;
        all.extend(row);
    }
    if words.len() > 1 {
        let labels = GridLabels {
            rows: words.to_vec(),
            cols,
        };
        let grid = emit_grid(&all, &labels, pad)?;
        save(ctx, &grid, &ctx.under_root(out).join(file_name(&words.join("+"), &writer, &tag, seed)))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn mix(
    ctx: &Context,
    style_ckpt: &Path,
    diffusion_ckpt: &Path,
    specs: &[String],
    weights: &[f64],
    words: &[String],
    pad: usize,
    out: &Path,
) -> Result<()> {
    if specs.len() != weights.len() {
        return Err(Error::Config(format!("{} styles but {} weights", specs.len(), weights.len())));
    }
    let gen = generator(ctx, style_ckpt, diffusion_ckpt)?;
    let corpus = configured_corpus(ctx)?;
    let styles = specs
        .iter()
        .map(|s| resolve_style(ctx, s, corpus.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let embeddings = styles.iter().map(|s| embed(&gen, s)).collect::<Result<Vec<_>>>()?;
    let mixed = mix_styles(&embeddings, weights)?;
    // The noise bias for the mixture starts from the heaviest style.
    let heaviest = weights
        .iter()
        .enumerate()
        .fold(0, |best, (i, &w)| if w > weights[best] { i } else { best });
    let seed = ctx.run.seed;
    let writer = styles.iter().map(|s| s.label.as_str()).collect::<Vec<_>>().join("+");
    let tag = variant(ctx, "mix-", &gen);
    let mut cols: Vec<String> = styles.iter().map(|s| s.label.clone()).collect();
    cols.push("mix".into());
    for word in words {
        let mut row = Vec::with_capacity(cols.len());
        for (s, e) in styles.iter().zip(&embeddings) {
            row.push(generate(ctx, &gen, word, e, &s.exemplars.images[0], seed)?);
        }
        row.push(generate(ctx, &gen, word, &mixed, &styles[heaviest].exemplars.images[0], seed)?);
        let labels = GridLabels {
            rows: vec![word.clone()],
            cols: cols.clone(),
        };
        let grid = emit_grid(&grid_rows(vec![row])?, &labels, pad)?;
        save(ctx, &grid, &ctx.under_root(out).join(file_name(word, &writer, &tag, seed)))?;
    }
    Ok(())
}

pub fn compose(ctx: &Context, style_ckpt: &Path, diffusion_ckpt: &Path, words: &str, style: &str, gap: usize, out: &Path) -> Result<()> {
    let list: Vec<&str> = words.split_whitespace().collect();
    if list.is_empty() {
        return Err(Error::Config("--words is empty".into()));
    }
    let gen = generator(ctx, style_ckpt, diffusion_ckpt)?;
    let corpus = configured_corpus(ctx)?;
    let style = resolve_style(ctx, style, corpus.as_ref())?;
    let base = embed(&gen, &style)?;
    let seed = ctx.run.seed;
    let images = list
        .iter()
        .enumerate()
        // Word i gets its own seed; pieces of a long word use seed + j.
        .map(|(i, w)| generate(ctx, &gen, w, &base, &style.exemplars.images[0], seed.wrapping_add((i as u64) << 32)))
        .collect::<Result<Vec<_>>>()?;
    let strip = compose_strip(&images, gap)?;
    let name = file_name(&list.join("-"), &style.label, &variant(ctx, "compose-", &gen), seed);
    save(ctx, &strip, &ctx.under_root(out).join(name))
}

pub fn regenerate(ctx: &Context, style_ckpt: &Path, diffusion_ckpt: &Path, split: &str, out: &Path) -> Result<()> {
    let split: Split = split.parse().map_err(Error::Config)?;
    let gen = generator(ctx, style_ckpt, diffusion_ckpt)?;
    let corpus = required_corpus(ctx)?;
    let targets: Vec<&WordSample> = corpus.indices_in(split).iter().map(|&i| corpus.get(i)).collect();
    if targets.is_empty() {
        return Err(Error::Data(format!("split {split} of the manifest is empty")));
    }
    let s = &ctx.run.sampler;
    let options = RegenOptions {
        seed: ctx.run.seed,
        k: ctx.run.sampling_k(),
        style_noise: s.style_noise,
        steps: s.steps,
        noise_bias_t: s.noise_bias.then(|| s.noise_bias_t.unwrap_or(gen.schedule().timesteps)),
        batch_size: s.batch_size,
        gap_px: LONG_GAP,
    };
    let result = regenerate_corpus(&targets, &corpus, &gen, &options)?;
    let dir = ctx.under_root(out);
    let hash = ctx.run.hash();
    let manifest = result.save(&dir, corpus.charset(), &[(HASH_KEY, &hash)])?;
    write_atomic(&dir.join("charset.txt"), corpus.charset().to_file_text().as_bytes())?;
    write_json(
        &dir.join("failures.json"),
        &json!({"config_hash": hash, "failures": result.failures}),
    )?;
    event(json!({
        "event": "regenerated",
        "manifest": manifest,
        "generated": result.samples.len(),
        "failed": result.failures.len(),
    }));
    Ok(())
}

pub fn evaluate(ctx: &Context, real: &Path, generated: &Path, report: &Path) -> Result<()> {
    let real = Corpus::from_manifest(&load_manifest(ctx, real, None)?)?;
    let generated = Corpus::from_manifest(&load_manifest(ctx, generated, Some(real.charset()))?)?;
    let metrics = Metric::parse_list(&ctx.run.eval.metrics)?;
    let r: Vec<&WordSample> = real.samples().iter().collect();
    let g: Vec<&WordSample> = generated.samples().iter().collect();
    let rep = eval::evaluate(&r, &g, real.charset(), &metrics, &ctx.run, None)?;
    let value = serde_json::to_value(&rep).map_err(|e| Error::Invalid(e.to_string()))?;
    event(json!({"event": "metrics", "report": value}));
    write_json(&ctx.under_root(report), &value)?;
    if !rep.all_finite() {
        return Err(Error::NonFinite("evaluation produced a non-finite metric".into()));
    }
    Ok(())
}
