use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scribe_core::grid::{GridLabels, GridLayout};
use scribe_core::raster::GrayImage;

// Small enough that the whole train/sample/evaluate loop runs in seconds.
const TINY: &str = r#"
[style]
embed_dim = 16
widths = [8, 8, 8, 8]
epochs = 1
steps_per_epoch = 1
batch_size = 4

[text]
hash_buckets = 32
char_dim = 8
hidden = 8
layers = 1

[diffusion]
timesteps = 20
d_model = 16
widths = [8, 8, 8]
heads = 2
batch_size = 2
train_steps = 2
checkpoint_every = 0

[sampler]
steps = 3
batch_size = 8

[eval]
metrics = ["fid", "mssim", "rmse"]
"#;

fn scribe(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scribe"))
        .args(args)
        .env("SCRIBE_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> Output {
    let out = scribe(root, args);
    assert!(
        out.status.success(),
        "scribe {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(root: &Path, args: &[&str]) -> i32 {
    scribe(root, args).status.code().expect("exited normally")
}

fn only_png(dir: &Path) -> PathBuf {
    let pngs: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    assert_eq!(pngs.len(), 1, "{pngs:?}");
    pngs.into_iter().next().unwrap()
}

fn contains(haystack: &[u8], needle: &str) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle.as_bytes())
}

#[test]
fn help_lists_commands_precedence_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in [
        "train-style",
        "train-diffusion",
        "sample",
        "interpolate",
        "mix",
        "regenerate",
        "evaluate",
        "compose",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from --help");
    }
    assert!(text.contains("precedence"));
    assert!(text.contains("Exit codes"));
    assert!(text.contains("SCRIBE_ROOT"));
}

#[test]
fn error_classes_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(code(root, &["--set", "style.margn=1", "synth"]), 2);
    assert_eq!(code(root, &["--config", "/no/such/config.toml", "synth"]), 2);
    assert_eq!(code(root, &["train-style"]), 2);
    assert_eq!(code(root, &["--set", "sampler.steps=0", "synth"]), 2);
    assert_eq!(code(root, &["train-style", "--manifest", "/no/such/manifest.tsv"]), 3);
    let junk = root.join("junk.safetensors");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = junk.to_str().unwrap();
    assert_eq!(
        code(root, &["sample", "--text", "ink", "--writer", "w00", "--style-ckpt", junk, "--diffusion-ckpt", junk]),
        4
    );
}

#[test]
fn toy_workflow_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let cfg = config.to_str().unwrap();
    let common = ["--preset", "toy", "--config", cfg, "--seed", "3"];
    let run = |args: &[&str]| ok(root, &[&common[..], args].concat());

    run(&["synth", "--out", "toy", "--seen", "2", "--unseen", "0"]);
    let manifest = root.join("toy/manifest.tsv");
    let manifest_before = std::fs::read(&manifest).unwrap();
    assert!(contains(&manifest_before, "scribe:config_hash"));
    let m = manifest.to_str().unwrap();

    run(&["train-style", "--manifest", m]);
    assert!(root.join("checkpoints/style.safetensors").is_file());
    let losses: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.join("checkpoints/style.losses.json")).unwrap()).unwrap();
    assert_eq!(losses["epochs"].as_array().unwrap().len(), 1);

    run(&["train-diffusion", "--manifest", m]);
    let diffusion = root.join("checkpoints/diffusion.safetensors");
    let diffusion_before = std::fs::read(&diffusion).unwrap();

    // Inputs are never overwritten in place.
    let d = diffusion.to_str().unwrap();
    assert_eq!(code(root, &[&common[..], &["train-diffusion", "--manifest", m, "--resume", d]].concat()), 2);
    run(&["train-diffusion", "--manifest", m, "--resume", d, "--steps", "3", "--out", "checkpoints/resumed.safetensors"]);
    let resumed: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.join("checkpoints/resumed.losses.json")).unwrap()).unwrap();
    assert_eq!(resumed["losses"].as_array().unwrap().len(), 3);

    // Same seed, same bytes.
    run(&["sample", "--manifest", m, "--writer", "w00", "--text", "deep", "--out", "s1"]);
    run(&["sample", "--manifest", m, "--writer", "w00", "--text", "deep", "--out", "s2"]);
    let s1 = only_png(&root.join("s1"));
    assert_eq!(s1.file_name().unwrap(), "deep_w00_k5_3.png");
    let bytes = std::fs::read(&s1).unwrap();
    assert_eq!(bytes, std::fs::read(only_png(&root.join("s2"))).unwrap());
    assert!(contains(&bytes, "scribe:config_hash"));
    let pure_a = GrayImage::load(&s1).unwrap();
    run(&["sample", "--manifest", m, "--writer", "w01", "--text", "deep", "--out", "s3"]);
    let pure_b = GrayImage::load(only_png(&root.join("s3"))).unwrap();

    // Sweep endpoints are the pure-style samples.
    run(&["interpolate", "--manifest", m, "--style-a", "w00", "--style-b", "w01", "--weights", "0,0.5,1", "--words", "deep", "--out", "interp"]);
    let grid = GrayImage::load(root.join("interp/deep_w00-w01_interp-k5_3.png")).unwrap();
    let labels = GridLabels {
        rows: vec!["deep".into()],
        cols: vec!["0".into(), "0.5".into(), "1".into()],
    };
    let layout = GridLayout::new(1, 3, 4, &labels);
    assert_eq!(grid.dims(), (layout.height(), layout.width()));
    let cell = |c: usize| {
        let (y, x) = layout.cell_origin(0, c);
        grid.crop(y, x, 64, 256)
    };
    assert_eq!(cell(0), pure_a);
    assert_eq!(cell(2), pure_b);

    // A one-hot mixture is the pure style.
    run(&["mix", "--manifest", m, "--styles", "w00,w01", "--weights", "1,0", "--words", "ink", "--out", "mix"]);
    let grid = GrayImage::load(root.join("mix/ink_w00+w01_mix-k5_3.png")).unwrap();
    let labels = GridLabels {
        rows: vec!["ink".into()],
        cols: vec!["w00".into(), "w01".into(), "mix".into()],
    };
    let layout = GridLayout::new(1, 3, 4, &labels);
    let (y0, x0) = layout.cell_origin(0, 0);
    let (y2, x2) = layout.cell_origin(0, 2);
    assert_eq!(grid.crop(y0, x0, 64, 256), grid.crop(y2, x2, 64, 256));

    run(&["compose", "--manifest", m, "--style", "w01", "--words", "the interoperable pen", "--out", "compose"]);
    let strip = GrayImage::load(only_png(&root.join("compose"))).unwrap();
    assert_eq!(strip.height(), 64);

    // Style directories work as well as writer ids.
    let style_dir = root.join("w01-dir");
    std::fs::create_dir_all(&style_dir).unwrap();
    for (i, e) in std::fs::read_dir(root.join("toy/images")).unwrap().enumerate() {
        let p = e.unwrap().path();
        if p.to_string_lossy().contains("_w01_") {
            std::fs::copy(&p, style_dir.join(format!("{i:03}.png"))).unwrap();
        }
    }
    run(&["sample", "--style-dir", style_dir.to_str().unwrap(), "--text", "ink", "--style-noise", "0.25", "--noise-bias", "--out", "dir"]);
    assert_eq!(only_png(&root.join("dir")).file_name().unwrap(), "ink_w01-dir_k5-noise0.25-bias20_3.png");

    run(&["regenerate", "--manifest", m, "--out", "regen1"]);
    run(&["regenerate", "--manifest", m, "--out", "regen2"]);
    let g1 = std::fs::read(root.join("regen1/manifest.tsv")).unwrap();
    let g1_text = String::from_utf8_lossy(&g1);
    assert_eq!(g1_text.lines().filter(|l| !l.starts_with('#')).count(), 20);
    let g2 = std::fs::read(root.join("regen2/manifest.tsv")).unwrap();
    assert_eq!(g1_text.replace("regen1", ""), String::from_utf8_lossy(&g2).replace("regen2", ""));
    for e in std::fs::read_dir(root.join("regen1/images")).unwrap() {
        let p = e.unwrap().path();
        let twin = root.join("regen2/images").join(p.file_name().unwrap());
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(twin).unwrap());
    }
    let failures: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.join("regen1/failures.json")).unwrap()).unwrap();
    assert_eq!(failures["failures"].as_array().unwrap().len(), 0);

    // Real against itself scores as identical.
    run(&["evaluate", "--real-manifest", m, "--gen-manifest", m, "--report", "same.json"]);
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(root.join("same.json")).unwrap()).unwrap();
    assert!(rep["fid"].as_f64().unwrap().abs() < 1e-6);
    assert_eq!(rep["mssim"].as_f64().unwrap(), 1.0);
    assert_eq!(rep["rmse"].as_f64().unwrap(), 0.0);
    assert!(rep["config_hash"].as_str().is_some_and(|h| !h.is_empty()));
    let regen = root.join("regen1/manifest.tsv");
    run(&["evaluate", "--real-manifest", m, "--gen-manifest", regen.to_str().unwrap(), "--report", "regen.json"]);
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(root.join("regen.json")).unwrap()).unwrap();
    assert!(rep["fid"].as_f64().unwrap() > 0.0);

    assert_eq!(std::fs::read(&manifest).unwrap(), manifest_before);
    assert_eq!(std::fs::read(&diffusion).unwrap(), diffusion_before);
}
