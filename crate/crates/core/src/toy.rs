//! Synthetic handwriting stand-in: words rendered from an 8×8 bitmap font
//! with per-"writer" glyph transforms and per-sample placement jitter.
//!
//! Everything is drawn on a 4×4-pixel cell grid (16 × 64 cells), which the
//! stub codec represents exactly.

use std::path::{Path, PathBuf};

use font8x8::UnicodeFonts;
use rand::Rng;

use crate::dataset::{Charset, Corpus, DatasetManifest, ManifestEntry, Split, WordSample};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::raster::GrayImage;
use crate::rng;

const CELL: usize = 4;
const GRID_H: usize = 16;
const GRID_W: usize = 64;
const INK: f32 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyStyle {
    Regular,
    Bold,
    Italic,
    Tall,
    BoldItalic,
}

impl ToyStyle {
    pub const ALL: [ToyStyle; 5] = [
        ToyStyle::Regular,
        ToyStyle::Bold,
        ToyStyle::Italic,
        ToyStyle::Tall,
        ToyStyle::BoldItalic,
    ];

    fn glyph_height(self) -> usize {
        if self == ToyStyle::Tall {
            12
        } else {
            8
        }
    }
}

pub const TOY_WORDS: [&str; 10] = [
    "the", "and", "deep", "style", "pen", "ink", "word", "write", "noise", "latent",
];

fn glyph(c: char) -> Result<[u8; 8]> {
    font8x8::BASIC_FONTS
        .get(c)
        .ok_or_else(|| Error::Invalid(format!("no bitmap glyph for {c:?}")))
}

/// Cell-grid bitmap of `word` in `style`, placed at cell offset (dy, dx).
fn render_cells(word: &str, style: ToyStyle, dy: usize, dx: usize) -> Result<Vec<bool>> {
    let mut cells = vec![false; GRID_H * GRID_W];
    let gh = style.glyph_height();
    for (ci, c) in word.chars().enumerate() {
        let g = glyph(c)?;
        for row in 0..gh {
            let src = if gh == 8 { row } else { row * 8 / gh };
            let bits = g[src];
            let shear = match style {
                ToyStyle::Italic | ToyStyle::BoldItalic => (gh - 1 - row) / 2,
                _ => 0,
            };
            for col in 0..8 {
                if bits >> col & 1 == 0 {
                    continue;
                }
                let y = dy + row;
                let mut xs = vec![dx + ci * 8 + col + shear];
                if matches!(style, ToyStyle::Bold | ToyStyle::BoldItalic) {
                    xs.push(xs[0] + 1);
                }
                for x in xs {
                    if y >= GRID_H || x >= GRID_W {
                        return Err(Error::Invalid(format!(
                            "word {word:?} does not fit the canvas in style {style:?}"
                        )));
                    }
                    cells[y * GRID_W + x] = true;
                }
            }
        }
    }
    Ok(cells)
}

/// Canonical 64×256 image of `word`. `jitter` in 0..9 picks one of nine
/// placements.
pub fn render_word(word: &str, style: ToyStyle, jitter: usize) -> Result<GrayImage> {
    let slack = GRID_H - style.glyph_height();
    let dy = slack / 2 - 1 + jitter % 3;
    let dx = (jitter / 3) % 3;
    let cells = render_cells(word, style, dy, dx)?;
    Ok(GrayImage::from_fn(GRID_H * CELL, GRID_W * CELL, |y, x| {
        if cells[(y / CELL) * GRID_W + x / CELL] {
            INK
        } else {
            1.0
        }
    }))
}

#[derive(Debug, Clone)]
pub struct ToySpec {
    /// Writers present in training (at most 4).
    pub seen_writers: usize,
    /// Extra held-out writers (0 or 1).
    pub unseen_writers: usize,
    pub words: Vec<String>,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            seen_writers: 4,
            unseen_writers: 1,
            words: TOY_WORDS.iter().map(|w| w.to_string()).collect(),
            seed: 0,
        }
    }
}

pub fn writer_id(i: usize) -> String {
    format!("w{i:02}")
}

/// `(image, transcription, writer, split)` tuples of the synthetic corpus:
/// every seen writer writes every word once for training and once more
/// (different placement) for the seen-style test split; unseen writers write
/// every word once.
fn toy_samples(spec: &ToySpec) -> Result<Vec<WordSample>> {
    if spec.seen_writers > 4 || spec.unseen_writers > 1 {
        return Err(Error::Config("toy corpus supports up to 4 seen and 1 unseen writers".into()));
    }
    let mut r = rng::seeded(spec.seed);
    let mut out = Vec::new();
    let mut push = |word: &str, w: usize, split: Split, r: &mut rng::Rng| -> Result<()> {
        let jitter = r.random_range(0..9);
        out.push(WordSample {
            image: render_word(word, ToyStyle::ALL[w], jitter)?,
            transcription: word.to_string(),
            writer_id: writer_id(w),
            split,
        });
        Ok(())
    };
    for w in 0..spec.seen_writers {
        for word in &spec.words {
            push(word, w, Split::Train, &mut r)?;
            push(word, w, Split::TestSeenStyle, &mut r)?;
        }
    }
    for u in 0..spec.unseen_writers {
        for word in &spec.words {
            push(word, 4 + u, Split::TestUnseenStyle, &mut r)?;
        }
    }
    Ok(out)
}

pub fn toy_charset(words: &[String]) -> Charset {
    let mut chars: Vec<char> = words.iter().flat_map(|w| w.chars()).collect();
    chars.sort_unstable();
    Charset::new(chars)
}

pub fn toy_corpus(spec: &ToySpec) -> Result<Corpus> {
    Corpus::new(toy_samples(spec)?, toy_charset(&spec.words))
}

/// Writes PNGs, `manifest.tsv` and `charset.txt` under `dir`; returns the
/// manifest path. `tags` go into PNG text chunks and manifest comments.
pub fn write_toy_dataset(dir: &Path, spec: &ToySpec, tags: &[(&str, &str)]) -> Result<PathBuf> {
    let samples = toy_samples(spec)?;
    let charset = toy_charset(&spec.words);
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let rel = PathBuf::from("images").join(format!(
            "{i:04}_{}_{}_{}.png",
            s.writer_id, s.transcription, s.split
        ));
        s.image.save_png(dir.join(&rel), tags)?;
        entries.push(ManifestEntry {
            image_path: dir.join(&rel),
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
    write_atomic(&dir.join("charset.txt"), charset.to_file_text().as_bytes())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{LatentCodec, StubCodec};
    use crate::dataset::is_canonical;

    #[test]
    fn every_word_fits_every_style_and_jitter() {
        for style in ToyStyle::ALL {
            for word in TOY_WORDS.iter().chain(&["abcdefg"]) {
                for j in 0..9 {
                    let img = render_word(word, style, j).unwrap();
                    assert!(is_canonical(&img));
                    assert!(img.pixels().iter().any(|&p| p == INK));
                }
            }
        }
    }

    #[test]
    fn styles_differ_and_codec_is_exact() {
        let a = render_word("deep", ToyStyle::Regular, 4).unwrap();
        let b = render_word("deep", ToyStyle::Bold, 4).unwrap();
        assert_ne!(a, b);
        let back = StubCodec.decode(&StubCodec.encode(&b).unwrap()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn corpus_layout() {
        let c = toy_corpus(&ToySpec::default()).unwrap();
        assert_eq!(c.indices_in(Split::Train).len(), 40);
        assert_eq!(c.indices_in(Split::TestSeenStyle).len(), 40);
        assert_eq!(c.indices_in(Split::TestUnseenStyle).len(), 10);
        assert_eq!(c.train_writers(), vec!["w00", "w01", "w02", "w03"]);
        let again = toy_corpus(&ToySpec::default()).unwrap();
        assert_eq!(c.samples(), again.samples());
    }

    #[test]
    fn dataset_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec {
            seen_writers: 2,
            unseen_writers: 0,
            words: vec!["ink".into(), "pen".into()],
            seed: 1,
        };
        let path = write_toy_dataset(dir.path(), &spec, &[("k", "v")]).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("# k=v\n"));
        let charset = Charset::load(dir.path().join("charset.txt")).unwrap();
        let m = DatasetManifest::load(&path, Some(&charset), 8).unwrap();
        let loaded = Corpus::from_manifest(&m).unwrap();
        let direct = toy_corpus(&spec).unwrap();
        assert_eq!(loaded.samples(), direct.samples());
    }

    #[test]
    fn unknown_glyph_is_an_error() {
        assert!(render_word("ab\u{263A}", ToyStyle::Regular, 0).is_err());
        assert!(render_word("abcdefghijk", ToyStyle::Regular, 0).is_err());
    }
}
