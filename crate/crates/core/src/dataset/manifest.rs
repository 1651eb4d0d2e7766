//! Line-oriented dataset manifests.
//!
//! One record per line, four tab-separated fields:
//! `image_path \t transcription \t writer_id \t split`. Blank lines and lines
//! starting with `#` are ignored. Relative image paths are resolved against
//! the manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_WORD_LENGTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestSeenStyle,
    TestUnseenStyle,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestSeenStyle => "test_seen_style",
            Split::TestUnseenStyle => "test_unseen_style",
        }
    }

    /// Seen-style splits draw from the training writer set.
    pub fn is_seen_writer(self) -> bool {
        !matches!(self, Split::TestUnseenStyle)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test_seen_style" => Ok(Split::TestSeenStyle),
            "test_unseen_style" => Ok(Split::TestUnseenStyle),
            other => Err(format!("unknown split tag {other:?}")),
        }
    }
}

/// Ordered set of permitted characters.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Charset {
    chars: Vec<char>,
}

impl Charset {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Self {
        let mut seen = BTreeSet::new();
        let chars = chars.into_iter().filter(|c| seen.insert(*c)).collect();
        Self { chars }
    }

    /// Parses a charset file: one character per line. A line holding a
    /// single space declares the space character; empty lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut chars = Vec::new();
        for (i, raw) in text.split('\n').enumerate() {
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.is_empty() {
                continue;
            }
            let mut it = line.chars();
            let c = it.next().expect("non-empty");
            if it.next().is_some() {
                return Err(Error::Data(format!(
                    "charset line {}: expected one character, got {line:?}",
                    i + 1
                )));
            }
            chars.push(c);
        }
        Ok(Self::new(chars))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn contains(&self, c: char) -> bool {
        self.chars.contains(&c)
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    /// 1-based class index (0 is reserved for the CTC blank).
    pub fn class_of(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c).map(|i| i + 1)
    }

    pub fn char_of(&self, class: usize) -> Option<char> {
        class.checked_sub(1).and_then(|i| self.chars.get(i).copied())
    }

    /// Stable digest, recorded in checkpoints so models are not silently
    /// reused with a different alphabet.
    pub fn digest(&self) -> String {
        let s: String = self.chars.iter().collect();
        crate::io::sha256_hex(s.as_bytes())
    }

    pub fn to_file_text(&self) -> String {
        self.chars.iter().map(|c| format!("{c}\n")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub transcription: String,
    pub writer_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub charset: Charset,
}

impl DatasetManifest {
    /// Parses manifest text without touching the filesystem. `charset` of
    /// `None` accepts every character and records the ones seen.
    pub fn parse(
        text: &str,
        source: &Path,
        charset: Option<&Charset>,
        max_word_length: usize,
    ) -> Result<Self> {
        let base = source.parent().unwrap_or(Path::new(""));
        let err = |line: usize, message: String| Error::Manifest {
            path: source.to_path_buf(),
            line,
            message,
        };
        let mut entries = Vec::new();
        let mut seen_chars = BTreeSet::new();
        let mut writer_side: BTreeMap<String, (bool, usize)> = BTreeMap::new();
        for (i, raw) in text.split('\n').enumerate() {
            let lineno = i + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(err(
                    lineno,
                    format!("expected 4 tab-separated fields, found {}", fields.len()),
                ));
            }
            let (path, text, writer, split) = (fields[0], fields[1], fields[2], fields[3]);
            if path.is_empty() {
                return Err(err(lineno, "empty image path".into()));
            }
            if writer.is_empty() {
                return Err(err(lineno, "empty writer id".into()));
            }
            let split: Split = split.trim().parse().map_err(|m| err(lineno, m))?;
            let n_chars = text.chars().count();
            if n_chars == 0 {
                return Err(err(lineno, "empty transcription".into()));
            }
            if n_chars > max_word_length {
                return Err(err(
                    lineno,
                    format!("transcription has {n_chars} characters, limit is {max_word_length}"),
                ));
            }
            for c in text.chars() {
                if let Some(cs) = charset {
                    if !cs.contains(c) {
                        return Err(err(
                            lineno,
                            format!("character {c:?} in {text:?} is not in the charset"),
                        ));
                    }
                }
                seen_chars.insert(c);
            }
            let seen = split.is_seen_writer();
            match writer_side.get(writer) {
                Some(&(prev, prev_line)) if prev != seen => {
                    return Err(err(
                        lineno,
                        format!(
                            "writer {writer:?} appears in both the training and unseen writer \
                             sets (first seen on line {prev_line})"
                        ),
                    ));
                }
                Some(_) => {}
                None => {
                    writer_side.insert(writer.to_string(), (seen, lineno));
                }
            }
            entries.push(ManifestEntry {
                image_path: base.join(path),
                transcription: text.to_string(),
                writer_id: writer.to_string(),
                split,
            });
        }
        let charset = match charset {
            Some(cs) => cs.clone(),
            None => Charset::new(seen_chars),
        };
        Ok(Self { entries, charset })
    }

    /// Reads and validates a manifest, including that every image path
    /// points at a readable file.
    pub fn load(
        path: impl AsRef<Path>,
        charset: Option<&Charset>,
        max_word_length: usize,
    ) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest = Self::parse(&text, path, charset, max_word_length)?;
        let mut lineno = 0;
        for (line_idx, raw) in text.split('\n').enumerate() {
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let entry = &manifest.entries[lineno];
            lineno += 1;
            if let Err(e) = std::fs::File::open(&entry.image_path) {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    line: line_idx + 1,
                    message: format!("cannot read image {}: {e}", entry.image_path.display()),
                });
            }
        }
        Ok(manifest)
    }

    /// Serializes back to manifest text with paths relative to `base` where
    /// possible.
    pub fn to_text(&self, base: &Path) -> String {
        self.to_text_tagged(base, &[])
    }

    /// As [`Self::to_text`], preceded by one `# key=value` comment per tag.
    pub fn to_text_tagged(&self, base: &Path, tags: &[(&str, &str)]) -> String {
        let mut out = String::new();
        for (k, v) in tags {
            out.push_str(&format!("# {k}={v}\n"));
        }
        for e in &self.entries {
            let mut p = e.image_path.strip_prefix(base).unwrap_or(&e.image_path).display().to_string();
            // An empty path would be rejected and a leading '#' read as a comment.
            if p.is_empty() || p.starts_with('#') {
                p.insert_str(0, "./");
            }
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                p,
                e.transcription,
                e.writer_id,
                e.split
            ));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, cs: Option<&Charset>) -> Result<DatasetManifest> {
        DatasetManifest::parse(text, Path::new("data/m.tsv"), cs, DEFAULT_MAX_WORD_LENGTH)
    }

    #[test]
    fn awkward_paths_survive_a_round_trip() {
        let text = ".\tab\tw1\ttrain\n./#x.png\tab\tw1\ttrain\n/abs/y.png\tba\tw2\ttrain\n";
        let m = parse(text, None).unwrap();
        let again = parse(&m.to_text(Path::new("data")), Some(&m.charset)).unwrap();
        assert_eq!(again.entries, m.entries);
    }

    #[test]
    fn empty_file_gives_empty_manifest() {
        let m = parse("", None).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn preserves_order_and_resolves_paths() {
        let m = parse(
            "a.png\tthe\tw1\ttrain\nb.png\tof, a\tw2\ttrain\nc.png\tand\tw3\ttest_unseen_style\n",
            None,
        )
        .unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.entries[1].transcription, "of, a");
        assert_eq!(m.entries[0].image_path, Path::new("data/a.png"));
        assert_eq!(m.entries[2].split, Split::TestUnseenStyle);
    }

    #[test]
    fn character_outside_charset_names_line_and_char() {
        let cs = Charset::new("abcdef".chars());
        let err = parse("x.png\tcafé\tw1\ttrain\n", Some(&cs)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":1:"), "{msg}");
        assert!(msg.contains("'é'"), "{msg}");
    }

    #[test]
    fn malformed_and_unknown_split_are_rejected() {
        assert!(matches!(
            parse("a.png\tthe\tw1\n", None),
            Err(Error::Manifest { line: 1, .. })
        ));
        assert!(matches!(
            parse("\na.png\tthe\tw1\tvalidation\n", None),
            Err(Error::Manifest { line: 2, .. })
        ));
    }

    #[test]
    fn writer_cannot_straddle_seen_and_unseen_sets() {
        let text = "a.png\tthe\tw1\ttrain\nb.png\tthe\tw1\ttest_seen_style\nc.png\tof\tw1\ttest_unseen_style\n";
        assert!(matches!(parse(text, None), Err(Error::Manifest { line: 3, .. })));
    }

    #[test]
    fn length_limit_is_enforced() {
        let long = "a".repeat(33);
        assert!(parse(&format!("a.png\t{long}\tw\ttrain\n"), None).is_err());
        let ok = "a".repeat(32);
        assert!(parse(&format!("a.png\t{ok}\tw\ttrain\n"), None).is_ok());
        assert!(parse("a.png\t\tw\ttrain\n", None).is_err());
    }

    #[test]
    fn charset_file_parsing() {
        let cs = Charset::parse("a\nb\n \n\nb\n").unwrap();
        assert_eq!(cs.chars(), &['a', 'b', ' ']);
        assert_eq!(cs.class_of('a'), Some(1));
        assert_eq!(cs.char_of(3), Some(' '));
        assert_eq!(cs.char_of(0), None);
        assert!(Charset::parse("ab\n").is_err());
    }

    #[test]
    fn load_checks_image_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), b"x").unwrap();
        let mpath = dir.path().join("m.tsv");
        std::fs::write(&mpath, "a.png\tthe\tw\ttrain\n# comment\nmissing.png\tof\tw\ttrain\n")
            .unwrap();
        let err = DatasetManifest::load(&mpath, None, 32).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 3, .. }), "{err}");
    }
}
