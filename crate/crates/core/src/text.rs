//! Character-level text conditioning.
//!
//! Words become fixed-length codepoint sequences (no vocabulary); a
//! character encoder turns them into per-position vectors which a projector
//! maps to the denoiser width.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::VarBuilder;

use crate::config::TextConfig;
use crate::error::{Error, Result};
use crate::nn::BiGru;
use crate::style::Projector;

pub const PAD_ID: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenizedText {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
}

impl TokenizedText {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Number of real characters.
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Codepoint ids padded with `PAD_ID` to `max_len`.
pub fn tokenize(text: &str, max_len: usize) -> Result<TokenizedText> {
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Err(Error::Invalid("cannot tokenize an empty string".into()));
    }
    if chars.len() > max_len {
        return Err(Error::Invalid(format!(
            "{text:?} has {} characters, more than the maximum {max_len}; segment it first",
            chars.len()
        )));
    }
    if chars.contains(&'\0') {
        return Err(Error::Invalid("NUL collides with the padding id".into()));
    }
    let mut ids = vec![PAD_ID; max_len];
    let mut mask = vec![0u8; max_len];
    for (i, c) in chars.iter().enumerate() {
        ids[i] = *c as u32;
        mask[i] = 1;
    }
    Ok(TokenizedText { ids, mask })
}

pub fn detokenize(tokens: &TokenizedText) -> String {
    tokens
        .ids
        .iter()
        .zip(&tokens.mask)
        .filter(|(_, &m)| m == 1)
        .filter_map(|(&id, _)| char::from_u32(id))
        .collect()
}

/// Maps token sequences to `(B, L, D)` per-position features.
pub trait CharEncoder: Send + Sync {
    fn output_dim(&self) -> usize;
    fn max_len(&self) -> usize;
    fn forward(&self, tokens: &[&TokenizedText]) -> Result<Tensor>;
}

const HASH_MULTIPLIERS: [u64; 2] = [0x9E37_79B1, 0x85EB_CA77];

/// Bucket of `id` under hash function `which`. Pad always lands in bucket 0
/// of each table.
pub fn hash_bucket(id: u32, which: usize, buckets: usize) -> usize {
    if id == PAD_ID {
        return 0;
    }
    let h = (id as u64).wrapping_mul(HASH_MULTIPLIERS[which]) >> 7;
    1 + (h % (buckets as u64 - 1)) as usize
}

/// Vocabulary-free encoder: the sum of two hashed codepoint embeddings plus
/// a learned position embedding, followed by a bidirectional GRU stack.
pub struct HashedCharEncoder {
    tables: Vec<candle_nn::Embedding>,
    position: Tensor,
    rnn: BiGru,
    buckets: usize,
    max_len: usize,
}

impl HashedCharEncoder {
    pub fn new(config: &TextConfig, max_len: usize, vb: VarBuilder) -> Result<Self> {
        if config.hash_buckets < 2 {
            return Err(Error::Config("text.hash_buckets must be at least 2".into()));
        }
        let init = candle_nn::Init::Randn {
            mean: 0.0,
            stdev: 1.0 / (config.char_dim as f64).sqrt(),
        };
        let tables = (0..HASH_MULTIPLIERS.len())
            .map(|i| {
                let w = vb.get_with_hints(
                    (config.hash_buckets, config.char_dim),
                    &format!("hash{i}"),
                    init,
                )?;
                Ok(candle_nn::Embedding::new(w, config.char_dim))
            })
            .collect::<Result<Vec<_>>>()?;
        let position = vb.get_with_hints((max_len, config.char_dim), "position", init)?;
        let rnn = BiGru::new(config.char_dim, config.hidden, config.layers, vb.pp("rnn"))?;
        Ok(Self {
            tables,
            position,
            rnn,
            buckets: config.hash_buckets,
            max_len,
        })
    }
}

impl CharEncoder for HashedCharEncoder {
    fn output_dim(&self) -> usize {
        self.rnn.output_dim()
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn forward(&self, tokens: &[&TokenizedText]) -> Result<Tensor> {
        if let Some(t) = tokens.iter().find(|t| t.max_len() != self.max_len) {
            return Err(Error::shape(
                format!("token length {}", self.max_len),
                format!("{}", t.max_len()),
            ));
        }
        let b = tokens.len();
        let mut x: Option<Tensor> = None;
        for (which, table) in self.tables.iter().enumerate() {
            let idx: Vec<u32> = tokens
                .iter()
                .flat_map(|t| t.ids.iter().map(|&id| hash_bucket(id, which, self.buckets) as u32))
                .collect();
            let idx = Tensor::from_vec(idx, (b, self.max_len), &Device::Cpu)?;
            let e = table.forward(&idx)?;
            x = Some(match x {
                None => e,
                Some(acc) => (acc + e)?,
            });
        }
        let x = x.expect("at least one table").broadcast_add(&self.position)?;
        self.rnn.forward(&x)
    }
}

/// `(L_max, d_model)` condition plus the attention mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCondition {
    pub values: Vec<Vec<f32>>,
    pub mask: Vec<u8>,
}

/// Encodes one token sequence and projects every position.
pub fn encode_text(
    tokens: &TokenizedText,
    encoder: &dyn CharEncoder,
    projector: &Projector,
) -> Result<TextCondition> {
    if encoder.output_dim() != projector.in_dim() {
        return Err(Error::shape(
            format!("projector input {}", projector.in_dim()),
            format!("encoder output {}", encoder.output_dim()),
        ));
    }
    let h = encoder.forward(&[tokens])?;
    let out = projector.forward(&h)?.squeeze(0)?.to_dtype(DType::F32)?;
    Ok(TextCondition {
        values: out.to_vec2()?,
        mask: tokens.mask.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_builder;
    use proptest::prelude::*;

    fn small_encoder(seed: u64) -> HashedCharEncoder {
        let (_m, vb) = seeded_builder(seed, DType::F32);
        let cfg = TextConfig {
            hash_buckets: 64,
            char_dim: 8,
            hidden: 6,
            layers: 2,
        };
        HashedCharEncoder::new(&cfg, 8, vb).unwrap()
    }

    #[test]
    fn codepoints_and_padding() {
        let t = tokenize("the", 8).unwrap();
        assert_eq!(t.ids, vec![116, 104, 101, 0, 0, 0, 0, 0]);
        assert_eq!(t.mask, vec![1, 1, 1, 0, 0, 0, 0, 0]);
        let a = tokenize("a", 8).unwrap();
        assert_eq!(a.len(), 1);
        assert!(tokenize("", 8).is_err());
        assert!(tokenize("abcdefghi", 8).is_err());
    }

    #[test]
    fn pad_bucket_is_reserved() {
        for id in [1u32, 97, 0x10FFFF] {
            for w in 0..2 {
                let b = hash_bucket(id, w, 64);
                assert!((1..64).contains(&b));
            }
        }
        assert_eq!(hash_bucket(PAD_ID, 1, 64), 0);
    }

    #[test]
    fn condition_shape_is_fixed_and_deterministic() {
        let enc = small_encoder(1);
        let (_m, vb) = seeded_builder(2, DType::F32);
        let proj = Projector::new(enc.output_dim(), 5, vb).unwrap();
        for w in ["a", "deep", "abcdefgh"] {
            let t = tokenize(w, 8).unwrap();
            let c = encode_text(&t, &enc, &proj).unwrap();
            assert_eq!(c.values.len(), 8);
            assert!(c.values.iter().all(|r| r.len() == 5 && r.iter().all(|v| v.is_finite())));
            assert_eq!(c, encode_text(&t, &enc, &proj).unwrap());
        }
    }

    #[test]
    fn one_character_change_moves_that_position() {
        let enc = small_encoder(3);
        let proj = Projector::identity(enc.output_dim()).unwrap();
        let a = encode_text(&tokenize("deep", 8).unwrap(), &enc, &proj).unwrap();
        let b = encode_text(&tokenize("deer", 8).unwrap(), &enc, &proj).unwrap();
        assert_ne!(a.values[3], b.values[3]);
    }

    #[test]
    fn zero_projector_gives_zero_condition() {
        let enc = small_encoder(4);
        let d = enc.output_dim();
        let proj = Projector::from_weights(
            Tensor::zeros((3, d), DType::F32, &Device::Cpu).unwrap(),
            Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap(),
        )
        .unwrap();
        let c = encode_text(&tokenize("ink", 8).unwrap(), &enc, &proj).unwrap();
        assert!(c.values.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn projector_mismatch_is_rejected() {
        let enc = small_encoder(5);
        let proj = Projector::identity(enc.output_dim() + 1).unwrap();
        assert!(encode_text(&tokenize("ink", 8).unwrap(), &enc, &proj).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(s in "[a-zA-Z0-9 .,'é]{1,12}") {
            let t = tokenize(&s, 12).unwrap();
            prop_assert_eq!(detokenize(&t), s.clone());
            prop_assert_eq!(t.ids.len(), 12);
            let n = s.chars().count();
            prop_assert!(t.mask[..n].iter().all(|&m| m == 1));
            prop_assert!(t.mask[n..].iter().all(|&m| m == 0));
        }

        #[test]
        fn injective_on_equal_lengths(a in "[a-z]{4}", b in "[a-z]{4}") {
            let (ta, tb) = (tokenize(&a, 4).unwrap(), tokenize(&b, 4).unwrap());
            prop_assert_eq!(a == b, ta.ids == tb.ids);
        }
    }
}
