//! Edit-distance error rates.

use crate::error::{Error, Result};

/// Levenshtein distance with unit costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character edit distance over reference length.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(Error::Invalid("CER needs a non-empty reference".into()));
    }
    let h: Vec<char> = hypothesis.chars().collect();
    Ok(levenshtein(&r, &h) as f64 / r.len() as f64)
}

/// Word edit distance over reference word count.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Invalid("WER needs a non-empty reference".into()));
    }
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    Ok(levenshtein(&r, &h) as f64 / r.len() as f64)
}

/// Aggregate rates over a set of word images: total edits over total
/// reference length for CER, and the exact-match error for WER.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRates {
    pub cer: f64,
    pub wer: f64,
}

pub fn corpus_error_rates<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<ErrorRates> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no transcriptions to score".into()));
    }
    let (mut edits, mut chars, mut word_err) = (0usize, 0usize, 0.0);
    for (r, h) in pairs {
        let rc: Vec<char> = r.as_ref().chars().collect();
        if rc.is_empty() {
            return Err(Error::Invalid("empty reference transcription".into()));
        }
        let hc: Vec<char> = h.as_ref().chars().collect();
        edits += levenshtein(&rc, &hc);
        chars += rc.len();
        word_err += wer(&[r.as_ref()], &[h.as_ref()])?;
    }
    Ok(ErrorRates {
        cer: edits as f64 / chars as f64,
        wer: word_err / pairs.len() as f64,
    })
}
