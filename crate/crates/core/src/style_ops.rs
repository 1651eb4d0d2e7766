//! Operations on style vectors and on generated word images: blending,
//! perturbation, noised-exemplar start latents, long-word splitting and
//! horizontal composition.

use rand::Rng;

use crate::codec::{LatentCodec, LatentGrid};
use crate::dataset::{ensure_canonical, CANONICAL_HEIGHT};
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::raster::{GrayImage, BACKGROUND};
use crate::rng::normal_vec;
use crate::style::{check_same_dim, Provenance, StyleEmbedding};

const WEIGHT_SUM_TOL: f64 = 1e-6;

/// Pixels darker than this (ink = 1 − p above 0.5) count as ink when trimming.
pub const INK_THRESHOLD: f32 = 0.5;

pub fn interpolate_styles(a: &StyleEmbedding, b: &StyleEmbedding, w: f64) -> Result<StyleEmbedding> {
    check_same_dim(&[a, b])?;
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Invalid(format!("interpolation weight {w} outside [0, 1]")));
    }
    // Endpoints are returned verbatim so w = 0 / 1 are exact. Inside, the
    // arithmetic is the same as a two-way `mix_styles`, bit for bit.
    let values = if w == 0.0 {
        a.values.clone()
    } else if w == 1.0 {
        b.values.clone()
    } else {
        let (wa, wb) = ((1.0 - w) as f32, w as f32);
        a.values.iter().zip(&b.values).map(|(x, y)| wa * x + wb * y).collect()
    };
    Ok(StyleEmbedding::new(values, Provenance::Interpolated { lambda: w }))
}

/// Convex combination; weights must be non-negative and sum to 1.
pub fn mix_styles(styles: &[StyleEmbedding], weights: &[f64]) -> Result<StyleEmbedding> {
    if styles.is_empty() || styles.len() != weights.len() {
        return Err(Error::Invalid(format!(
            "{} styles but {} weights",
            styles.len(),
            weights.len()
        )));
    }
    let refs: Vec<&StyleEmbedding> = styles.iter().collect();
    let d = check_same_dim(&refs)?;
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Invalid(format!("mixture weights must be non-negative: {weights:?}")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Invalid(format!("mixture weights sum to {sum}, not 1")));
    }
    let mut values = vec![0f32; d];
    for (s, &w) in styles.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let wf = w as f32;
        for (o, v) in values.iter_mut().zip(&s.values) {
            *o += wf * v;
        }
    }
    Ok(StyleEmbedding::new(values, Provenance::Mixed { weights: weights.to_vec() }))
}

/// `S + magnitude·g` with `g ~ N(0, I)` drawn from `rng`.
pub fn perturb_style<R: Rng + ?Sized>(
    style: &StyleEmbedding,
    magnitude: f64,
    rng: &mut R,
) -> Result<StyleEmbedding> {
    if !(magnitude >= 0.0) || !magnitude.is_finite() {
        return Err(Error::Invalid(format!("noise magnitude must be >= 0, got {magnitude}")));
    }
    let g = normal_vec(rng, style.dim());
    let m = magnitude as f32;
    let values: Vec<f32> = style.values.iter().zip(&g).map(|(s, n)| s + m * n).collect();
    let out = StyleEmbedding::new(values, Provenance::Perturbed { sigma: magnitude });
    if !out.is_finite() {
        return Err(Error::NonFinite("perturbed style embedding".into()));
    }
    Ok(out)
}

/// Start latent for the noise-bias path: the exemplar's latent noised to `t_init`.
pub fn noise_bias_init<R: Rng + ?Sized>(
    style_image: &GrayImage,
    t_init: usize,
    codec: &dyn LatentCodec,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentGrid> {
    ensure_canonical(style_image)?;
    schedule.check_step(t_init)?;
    let z0 = codec.encode(style_image)?;
    let eps = normal_vec(rng, z0.values.len());
    let zt = q_sample(&z0.values, t_init, &eps, schedule)?;
    LatentGrid::new(zt, z0.scale_tag)
}

/// Consecutive chunks of at most `max_len` characters.
pub fn segment_long_word(word: &str, max_len: usize) -> Result<Vec<String>> {
    if max_len == 0 {
        return Err(Error::Invalid("max_len must be at least 1".into()));
    }
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return Ok(vec![String::new()]);
    }
    Ok(chars.chunks(max_len).map(|c| c.iter().collect()).collect())
}

/// Random cut points, each piece 1..=max_len characters long.
pub fn segment_long_word_random<R: Rng + ?Sized>(
    word: &str,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<String>> {
    if max_len == 0 {
        return Err(Error::Invalid("max_len must be at least 1".into()));
    }
    let chars: Vec<char> = word.chars().collect();
    if chars.len() <= max_len {
        return Ok(vec![word.to_string()]);
    }
    let mut parts = Vec::new();
    let mut rest = &chars[..];
    while rest.len() > max_len {
        // Keep at least one character per remaining piece.
        let take = rng.random_range(1..=max_len);
        parts.push(rest[..take].iter().collect());
        rest = &rest[take..];
    }
    parts.push(rest.iter().collect());
    Ok(parts)
}

/// Column range `[lo, hi)` containing ink, or `None` for a blank image.
fn ink_columns(img: &GrayImage) -> Option<(usize, usize)> {
    let (h, w) = img.dims();
    let has_ink = |x: usize| (0..h).any(|y| 1.0 - img.get(y, x) > INK_THRESHOLD);
    let lo = (0..w).find(|&x| has_ink(x))?;
    let hi = (0..w).rev().find(|&x| has_ink(x))? + 1;
    Some((lo, hi))
}

/// Trims each image to its ink columns and lays them left to right with
/// `gap_px` background columns in between. Blank images keep their width.
pub fn compose_strip(images: &[GrayImage], gap_px: usize) -> Result<GrayImage> {
    if images.is_empty() {
        return Err(Error::Invalid("compose_strip needs at least one image".into()));
    }
    let mut pieces = Vec::with_capacity(images.len());
    for img in images {
        if img.height() != CANONICAL_HEIGHT {
            return Err(Error::shape(
                format!("height {CANONICAL_HEIGHT}"),
                format!("height {}", img.height()),
            ));
        }
        pieces.push(match ink_columns(img) {
            Some((lo, hi)) => img.crop(0, lo, CANONICAL_HEIGHT, hi - lo),
            None => img.clone(),
        });
    }
    let width = pieces.iter().map(GrayImage::width).sum::<usize>() + gap_px * (pieces.len() - 1);
    let mut out = GrayImage::filled(CANONICAL_HEIGHT, width, BACKGROUND);
    let mut x = 0;
    for p in &pieces {
        out.blit(p, 0, x);
        x += p.width() + gap_px;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::StubCodec;
    use crate::diffusion::make_schedule;
    use crate::rng;
    use crate::toy::{render_word, ToyStyle};
    use proptest::prelude::*;

    fn emb(v: &[f32]) -> StyleEmbedding {
        StyleEmbedding::new(v.to_vec(), Provenance::Single)
    }

    #[test]
    fn interpolation_examples() {
        let a = emb(&[0.0, 2.0]);
        let b = emb(&[2.0, 0.0]);
        assert_eq!(interpolate_styles(&a, &b, 0.0).unwrap().values, a.values);
        assert_eq!(interpolate_styles(&a, &b, 1.0).unwrap().values, b.values);
        let mid = interpolate_styles(&a, &b, 0.5).unwrap();
        assert_eq!(mid.values, vec![1.0, 1.0]);
        assert_eq!(mid.provenance, Provenance::Interpolated { lambda: 0.5 });
        assert!(interpolate_styles(&a, &emb(&[1.0]), 0.5).is_err());
        assert!(interpolate_styles(&a, &b, 1.5).is_err());
    }

    #[test]
    fn mixture_examples() {
        let basis: Vec<StyleEmbedding> = (0..5)
            .map(|i| {
                let mut v = vec![0.0; 5];
                v[i] = 1.0;
                emb(&v)
            })
            .collect();
        let m = mix_styles(&basis, &[0.2; 5]).unwrap();
        for v in &m.values {
            assert!((v - 0.2).abs() < 1e-7);
        }
        let one_hot = mix_styles(&basis, &[0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(one_hot.values, basis[2].values);
        assert!(mix_styles(&basis, &[0.3; 5]).is_err());
        assert!(mix_styles(&basis[..2], &[1.5, -0.5]).is_err());
        assert!(mix_styles(&basis[..2], &[1.0]).is_err());
    }

    #[test]
    fn perturbation_scale() {
        let s = emb(&vec![0.5; 256]);
        assert_eq!(perturb_style(&s, 0.0, &mut rng::seeded(1)).unwrap().values, s.values);
        let a = perturb_style(&s, 0.25, &mut rng::seeded(3)).unwrap();
        let b = perturb_style(&s, 0.25, &mut rng::seeded(3)).unwrap();
        assert_eq!(a, b);
        let dev = |x: &StyleEmbedding| {
            let ss: f32 = x.values.iter().zip(&s.values).map(|(p, q)| (p - q).powi(2)).sum();
            ss.sqrt() / 16.0
        };
        assert!((dev(&a) - 0.25).abs() < 0.05);
        let big = perturb_style(&s, 2.0, &mut rng::seeded(3)).unwrap();
        assert!(dev(&big) > dev(&a));
        assert!(perturb_style(&s, -1.0, &mut rng::seeded(3)).is_err());
    }

    #[test]
    fn noise_bias_limits() {
        let img = render_word("ink", ToyStyle::Bold, 0).unwrap();
        let z0 = StubCodec.encode(&img).unwrap();
        let tiny = make_schedule(10, 1e-9, 1e-9).unwrap();
        let near = noise_bias_init(&img, 1, &StubCodec, &tiny, &mut rng::seeded(0)).unwrap();
        for (a, b) in near.values.iter().zip(&z0.values) {
            assert!((a - b).abs() < 1e-3);
        }
        let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
        let full = noise_bias_init(&img, 1000, &StubCodec, &sched, &mut rng::seeded(4)).unwrap();
        let again = noise_bias_init(&img, 1000, &StubCodec, &sched, &mut rng::seeded(4)).unwrap();
        assert_eq!(full, again);
        // Mean of 1024 draws of N(0,1) has σ = 1/32; the residual signal is
        // √ᾱ_T·mean(z0) ≲ 0.07·1.
        let mean = full.values.iter().sum::<f32>() / full.values.len() as f32;
        let noise_mean = normal_vec(&mut rng::seeded(4), 1024).iter().sum::<f32>() / 1024.0;
        assert!((mean - noise_mean).abs() < 3.0 / 32.0 * 2f32.sqrt());
        assert!(noise_bias_init(&img, 0, &StubCodec, &sched, &mut rng::seeded(0)).is_err());
        assert!(noise_bias_init(&img, 1001, &StubCodec, &sched, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn segmentation_examples() {
        assert_eq!(segment_long_word("the", 32).unwrap(), vec!["the"]);
        let parts = segment_long_word("interoperabilitationism", 10).unwrap();
        assert_eq!(parts, vec!["interopera", "bilitation", "ism"]);
        assert!(segment_long_word("x", 0).is_err());
    }

    #[test]
    fn strip_layout() {
        let mut a = GrayImage::blank(64, 256);
        let mut b = GrayImage::blank(64, 256);
        for y in 0..64 {
            for x in 20..120 {
                a.set(y, x, 0.0);
            }
            b.set(y, 50, 0.0);
            b.set(y, 149, 0.0);
        }
        let s = compose_strip(&[a.clone(), b], 10).unwrap();
        assert_eq!(s.dims(), (64, 210));
        let single = compose_strip(&[a], 0).unwrap();
        assert_eq!(single.dims(), (64, 100));
        assert!(single.pixels().iter().all(|&p| p == 0.0));
        assert!(compose_strip(&[], 3).is_err());
        assert_eq!(compose_strip(&[GrayImage::blank(64, 256)], 0).unwrap().dims(), (64, 256));
    }

    proptest! {
        #[test]
        fn interpolate_is_two_way_mix(
            a in prop::collection::vec(-3f32..3.0, 6),
            b in prop::collection::vec(-3f32..3.0, 6),
            w in 0f64..=1.0,
        ) {
            let (a, b) = (emb(&a), emb(&b));
            let i = interpolate_styles(&a, &b, w).unwrap();
            let m = mix_styles(&[a, b], &[1.0 - w, w]).unwrap();
            for (x, y) in i.values.iter().zip(&m.values) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        #[test]
        fn perturbation_commutes_with_scaling(
            s in prop::collection::vec(-3f32..3.0, 8),
            m in 0f64..4.0,
            seed in any::<u64>(),
        ) {
            let s = emb(&s);
            let out = perturb_style(&s, m, &mut rng::seeded(seed)).unwrap();
            let unit = perturb_style(&emb(&[0.0; 8]), 1.0, &mut rng::seeded(seed)).unwrap();
            for ((o, x), g) in out.values.iter().zip(&s.values).zip(&unit.values) {
                prop_assert!((o - (x + m as f32 * g)).abs() < 1e-5);
            }
        }

        #[test]
        fn segments_reconstruct(word in "\\PC{0,60}", max_len in 1usize..12, seed in any::<u64>()) {
            for parts in [
                segment_long_word(&word, max_len).unwrap(),
                segment_long_word_random(&word, max_len, &mut rng::seeded(seed)).unwrap(),
            ] {
                prop_assert_eq!(parts.concat(), word.clone());
                prop_assert!(parts.iter().all(|p| p.chars().count() <= max_len));
            }
        }
    }
}
