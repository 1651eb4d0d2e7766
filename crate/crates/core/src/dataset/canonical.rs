//! Canonical word-image geometry.
//!
//! Images are scaled to a height of 64 keeping their aspect ratio and padded
//! on the right with background to a width of 256. Words too wide for that
//! are instead scaled to a width of 256 and padded at the bottom. Scaled
//! dimensions are floored. Resampling uses an area-average (box) kernel,
//! which is exact for integer up-scaling.

use crate::error::{Error, Result};
use crate::raster::GrayImage;

pub const CANONICAL_HEIGHT: usize = 64;
pub const CANONICAL_WIDTH: usize = 256;

pub fn is_canonical(img: &GrayImage) -> bool {
    img.dims() == (CANONICAL_HEIGHT, CANONICAL_WIDTH)
}

pub fn ensure_canonical(img: &GrayImage) -> Result<()> {
    if is_canonical(img) {
        Ok(())
    } else {
        Err(Error::shape(
            format!("{CANONICAL_HEIGHT}x{CANONICAL_WIDTH} image"),
            format!("{}x{} image", img.height(), img.width()),
        ))
    }
}

/// Size the raw image occupies on the canonical canvas before padding.
pub fn scaled_size(height: usize, width: usize) -> Result<(usize, usize)> {
    if height == 0 || width == 0 {
        return Err(Error::Invalid(format!(
            "cannot canonicalize a zero-area image ({height}x{width})"
        )));
    }
    let h = height as u128;
    let w = width as u128;
    let first_width = (w * CANONICAL_HEIGHT as u128 / h).max(1);
    if first_width <= CANONICAL_WIDTH as u128 {
        return Ok((CANONICAL_HEIGHT, first_width as usize));
    }
    let shrunk_height = (h * CANONICAL_WIDTH as u128 / w).max(1);
    Ok((shrunk_height as usize, CANONICAL_WIDTH))
}

pub fn canonicalize_image(raw: &GrayImage) -> Result<GrayImage> {
    let (h, w) = scaled_size(raw.height(), raw.width())?;
    if is_canonical(raw) {
        return Ok(raw.clone().clamp01());
    }
    let scaled = resize_area(raw, h, w).clamp01();
    let mut out = GrayImage::blank(CANONICAL_HEIGHT, CANONICAL_WIDTH);
    out.blit(&scaled, 0, 0);
    debug_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    Ok(out)
}

/// Box-filter resampling: every output pixel is the coverage-weighted mean of
/// the source pixels under its footprint.
pub fn resize_area(src: &GrayImage, out_h: usize, out_w: usize) -> GrayImage {
    let rows = axis_weights(src.height(), out_h);
    let cols = axis_weights(src.width(), out_w);
    // Horizontal pass then vertical pass.
    let mut tmp = vec![0.0f64; src.height() * out_w];
    for y in 0..src.height() {
        for (x, taps) in cols.iter().enumerate() {
            let mut acc = 0.0;
            for &(sx, wgt) in taps {
                acc += wgt * src.get(y, sx) as f64;
            }
            tmp[y * out_w + x] = acc;
        }
    }
    GrayImage::from_fn(out_h, out_w, |y, x| {
        let mut acc = 0.0;
        for &(sy, wgt) in &rows[y] {
            acc += wgt * tmp[sy * out_w + x];
        }
        acc as f32
    })
}

fn axis_weights(src_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src_len);
            let mut taps = Vec::with_capacity(last - first);
            for s in first..last {
                let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((s, overlap / scale));
                }
            }
            taps
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::BACKGROUND;
    use proptest::prelude::*;

    fn gradient(h: usize, w: usize) -> GrayImage {
        GrayImage::from_fn(h, w, |y, x| ((y * 7 + x * 3) % 11) as f32 / 10.0)
    }

    #[test]
    fn canonical_input_is_identity() {
        let img = gradient(64, 256);
        assert_eq!(canonicalize_image(&img).unwrap(), img);
    }

    #[test]
    fn narrow_word_is_scaled_to_height_then_right_padded() {
        assert_eq!(scaled_size(128, 300).unwrap(), (64, 150));
        let img = GrayImage::filled(128, 300, 0.0);
        let out = canonicalize_image(&img).unwrap();
        assert_eq!(out.dims(), (64, 256));
        assert_eq!(out.get(63, 149), 0.0);
        assert_eq!(out.get(0, 150), BACKGROUND);
        assert_eq!(out.get(63, 255), BACKGROUND);
    }

    #[test]
    fn wide_word_is_shrunk_to_width_then_bottom_padded() {
        // 32x400 -> 64x800 -> shrink by 800/256 -> 20.48 rows, floored.
        assert_eq!(scaled_size(32, 400).unwrap(), (20, 256));
        let img = GrayImage::filled(32, 400, 0.0);
        let out = canonicalize_image(&img).unwrap();
        assert_eq!(out.get(19, 255), 0.0);
        assert_eq!(out.get(20, 0), BACKGROUND);
    }

    #[test]
    fn zero_area_is_rejected() {
        assert!(canonicalize_image(&GrayImage::blank(0, 10)).is_err());
        assert!(canonicalize_image(&GrayImage::blank(10, 0)).is_err());
    }

    #[test]
    fn integer_upscale_replicates_pixels() {
        let src = GrayImage::from_fn(2, 3, |y, x| (y * 3 + x) as f32 / 5.0);
        let up = resize_area(&src, 4, 6);
        for y in 0..4 {
            for x in 0..6 {
                assert!((up.get(y, x) - src.get(y / 2, x / 2)).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn canonicalization_is_idempotent_and_bounded(h in 1usize..160, w in 1usize..700, seed in 0u64..1000) {
            let img = GrayImage::from_fn(h, w, |y, x| (((y * 31 + x * 17) as u64 ^ seed) % 101) as f32 / 100.0);
            let once = canonicalize_image(&img).unwrap();
            prop_assert_eq!(once.dims(), (64, 256));
            prop_assert!(once.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            let twice = canonicalize_image(&once).unwrap();
            prop_assert_eq!(&once, &twice);
            let (sh, sw) = scaled_size(h, w).unwrap();
            for y in 0..64 {
                for x in 0..256 {
                    if y >= sh || x >= sw {
                        prop_assert_eq!(once.get(y, x), BACKGROUND);
                    }
                }
            }
        }
    }
}
