//! Grayscale rasters with values in `[0, 1]`, where `1.0` is paper white.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Paper-white background value used for padding and empty canvases.
pub const BACKGROUND: f32 = 1.0;

pub const MAX_DECODE_SIDE: u32 = 8192;
const MAX_DECODE_BYTES: u64 = 256 << 20;

/// Row-major grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Self::filled(height, width, BACKGROUND)
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                format!("{} pixels", height * width),
                format!("{} pixels", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Copies `src` into `self` with its top-left corner at `(y0, x0)`,
    /// clipping whatever falls outside.
    pub fn blit(&mut self, src: &GrayImage, y0: usize, x0: usize) {
        for y in 0..src.height.min(self.height.saturating_sub(y0)) {
            for x in 0..src.width.min(self.width.saturating_sub(x0)) {
                self.set(y0 + y, x0 + x, src.get(y, x));
            }
        }
    }

    /// Sub-image `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> GrayImage {
        GrayImage::from_fn(h, w, |y, x| self.get(y0 + y, x0 + x))
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Decodes an encoded image (PNG, or any format enabled in `image`).
    /// RGB input is reduced to gray by averaging the three channels.
    /// Images wider or taller than `MAX_DECODE_SIDE` are refused before any
    /// pixel buffer is allocated.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut reader = image::ImageReader::new(std::io::Cursor::new(bytes)).with_guessed_format()
            .map_err(|e| Error::io("<memory>", e))?;
        let mut limits = image::Limits::default();
        limits.max_image_width = Some(MAX_DECODE_SIDE);
        limits.max_image_height = Some(MAX_DECODE_SIDE);
        limits.max_alloc = Some(MAX_DECODE_BYTES);
        reader.limits(limits);
        Ok(Self::from_dynamic(&reader.decode()?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    fn from_dynamic(img: &image::DynamicImage) -> Self {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb
            .pixels()
            .map(|p| (p[0] as f32 + p[1] as f32 + p[2] as f32) / (3.0 * 255.0))
            .collect();
        Self {
            height: h as usize,
            width: w as usize,
            data,
        }
    }

    /// Quantizes to 8 bits.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Encodes as an 8-bit grayscale PNG; `text` entries become `tEXt` chunks.
    pub fn encode_png(&self, text: &[(&str, &str)]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            for (k, v) in text {
                enc.add_text_chunk(k.to_string(), v.to_string())
                    .map_err(|e| Error::Data(format!("png text chunk: {e}")))?;
            }
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::Data(format!("png header: {e}")))?;
            writer
                .write_image_data(&self.to_u8())
                .map_err(|e| Error::Data(format!("png data: {e}")))?;
        }
        Ok(out)
    }

    pub fn save_png(&self, path: impl AsRef<Path>, text: &[(&str, &str)]) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode_png(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let img = GrayImage::from_fn(3, 5, |y, x| ((y * 5 + x) as f32) / 14.0);
        let bytes = img.encode_png(&[("config-hash", "abc")]).unwrap();
        let back = GrayImage::decode(&bytes).unwrap();
        assert_eq!(back.dims(), (3, 5));
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn rgb_is_averaged() {
        let mut buf = image::RgbImage::new(1, 1);
        buf.put_pixel(0, 0, image::Rgb([255, 0, 0]));
        let img = GrayImage::from_dynamic(&image::DynamicImage::ImageRgb8(buf));
        assert!((img.get(0, 0) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(GrayImage::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
