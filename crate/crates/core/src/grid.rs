//! Labelled image grids for sweeps and comparisons.

use font8x8::UnicodeFonts;

use crate::dataset::{CANONICAL_HEIGHT, CANONICAL_WIDTH};
use crate::error::{Error, Result};
use crate::raster::{GrayImage, BACKGROUND};

const GLYPH: usize = 8;
/// Height of the column-header band when column labels are present.
pub const HEADER_HEIGHT: usize = 2 * GLYPH;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridLabels {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
    pub pad: usize,
    pub left: usize,
    pub top: usize,
}

impl GridLayout {
    pub fn new(rows: usize, cols: usize, pad: usize, labels: &GridLabels) -> Self {
        let longest = labels.rows.iter().map(|l| l.chars().count()).max().unwrap_or(0);
        Self {
            rows,
            cols,
            pad,
            left: if labels.rows.is_empty() { 0 } else { (longest + 1) * GLYPH },
            top: if labels.cols.is_empty() { 0 } else { HEADER_HEIGHT },
        }
    }

    pub fn height(&self) -> usize {
        self.top + self.rows * (CANONICAL_HEIGHT + self.pad)
    }

    pub fn width(&self) -> usize {
        self.left + self.cols * (CANONICAL_WIDTH + self.pad)
    }

    /// Top-left corner of cell `(r, c)`.
    pub fn cell_origin(&self, r: usize, c: usize) -> (usize, usize) {
        (
            self.top + r * (CANONICAL_HEIGHT + self.pad),
            self.left + c * (CANONICAL_WIDTH + self.pad),
        )
    }
}

/// Draws `text` in the 8×8 bitmap font with its top-left at `(y, x)`,
/// clipped to the canvas. Characters without a glyph print as `?`.
pub fn draw_text(canvas: &mut GrayImage, text: &str, y: usize, x: usize) {
    for (i, c) in text.chars().enumerate() {
        let g = font8x8::BASIC_FONTS
            .get(c)
            .or_else(|| font8x8::BASIC_FONTS.get('?'))
            .unwrap_or([0; 8]);
        for (row, bits) in g.iter().enumerate() {
            for col in 0..GLYPH {
                let (py, px) = (y + row, x + i * GLYPH + col);
                if bits >> col & 1 == 1 && py < canvas.height() && px < canvas.width() {
                    canvas.set(py, px, 0.0);
                }
            }
        }
    }
}

/// Lays a rectangular matrix of canonical images on one canvas with
/// optional row labels (left) and column labels (top).
pub fn emit_grid(images: &[Vec<GrayImage>], labels: &GridLabels, pad: usize) -> Result<GrayImage> {
    let rows = images.len();
    let cols = images.first().map(Vec::len).unwrap_or(0);
    if rows == 0 || cols == 0 {
        return Err(Error::Invalid("grid needs at least one image".into()));
    }
    if let Some(r) = images.iter().position(|row| row.len() != cols) {
        return Err(Error::Invalid(format!(
            "ragged grid: row {r} has {} images, row 0 has {cols}",
            images[r].len()
        )));
    }
    if !labels.rows.is_empty() && labels.rows.len() != rows {
        return Err(Error::Invalid(format!("{} row labels for {rows} rows", labels.rows.len())));
    }
    if !labels.cols.is_empty() && labels.cols.len() != cols {
        return Err(Error::Invalid(format!("{} column labels for {cols} columns", labels.cols.len())));
    }
    let layout = GridLayout::new(rows, cols, pad, labels);
    let mut canvas = GrayImage::filled(layout.height(), layout.width(), BACKGROUND);
    for (r, row) in images.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if img.dims() != (CANONICAL_HEIGHT, CANONICAL_WIDTH) {
                return Err(Error::shape(
                    format!("{CANONICAL_HEIGHT}x{CANONICAL_WIDTH}"),
                    format!("{:?} at ({r}, {c})", img.dims()),
                ));
            }
            let (y, x) = layout.cell_origin(r, c);
            canvas.blit(img, y, x);
        }
    }
    for (r, label) in labels.rows.iter().enumerate() {
        let (y, _) = layout.cell_origin(r, 0);
        draw_text(&mut canvas, label, y + (CANONICAL_HEIGHT - GLYPH) / 2, 0);
    }
    for (c, label) in labels.cols.iter().enumerate() {
        let (_, x) = layout.cell_origin(0, c);
        draw_text(&mut canvas, label, (HEADER_HEIGHT - GLYPH) / 2, x);
    }
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(v: f32) -> GrayImage {
        GrayImage::filled(CANONICAL_HEIGHT, CANONICAL_WIDTH, v)
    }

    #[test]
    fn single_cell_with_labels() {
        let labels = GridLabels {
            rows: vec!["w01".into()],
            cols: vec!["0.5".into()],
        };
        let g = emit_grid(&[vec![cell(0.3)]], &labels, 4).unwrap();
        assert_eq!(g.dims(), (HEADER_HEIGHT + 68, 32 + 260));
        assert_eq!(g.get(HEADER_HEIGHT, 32), 0.3);
        // Some header and row-label pixels are inked.
        assert!((0..HEADER_HEIGHT).any(|y| (32..64).any(|x| g.get(y, x) == 0.0)));
        assert!((HEADER_HEIGHT..HEADER_HEIGHT + 64).any(|y| (0..32).any(|x| g.get(y, x) == 0.0)));
    }

    #[test]
    fn sweep_layout() {
        let images: Vec<Vec<GrayImage>> = (0..3).map(|r| (0..5).map(|c| cell((r * 5 + c) as f32 / 15.0)).collect()).collect();
        let labels = GridLabels {
            rows: vec!["ab".into(), "cd".into(), "ef".into()],
            cols: ["0", "0.25", "0.5", "0.75", "1"].iter().map(|s| s.to_string()).collect(),
        };
        let pad = 6;
        let g = emit_grid(&images, &labels, pad).unwrap();
        let layout = GridLayout::new(3, 5, pad, &labels);
        assert_eq!(g.height(), 3 * (64 + pad) + HEADER_HEIGHT);
        assert_eq!(g.width(), 5 * (256 + pad) + 3 * 8);
        assert_eq!(g.dims(), (layout.height(), layout.width()));
        let (y, x) = layout.cell_origin(2, 4);
        assert_eq!(g.get(y, x), 14.0 / 15.0);
        let plain = emit_grid(&images, &GridLabels::default(), 0).unwrap();
        assert_eq!(plain.dims(), (3 * 64, 5 * 256));
        assert_eq!(emit_grid(&images, &labels, pad).unwrap(), g);
    }

    #[test]
    fn rejects_bad_input() {
        let ragged = vec![vec![cell(1.0), cell(1.0)], vec![cell(1.0)]];
        assert!(emit_grid(&ragged, &GridLabels::default(), 0).is_err());
        assert!(emit_grid(&[], &GridLabels::default(), 0).is_err());
        let small = vec![vec![GrayImage::blank(10, 10)]];
        assert!(emit_grid(&small, &GridLabels::default(), 0).is_err());
        let labels = GridLabels {
            rows: vec!["a".into(), "b".into()],
            cols: vec![],
        };
        assert!(emit_grid(&[vec![cell(1.0)]], &labels, 0).is_err());
    }
}
