//! Image and feature-grid dimensions and the mapping between them.
//!
//! Grid cell `(r, c)` covers the pixel rectangle
//! `[c * W/cols, (c+1) * W/cols) x [r * H/rows, (r+1) * H/rows)`; its centre
//! sits at integer grid coordinates `(c, r)`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDims {
    pub rows: usize,
    pub cols: usize,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }
}

impl GridDims {
    pub fn square(n: usize) -> Self {
        Self { rows: n, cols: n }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Grid cells per pixel along x and y.
    pub fn scale(&self, image: ImageDims) -> (f64, f64) {
        (
            self.cols as f64 / image.width as f64,
            self.rows as f64 / image.height as f64,
        )
    }

    /// Continuous grid coordinates `(gx, gy)` of a pixel position.
    pub fn to_grid(&self, image: ImageDims, x: f64, y: f64) -> (f64, f64) {
        let (sx, sy) = self.scale(image);
        (x * sx - 0.5, y * sy - 0.5)
    }

    /// The cell `(row, col)` containing a pixel position (edges clamp inward).
    pub fn cell_of(&self, image: ImageDims, x: f64, y: f64) -> (usize, usize) {
        let (sx, sy) = self.scale(image);
        let c = ((x * sx).floor().max(0.0) as usize).min(self.cols - 1);
        let r = ((y * sy).floor().max(0.0) as usize).min(self.rows - 1);
        (r, c)
    }

    /// Pixel centre of cell `(row, col)`.
    pub fn cell_center(&self, image: ImageDims, row: usize, col: usize) -> (f64, f64) {
        let (sx, sy) = self.scale(image);
        ((col as f64 + 0.5) / sx, (row as f64 + 0.5) / sy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_centres_map_to_integer_grid_coordinates() {
        let g = GridDims::square(40);
        let im = ImageDims::new(320, 320);
        let (x, y) = g.cell_center(im, 2, 5);
        assert_eq!((x, y), (44.0, 20.0));
        assert_eq!(g.to_grid(im, x, y), (5.0, 2.0));
        assert_eq!(g.cell_of(im, x, y), (2, 5));
        assert_eq!(g.cell_of(im, 320.0, 320.0), (39, 39));
    }
}
