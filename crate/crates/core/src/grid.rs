//! Dense row-major image grids and the normalized image coordinate frame.
//!
//! Pixel `(row, col)` of an `H x W` grid has its center at
//! `x = (2 col + 1) / W - 1`, `y = 1 - (2 row + 1) / H`, so the frame spans
//! `[-1, 1]^2` with `y` pointing up. UV grids use the same convention with
//! `u = (x + 1) / 2`, `v = (y + 1) / 2`.

use crate::error::{Error, Result};

/// An `H x W x C` grid of `f64` values, channel fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::param(format!(
                "image buffer has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        (row * self.width + col) * self.channels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col) + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col) + ch;
        self.data[i] = value;
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = self.index(row, col);
        &self.data[i..i + self.channels]
    }

    /// Single channel `ch` as a flat `H * W` vector.
    pub fn channel(&self, ch: usize) -> Vec<f64> {
        self.data.iter().skip(ch).step_by(self.channels).copied().collect()
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// Center of pixel `(row, col)` in normalized coordinates.
#[inline]
pub fn pixel_center(row: usize, col: usize, height: usize, width: usize) -> [f64; 2] {
    [
        (2 * col + 1) as f64 / width as f64 - 1.0,
        1.0 - (2 * row + 1) as f64 / height as f64,
    ]
}

/// The coordinate grid of pixel centers, row-major.
pub fn pixel_grid(height: usize, width: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            out.push(pixel_center(r, c, height, width));
        }
    }
    out
}

/// Continuous (col, row) position of a normalized coordinate.
#[inline]
pub fn to_pixel_space(p: [f64; 2], height: usize, width: usize) -> (f64, f64) {
    (
        ((p[0] + 1.0) * width as f64 - 1.0) * 0.5,
        ((1.0 - p[1]) * height as f64 - 1.0) * 0.5,
    )
}

/// UV coordinate of texel `(row, col)` center.
#[inline]
pub fn texel_uv(row: usize, col: usize, height: usize, width: usize) -> [f64; 2] {
    [
        (col as f64 + 0.5) / width as f64,
        1.0 - (row as f64 + 0.5) / height as f64,
    ]
}

#[inline]
pub fn uv_to_coord(uv: [f64; 2]) -> [f64; 2] {
    [2.0 * uv[0] - 1.0, 2.0 * uv[1] - 1.0]
}
