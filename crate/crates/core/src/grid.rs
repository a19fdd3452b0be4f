//! Pixel-space and latent-space rasters.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Declared value range of an [`ImageGrid`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelRange {
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    Symmetric,
}

impl PixelRange {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            PixelRange::Unit => (0.0, 1.0),
            PixelRange::Symmetric => (-1.0, 1.0),
        }
    }

    #[inline]
    pub fn to_unit(self, v: f32) -> f32 {
        match self {
            PixelRange::Unit => v,
            PixelRange::Symmetric => (v + 1.0) * 0.5,
        }
    }

    #[inline]
    pub fn from_unit(self, v: f32) -> f32 {
        match self {
            PixelRange::Unit => v,
            PixelRange::Symmetric => v * 2.0 - 1.0,
        }
    }
}

/// Single-channel raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub range: PixelRange,
    pub data: Vec<f32>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, range: PixelRange, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return shape_err(format!(
                "image data has {} values, expected {height}x{width}",
                data.len()
            ));
        }
        Ok(ImageGrid {
            height,
            width,
            range,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, range: PixelRange, value: f32) -> Self {
        ImageGrid {
            height,
            width,
            range,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.width + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    /// Same image re-expressed in another range (linear map, no clamping).
    pub fn to_range(&self, range: PixelRange) -> ImageGrid {
        if range == self.range {
            return self.clone();
        }
        let data = self
            .data
            .iter()
            .map(|&v| range.from_unit(self.range.to_unit(v)))
            .collect();
        ImageGrid {
            height: self.height,
            width: self.width,
            range,
            data,
        }
    }

    pub fn clamped(mut self) -> ImageGrid {
        let (lo, hi) = self.range.bounds();
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
        self
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn max_abs_diff(&self, other: &ImageGrid) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub(crate) fn ensure_same_shape(&self, other: &ImageGrid) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err(format!(
                "image shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(())
    }
}

/// Channel-major `C x H x W` latent array.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl LatentGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return shape_err(format!(
                "latent data has {} values, expected {channels}x{height}x{width}",
                data.len()
            ));
        }
        Ok(LatentGrid {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        LatentGrid {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn zeros_like(other: &LatentGrid) -> Self {
        Self::zeros(other.channels, other.height, other.width)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn ensure_same_shape(&self, other: &LatentGrid) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err(format!(
                "latent shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(())
    }

    /// Elementwise `self + scale * other`.
    pub fn axpy(&self, scale: f32, other: &LatentGrid) -> Result<LatentGrid> {
        self.ensure_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + scale * b)
            .collect();
        Ok(LatentGrid { data, ..*self })
    }
}
