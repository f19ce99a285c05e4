//! Raster-of-vectors storage shared by queries, keys, values and outputs.

use crate::error::{Result, ScramError};

/// A (row, column) position in a raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelIndex {
    pub y: usize,
    pub x: usize,
}

impl PixelIndex {
    pub const fn new(y: usize, x: usize) -> Self {
        Self { y, x }
    }

    /// Row-major linear index in a raster of width `width`.
    #[inline]
    pub fn linear(self, width: usize) -> usize {
        self.y * width + self.x
    }

    #[inline]
    pub fn from_linear(index: usize, width: usize) -> Self {
        Self {
            y: index / width,
            x: index % width,
        }
    }

    /// L-infinity distance between two pixel positions.
    #[inline]
    pub fn chebyshev(self, other: Self) -> usize {
        self.y.abs_diff(other.y).max(self.x.abs_diff(other.x))
    }
}

/// Height, width of a raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    #[inline]
    pub fn len(self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn contains(self, p: PixelIndex) -> bool {
        p.y < self.height && p.x < self.width
    }

    pub fn pixel(self, index: usize) -> PixelIndex {
        PixelIndex::from_linear(index, self.width)
    }
}

/// An `H x W` raster of `depth`-dimensional `f32` vectors, row-major by
/// `(y, x, channel)`. All scalars are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldImage {
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<f32>,
}

impl FieldImage {
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || depth == 0 {
            return Err(ScramError::InvalidShape(format!(
                "dimensions must be positive, got {height}x{width}x{depth}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(depth))
            .ok_or_else(|| ScramError::InvalidShape("dimension overflow".into()))?;
        if data.len() != expected {
            return Err(ScramError::DimensionMismatch {
                expected,
                found: data.len(),
            });
        }
        if let Some(offset) = data.iter().position(|v| !v.is_finite()) {
            return Err(ScramError::NonFinite { offset });
        }
        Ok(Self {
            height,
            width,
            depth,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, depth: usize) -> Result<Self> {
        Self::new(height, width, depth, vec![0.0; height * width * depth])
    }

    /// Builds a field by evaluating `f(y, x, channel)` at every scalar.
    pub fn from_fn(
        height: usize,
        width: usize,
        depth: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * depth);
        for y in 0..height {
            for x in 0..width {
                for c in 0..depth {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, depth, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width)
    }

    /// Number of pixels.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Vector at row-major pixel index `i`.
    #[inline]
    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.depth..(i + 1) * self.depth]
    }

    #[inline]
    pub fn at(&self, p: PixelIndex) -> &[f32] {
        self.vector(p.linear(self.width))
    }

    /// Replaces the vector at pixel `i`. Values must be finite.
    pub fn set_vector(&mut self, i: usize, v: &[f32]) -> Result<()> {
        if v.len() != self.depth {
            return Err(ScramError::DimensionMismatch {
                expected: self.depth,
                found: v.len(),
            });
        }
        if let Some(k) = v.iter().position(|s| !s.is_finite()) {
            return Err(ScramError::NonFinite {
                offset: i * self.depth + k,
            });
        }
        self.data[i * self.depth..(i + 1) * self.depth].copy_from_slice(v);
        Ok(())
    }
}
