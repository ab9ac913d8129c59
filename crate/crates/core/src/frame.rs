//! Single-channel intensity grids and binary support masks.
//!
//! A [`Frame`] is the unit of all per-pixel math: a finite 2-D grid of f64
//! intensities with working range [0, 1] at ingestion (intermediate layers
//! such as rain or residuals may leave that range). A [`SupportMask`] labels
//! each pixel as moving object (1) or background (0).

use crate::error::{Error, Result};
use ndarray::Array2;

/// Minimum frame side length the engine accepts.
pub const MIN_FRAME_DIM: usize = 16;

/// One single-channel 2-D intensity grid. Values are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    grid: Array2<f64>,
}

impl Frame {
    /// Wraps a grid, rejecting NaN/Inf entries.
    pub fn new(grid: Array2<f64>) -> Result<Self> {
        if !grid.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("frame"));
        }
        Ok(Self { grid })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            grid: Array2::zeros((height, width)),
        }
    }

    pub fn from_elem(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        Self::new(Array2::from_shape_fn((height, width), |(r, c)| f(r, c)))
    }

    pub fn height(&self) -> usize {
        self.grid.nrows()
    }

    pub fn width(&self) -> usize {
        self.grid.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.grid.dim()
    }

    /// Pixel count, `height * width`.
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn grid(&self) -> &Array2<f64> {
        &self.grid
    }

    pub fn grid_mut(&mut self) -> &mut Array2<f64> {
        &mut self.grid
    }

    pub fn into_grid(self) -> Array2<f64> {
        self.grid
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.grid[(r, c)]
    }

    /// True when both sides meet [`MIN_FRAME_DIM`].
    pub fn meets_min_size(&self) -> bool {
        self.height() >= MIN_FRAME_DIM && self.width() >= MIN_FRAME_DIM
    }

    pub fn same_dim(&self, other: &Frame) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Frame) -> Frame {
        Frame {
            grid: &self.grid + &other.grid,
        }
    }

    pub fn sub(&self, other: &Frame) -> Frame {
        Frame {
            grid: &self.grid - &other.grid,
        }
    }

    pub fn scale(&self, s: f64) -> Frame {
        Frame {
            grid: &self.grid * s,
        }
    }

    pub fn clamp01(&self) -> Frame {
        Frame {
            grid: self.grid.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    pub fn norm_l1(&self) -> f64 {
        self.grid.iter().map(|v| v.abs()).sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.grid.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.grid.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        if self.grid.is_empty() {
            0.0
        } else {
            self.grid.sum() / self.grid.len() as f64
        }
    }
}

/// Binary per-pixel labeling: 1 = moving object, 0 = background.
///
/// The complement mask satisfies `H + H^c = all-ones` by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportMask {
    labels: Array2<u8>,
}

impl SupportMask {
    /// Wraps a label grid, rejecting anything but 0/1 entries.
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if !labels.iter().all(|&v| v <= 1) {
            return Err(Error::InvalidParameter(
                "support mask labels must be 0 or 1".into(),
            ));
        }
        Ok(Self { labels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            labels: Array2::zeros((height, width)),
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            labels: Array2::from_elem((height, width), 1),
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self {
            labels: Array2::from_shape_fn((height, width), |(r, c)| u8::from(f(r, c))),
        }
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.labels[(r, c)]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        debug_assert!(v <= 1);
        self.labels[(r, c)] = v;
    }

    pub fn complement(&self) -> SupportMask {
        SupportMask {
            labels: self.labels.mapv(|v| 1 - v),
        }
    }

    pub fn count_ones(&self) -> usize {
        self.labels.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_all_zero(&self) -> bool {
        self.count_ones() == 0
    }

    /// Elementwise `H ∘ f`.
    pub fn apply(&self, f: &Frame) -> Frame {
        let grid = Array2::from_shape_fn(self.labels.dim(), |(r, c)| {
            f.get(r, c) * f64::from(self.labels[(r, c)])
        });
        Frame { grid }
    }

    /// Elementwise `H^c ∘ f`.
    pub fn apply_complement(&self, f: &Frame) -> Frame {
        let grid = Array2::from_shape_fn(self.labels.dim(), |(r, c)| {
            f.get(r, c) * f64::from(1 - self.labels[(r, c)])
        });
        Frame { grid }
    }
}

/// Model prediction `H^c ∘ B_warped + H ∘ F + R`.
///
/// `x` is only used for shape validation; the residual noise layer is
/// available to callers as `x - elementwise_compose(...)`.
pub fn elementwise_compose(
    x: &Frame,
    b_warped: &Frame,
    f: &Frame,
    r: &Frame,
    h: &SupportMask,
) -> Result<Frame> {
    x.same_dim(b_warped)?;
    x.same_dim(f)?;
    x.same_dim(r)?;
    if x.dim() != h.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            got: h.dim(),
        });
    }
    let grid = Array2::from_shape_fn(x.dim(), |(i, j)| {
        let m = f64::from(h.get(i, j));
        (1.0 - m) * b_warped.get(i, j) + m * f.get(i, j) + r.get(i, j)
    });
    Frame::new(grid)
}
