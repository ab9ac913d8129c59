//! Multi-scale filter bank, sparse feature maps, and their convolutional
//! synthesis `R = Σ_ks D_ks ⊗ M_ks`.

use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2, pad_filter_centered};
use crate::frame::Frame;
use ndarray::Array2;

/// One dictionary scale: odd square patch size and how many filters it holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleSpec {
    pub patch: usize,
    pub count: usize,
}

/// Default scales: coarse-to-fine streak patches.
pub fn default_scales() -> Vec<ScaleSpec> {
    [13, 9, 3]
        .into_iter()
        .map(|patch| ScaleSpec { patch, count: 3 })
        .collect()
}

/// The learned rain appearance: one unit-ball kernel per (scale, slot) index.
///
/// Invariants: patch sizes are odd and strictly decreasing across scales and
/// every kernel has Frobenius norm at most 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    scales: Vec<ScaleSpec>,
    filters: Vec<Array2<f64>>,
}

impl FilterBank {
    /// Builds a bank with oriented Gaussian streak kernels, `count` evenly
    /// spread orientations per scale, each normalized to unit Frobenius norm.
    pub fn streak_init(scales: &[ScaleSpec]) -> Result<Self> {
        validate_scales(scales)?;
        let mut filters = Vec::new();
        for spec in scales {
            for s in 0..spec.count {
                let angle = std::f64::consts::PI * (s as f64 + 1.0) / (spec.count as f64 + 1.0);
                filters.push(oriented_gaussian(spec.patch, angle));
            }
        }
        Ok(Self {
            scales: scales.to_vec(),
            filters,
        })
    }

    /// Builds a bank from explicit kernels (scale-major order), validating
    /// shapes and the unit-ball constraint.
    pub fn from_filters(scales: Vec<ScaleSpec>, filters: Vec<Array2<f64>>) -> Result<Self> {
        validate_scales(&scales)?;
        let expected: usize = scales.iter().map(|s| s.count).sum();
        if filters.len() != expected {
            return Err(Error::InvalidParameter(format!(
                "expected {expected} filters, got {}",
                filters.len()
            )));
        }
        let mut i = 0;
        for spec in &scales {
            for _ in 0..spec.count {
                let f = &filters[i];
                if f.dim() != (spec.patch, spec.patch) {
                    return Err(Error::DimensionMismatch {
                        expected: (spec.patch, spec.patch),
                        got: f.dim(),
                    });
                }
                if !f.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("filter"));
                }
                let norm = frob(f);
                if norm > 1.0 + 1e-9 {
                    return Err(Error::InvalidParameter(format!(
                        "filter {i} has Frobenius norm {norm} > 1"
                    )));
                }
                i += 1;
            }
        }
        Ok(Self { scales, filters })
    }

    pub fn scales(&self) -> &[ScaleSpec] {
        &self.scales
    }

    pub fn filter_count(&self) -> usize {
        self.filters.len()
    }

    pub fn filter(&self, idx: usize) -> &Array2<f64> {
        &self.filters[idx]
    }

    pub fn filters(&self) -> &[Array2<f64>] {
        &self.filters
    }

    /// (scale index, patch size) for a flat filter index.
    pub fn scale_of(&self, idx: usize) -> (usize, usize) {
        let mut i = idx;
        for (k, spec) in self.scales.iter().enumerate() {
            if i < spec.count {
                return (k, spec.patch);
            }
            i -= spec.count;
        }
        panic!("filter index {idx} out of range");
    }

    /// Flat index range of the filters belonging to scale `k`.
    pub fn scale_range(&self, k: usize) -> std::ops::Range<usize> {
        let start: usize = self.scales[..k].iter().map(|s| s.count).sum();
        start..start + self.scales[k].count
    }

    /// Replaces filter `idx`, projecting onto the unit Frobenius ball.
    pub(crate) fn set_filter_projected(&mut self, idx: usize, mut f: Array2<f64>) {
        let norm = frob(&f);
        if norm > 1.0 {
            f.mapv_inplace(|v| v / norm);
        }
        self.filters[idx] = f;
    }

    pub fn max_filter_norm(&self) -> f64 {
        self.filters.iter().map(|f| frob(f)).fold(0.0, f64::max)
    }
}

fn frob(f: &Array2<f64>) -> f64 {
    f.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn validate_scales(scales: &[ScaleSpec]) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::InvalidParameter("no scales given".into()));
    }
    for w in scales.windows(2) {
        if w[1].patch >= w[0].patch {
            return Err(Error::InvalidParameter(
                "patch sizes must strictly decrease across scales".into(),
            ));
        }
    }
    for s in scales {
        if s.patch % 2 == 0 || s.patch == 0 {
            return Err(Error::InvalidParameter(format!(
                "patch size {} must be odd",
                s.patch
            )));
        }
        if s.count == 0 {
            return Err(Error::InvalidParameter("scale with zero filters".into()));
        }
    }
    Ok(())
}

/// Unit-norm anisotropic Gaussian elongated along `angle` (radians from the
/// vertical axis), the generic appearance of a streak.
fn oriented_gaussian(patch: usize, angle: f64) -> Array2<f64> {
    let c = (patch as f64 - 1.0) / 2.0;
    let sigma_along = (patch as f64 / 4.0).max(0.5);
    let sigma_across = (patch as f64 / 10.0).max(0.6);
    let (sin_a, cos_a) = angle.sin_cos();
    let mut g = Array2::from_shape_fn((patch, patch), |(r, cix)| {
        let y = r as f64 - c;
        let x = cix as f64 - c;
        // coordinates rotated into (along, across) streak axes
        let along = y * cos_a + x * sin_a;
        let across = -y * sin_a + x * cos_a;
        (-0.5 * (along / sigma_along).powi(2) - 0.5 * (across / sigma_across).powi(2)).exp()
    });
    let norm = frob(&g);
    g.mapv_inplace(|v| v / norm);
    g
}

/// Sparse coefficient grids, one frame-shaped map per filter index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapSet {
    maps: Vec<Array2<f64>>,
    shape: (usize, usize),
}

impl FeatureMapSet {
    pub fn zeros(bank: &FilterBank, height: usize, width: usize) -> Self {
        Self {
            maps: vec![Array2::zeros((height, width)); bank.filter_count()],
            shape: (height, width),
        }
    }

    pub fn from_maps(maps: Vec<Array2<f64>>) -> Result<Self> {
        let shape = maps
            .first()
            .map(|m| m.dim())
            .ok_or_else(|| Error::InvalidParameter("empty feature map set".into()))?;
        for m in &maps {
            if m.dim() != shape {
                return Err(Error::DimensionMismatch {
                    expected: shape,
                    got: m.dim(),
                });
            }
        }
        Ok(Self { maps, shape })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn map(&self, idx: usize) -> &Array2<f64> {
        &self.maps[idx]
    }

    pub fn maps(&self) -> &[Array2<f64>] {
        &self.maps
    }

    pub fn maps_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.maps
    }

    pub fn norm_l1(&self, idx: usize) -> f64 {
        self.maps[idx].iter().map(|v| v.abs()).sum()
    }

    pub fn nonzero_count(&self, idx: usize) -> usize {
        self.maps[idx].iter().filter(|v| **v != 0.0).count()
    }

    pub fn is_all_zero(&self) -> bool {
        self.maps.iter().all(|m| m.iter().all(|&v| v == 0.0))
    }
}

/// One positive scale per filter index (the per-frame sparsity weights).
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleParams {
    values: Vec<f64>,
}

impl ScaleParams {
    pub fn uniform(bank: &FilterBank, value: f64) -> Result<Self> {
        Self::from_values(vec![value; bank.filter_count()])
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "scale parameters must be positive and finite".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Synthesizes the rain layer `Σ_ks D_ks ⊗ M_ks` with circular boundary
/// convolution, computed in the Fourier domain.
pub fn convolve_sum(bank: &FilterBank, maps: &FeatureMapSet) -> Result<Frame> {
    if maps.len() != bank.filter_count() {
        return Err(Error::InvalidParameter(format!(
            "map count {} does not match filter count {}",
            maps.len(),
            bank.filter_count()
        )));
    }
    let (h, w) = maps.shape();
    let mut acc = Array2::zeros((h, w));
    for (f, m) in bank.filters().iter().zip(maps.maps()) {
        if m.dim() != (h, w) {
            return Err(Error::DimensionMismatch {
                expected: (h, w),
                got: m.dim(),
            });
        }
        let fd = fft2(&pad_filter_centered(f, h, w));
        let md = fft2(m);
        let prod = &fd * &md;
        acc = acc + ifft2(&prod);
    }
    Frame::new(acc)
}

/// Per-scale partial sums `Σ_s D_ks ⊗ M_ks`, one frame per scale.
pub fn convolve_per_scale(bank: &FilterBank, maps: &FeatureMapSet) -> Result<Vec<Frame>> {
    let (h, w) = maps.shape();
    let mut out = Vec::with_capacity(bank.scales().len());
    for k in 0..bank.scales().len() {
        let mut acc = Array2::zeros((h, w));
        for idx in bank.scale_range(k) {
            let fd = fft2(&pad_filter_centered(bank.filter(idx), h, w));
            let md = fft2(maps.map(idx));
            let prod = &fd * &md;
            acc = acc + ifft2(&prod);
        }
        out.push(Frame::new(acc)?);
    }
    Ok(out)
}
