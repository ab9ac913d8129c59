//! Affine background alignment.
//!
//! An [`AffineTransform`] maps center-referenced output pixel coordinates to
//! source coordinates: with `y, x` measured from the frame center,
//! `src = A·(y, x) + v`. Warping samples the source image bilinearly, taking
//! the nearest boundary value outside the grid. Gauss-Newton steps on the six
//! parameters ([`delta_tau`]) align the running background to each frame, and
//! [`align_to_reference`] runs the full coarse-to-fine iteration used when
//! rebuilding the background from neighboring frames.

use crate::error::{Error, Result};
use crate::frame::{Frame, SupportMask};
use ndarray::Array2;

/// Six-parameter affine warp in center-referenced coordinates.
///
/// Parameter vector order: `[a11, a12, a21, a22, v1, v2]` where
/// `src_y = a11·y + a12·x + v1` and `src_x = a21·y + a22·x + v2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub a: [[f64; 2]; 2],
    pub v: [f64; 2],
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            a: [[1.0, 0.0], [0.0, 1.0]],
            v: [0.0, 0.0],
        }
    }

    /// Pure translation by (dy, dx) pixels: sampling shifts toward the
    /// source by that amount.
    pub fn translation(dy: f64, dx: f64) -> Self {
        Self {
            a: [[1.0, 0.0], [0.0, 1.0]],
            v: [dy, dx],
        }
    }

    pub fn from_params(p: [f64; 6]) -> Self {
        Self {
            a: [[p[0], p[1]], [p[2], p[3]]],
            v: [p[4], p[5]],
        }
    }

    pub fn params(&self) -> [f64; 6] {
        [
            self.a[0][0], self.a[0][1], self.a[1][0], self.a[1][1], self.v[0], self.v[1],
        ]
    }

    pub fn add_delta(&self, d: &[f64; 6]) -> Self {
        let p = self.params();
        Self::from_params([
            p[0] + d[0],
            p[1] + d[1],
            p[2] + d[2],
            p[3] + d[3],
            p[4] + d[4],
            p[5] + d[5],
        ])
    }

    pub fn det(&self) -> f64 {
        self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0]
    }

    /// The warp must stay comfortably invertible.
    pub fn is_invertible(&self) -> bool {
        self.det().abs() >= 0.1
    }

    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        if det.abs() < 1e-12 {
            return None;
        }
        let inv = [
            [self.a[1][1] / det, -self.a[0][1] / det],
            [-self.a[1][0] / det, self.a[0][0] / det],
        ];
        let v = [
            -(inv[0][0] * self.v[0] + inv[0][1] * self.v[1]),
            -(inv[1][0] * self.v[0] + inv[1][1] * self.v[1]),
        ];
        Some(Self { a: inv, v })
    }

    #[inline]
    fn apply_centered(&self, y: f64, x: f64) -> (f64, f64) {
        (
            self.a[0][0] * y + self.a[0][1] * x + self.v[0],
            self.a[1][0] * y + self.a[1][1] * x + self.v[1],
        )
    }

    /// Euclidean norm of the parameter offset from the identity.
    pub fn offset_norm(&self) -> f64 {
        let id = Self::identity().params();
        self.params()
            .iter()
            .zip(id.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

fn bilinear_clamped(g: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = g.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    (1.0 - fy) * ((1.0 - fx) * g[(y0, x0)] + fx * g[(y0, x1)])
        + fy * ((1.0 - fx) * g[(y1, x0)] + fx * g[(y1, x1)])
}

fn sample_warped(img: &Frame, tau: &AffineTransform) -> Frame {
    let (h, w) = img.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let g = img.grid();
    let out = Array2::from_shape_fn((h, w), |(r, c)| {
        let (sy, sx) = tau.apply_centered(r as f64 - cy, c as f64 - cx);
        bilinear_clamped(g, sy + cy, sx + cx)
    });
    Frame::new(out).expect("bilinear samples of a finite frame are finite")
}

/// Bilinear warp of `img` by `tau`. The identity transform reproduces the
/// input exactly on the integer grid.
pub fn warp(img: &Frame, tau: &AffineTransform) -> Result<Frame> {
    if !tau.is_invertible() {
        return Err(Error::DegenerateTransform { det: tau.det() });
    }
    Ok(sample_warped(img, tau))
}

/// Partial derivatives of the warped image with respect to each of the six
/// warp parameters, stored as six image-shaped columns.
#[derive(Debug, Clone)]
pub struct WarpJacobian {
    cols: Vec<Array2<f64>>,
}

impl WarpJacobian {
    pub fn col(&self, i: usize) -> &Array2<f64> {
        &self.cols[i]
    }

    pub fn dim(&self) -> (usize, usize) {
        self.cols[0].dim()
    }

    /// `J · delta` as an image-shaped increment.
    pub fn apply(&self, delta: &[f64; 6]) -> Frame {
        let mut acc: Array2<f64> = Array2::zeros(self.dim());
        for (col, &d) in self.cols.iter().zip(delta.iter()) {
            if d != 0.0 {
                acc = acc + col.mapv(|v| v * d);
            }
        }
        Frame::new(acc).expect("finite columns give finite increments")
    }
}

fn central_diff(g: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = g.dim();
    let gy = Array2::from_shape_fn((h, w), |(r, c)| {
        if r == 0 {
            g[(1.min(h - 1), c)] - g[(0, c)]
        } else if r == h - 1 {
            g[(h - 1, c)] - g[(h - 2, c)]
        } else {
            0.5 * (g[(r + 1, c)] - g[(r - 1, c)])
        }
    });
    let gx = Array2::from_shape_fn((h, w), |(r, c)| {
        if c == 0 {
            g[(r, 1.min(w - 1))] - g[(r, 0)]
        } else if c == w - 1 {
            g[(r, w - 1)] - g[(r, w - 2)]
        } else {
            0.5 * (g[(r, c + 1)] - g[(r, c - 1)])
        }
    });
    (gy, gx)
}

/// Jacobian of `warp(img, tau)` with respect to the warp parameters,
/// evaluated at `tau`: the chain rule combines the central-difference
/// gradient of the warped image with the coordinate derivatives.
pub fn jacobian(img: &Frame, tau: &AffineTransform) -> WarpJacobian {
    let warped = sample_warped(img, tau);
    let (gy, gx) = central_diff(warped.grid());
    let (h, w) = img.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let yc = Array2::from_shape_fn((h, w), |(r, _)| r as f64 - cy);
    let xc = Array2::from_shape_fn((h, w), |(_, c)| c as f64 - cx);
    let cols = vec![
        &gy * &yc, // a11
        &gy * &xc, // a12
        &gx * &yc, // a21
        &gx * &xc, // a22
        gy,        // v1
        gx,        // v2
    ];
    WarpJacobian { cols }
}

/// Minimum count of informative (unmasked, textured) pixels for a solvable
/// six-parameter system.
const MIN_SUPPORT_PIXELS: usize = 60;

/// One Gauss-Newton increment for the alignment residual
/// `masked(X - R - warp(B_prev, tau))`, solved over unmasked (label 0)
/// pixels via Tikhonov-regularized normal equations.
///
/// Returns a zero step plus a warning string when the system is degenerate.
pub fn delta_tau(
    x: &Frame,
    r_layer: &Frame,
    b_prev: &Frame,
    tau: &AffineTransform,
    mask: &SupportMask,
) -> Result<([f64; 6], Option<String>)> {
    x.same_dim(r_layer)?;
    x.same_dim(b_prev)?;
    if x.dim() != mask.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            got: mask.dim(),
        });
    }
    if !tau.is_invertible() {
        return Err(Error::DegenerateTransform { det: tau.det() });
    }

    let warped = sample_warped(b_prev, tau);
    let jac = jacobian(b_prev, tau);
    let (h, w) = x.dim();

    let mut jtj = nalgebra::Matrix6::<f64>::zeros();
    let mut jtr = nalgebra::Vector6::<f64>::zeros();
    let mut informative = 0usize;
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) == 1 {
                continue; // occluded rows are zeroed before the solve
            }
            let row = [
                jac.col(0)[(r, c)],
                jac.col(1)[(r, c)],
                jac.col(2)[(r, c)],
                jac.col(3)[(r, c)],
                jac.col(4)[(r, c)],
                jac.col(5)[(r, c)],
            ];
            let grad2 = row[4] * row[4] + row[5] * row[5];
            if grad2 > 1e-20 {
                informative += 1;
            }
            let res = x.get(r, c) - r_layer.get(r, c) - warped.get(r, c);
            for i in 0..6 {
                jtr[i] += row[i] * res;
                for j in 0..6 {
                    jtj[(i, j)] += row[i] * row[j];
                }
            }
        }
    }

    if informative < MIN_SUPPORT_PIXELS {
        return Ok((
            [0.0; 6],
            Some(format!(
                "alignment skipped: only {informative} informative pixels"
            )),
        ));
    }

    let eps = 1e-6 * jtj.trace() / 6.0;
    for i in 0..6 {
        jtj[(i, i)] += eps;
    }
    match jtj.cholesky() {
        Some(ch) => {
            let sol = ch.solve(&jtr);
            if sol.iter().all(|v| v.is_finite()) {
                Ok(([sol[0], sol[1], sol[2], sol[3], sol[4], sol[5]], None))
            } else {
                Ok(([0.0; 6], Some("alignment solve produced non-finite step".into())))
            }
        }
        None => Ok(([0.0; 6], Some("alignment normal equations not positive definite".into()))),
    }
}

#[derive(Debug, Clone, Default)]
pub struct AlignReport {
    pub converged: bool,
    pub iterations: usize,
    pub warning: Option<String>,
}

fn downsample2(f: &Frame) -> Frame {
    let (h, w) = f.dim();
    let (h2, w2) = (h / 2, w / 2);
    let g = f.grid();
    Frame::new(Array2::from_shape_fn((h2, w2), |(r, c)| {
        0.25 * (g[(2 * r, 2 * c)] + g[(2 * r + 1, 2 * c)] + g[(2 * r, 2 * c + 1)] + g[(2 * r + 1, 2 * c + 1)])
    }))
    .expect("means of finite values are finite")
}

fn residual_norm(frame: &Frame, reference: &Frame, tau: &AffineTransform) -> f64 {
    reference.sub(&sample_warped(frame, tau)).norm_l2()
}

/// Aligns `frame` to `reference` with a 3-level coarse-to-fine Gauss-Newton
/// iteration (empty mask, zero rain). Returns the transform, the warped
/// frame, and a report; on divergence the identity is returned with a
/// warning.
pub fn align_to_reference(frame: &Frame, reference: &Frame) -> Result<(AffineTransform, Frame, AlignReport)> {
    frame.same_dim(reference)?;

    // pyramid, coarsest first; stop while halving keeps the grid usable
    let mut levels = vec![(frame.clone(), reference.clone())];
    while levels.len() < 3 {
        let (lf, lr) = levels.last().unwrap();
        if lf.height() / 2 < 16 || lf.width() / 2 < 16 {
            break;
        }
        levels.push((downsample2(lf), downsample2(lr)));
    }
    levels.reverse();

    let mut tau = AffineTransform::identity();
    let mut report = AlignReport::default();
    let total_budget = 30usize;
    let mut used = 0usize;
    let n_levels = levels.len();

    for (li, (lf, lr)) in levels.iter().enumerate() {
        let empty = SupportMask::zeros(lf.height(), lf.width());
        let zero_rain = Frame::zeros(lf.height(), lf.width());
        let budget = if li + 1 == n_levels {
            total_budget - used
        } else {
            (total_budget / (2 * n_levels)).max(3)
        };

        let mut grow_streak = 0usize;
        for _ in 0..budget {
            used += 1;
            let (step, warn) = delta_tau(lr, &zero_rain, lf, &tau, &empty)?;
            if let Some(w) = warn {
                report.warning = Some(w);
                break;
            }
            let base = residual_norm(lf, lr, &tau);
            let mut accepted = None;
            let mut s = step;
            for _ in 0..5 {
                let cand = tau.add_delta(&s);
                if cand.is_invertible() && residual_norm(lf, lr, &cand) <= base + 1e-15 {
                    accepted = Some((cand, s));
                    break;
                }
                for v in &mut s {
                    *v *= 0.5;
                }
            }
            match accepted {
                Some((cand, s)) => {
                    grow_streak = 0;
                    tau = cand;
                    report.iterations = used;
                    let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < 1e-6 {
                        report.converged = true;
                        break;
                    }
                }
                None => {
                    grow_streak += 1;
                    if grow_streak >= 3 {
                        let warped = sample_warped(frame, &AffineTransform::identity());
                        return Ok((
                            AffineTransform::identity(),
                            warped,
                            AlignReport {
                                converged: false,
                                iterations: used,
                                warning: Some("alignment diverged; returning identity".into()),
                            },
                        ));
                    }
                }
            }
        }
        if report.warning.is_some() && !report.converged {
            break;
        }
        if li + 1 < n_levels {
            // translation doubles at the next-finer level; linear part carries
            tau.v[0] *= 2.0;
            tau.v[1] *= 2.0;
            report.converged = false;
        }
    }

    let warped = sample_warped(frame, &tau);
    Ok((tau, warped, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smooth analytic test image: a few Gaussian blobs on a gradient.
    fn blob_image(h: usize, w: usize, dy: f64, dx: f64) -> Frame {
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        Frame::from_fn(h, w, |r, c| {
            let y = r as f64 - cy + dy;
            let x = c as f64 - cx + dx;
            let mut v = 0.3 + 0.002 * y + 0.001 * x;
            for &(by, bx, s, a) in &[
                (-8.0, -6.0, 5.0, 0.4),
                (7.0, 9.0, 7.0, 0.3),
                (2.0, -10.0, 4.0, 0.25),
                (-4.0, 11.0, 6.0, 0.35),
            ] {
                let d2 = (y - by).powi(2) + (x - bx).powi(2);
                v += a * (-d2 / (2.0 * s * s)).exp();
            }
            v
        })
        .unwrap()
    }

    /// Same blobs sampled through a rotation about the image center.
    fn rotated_blob_image(h: usize, w: usize, theta: f64) -> Frame {
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let (s, c) = theta.sin_cos();
        Frame::from_fn(h, w, |r, cc| {
            let y0 = r as f64 - cy;
            let x0 = cc as f64 - cx;
            let y = c * y0 - s * x0;
            let x = s * y0 + c * x0;
            let mut v = 0.3 + 0.002 * y + 0.001 * x;
            for &(by, bx, sg, a) in &[
                (-8.0, -6.0, 5.0, 0.4),
                (7.0, 9.0, 7.0, 0.3),
                (2.0, -10.0, 4.0, 0.25),
                (-4.0, 11.0, 6.0, 0.35),
            ] {
                let d2 = (y - by).powi(2) + (x - bx).powi(2);
                v += a * (-d2 / (2.0 * sg * sg)).exp();
            }
            v
        })
        .unwrap()
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = blob_image(32, 40, 0.0, 0.0);
        let out = warp(&img, &AffineTransform::identity()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn integer_translation_shifts_interior() {
        let img = blob_image(32, 32, 0.0, 0.0);
        let tau = AffineTransform::translation(1.0, 0.0);
        let out = warp(&img, &tau).unwrap();
        // src_y = y + 1: output row r samples input row r+1
        for r in 0..31 {
            for c in 0..32 {
                assert!((out.get(r, c) - img.get(r + 1, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warp_then_inverse_is_near_identity_in_interior() {
        let img = blob_image(48, 48, 0.0, 0.0);
        let tau = AffineTransform {
            a: [[1.01, 0.02], [-0.015, 0.99]],
            v: [0.6, -0.4],
        };
        let inv = tau.inverse().unwrap();
        let round = warp(&warp(&img, &tau).unwrap(), &inv).unwrap();
        let mut max_err = 0.0f64;
        for r in 6..42 {
            for c in 6..42 {
                max_err = max_err.max((round.get(r, c) - img.get(r, c)).abs());
            }
        }
        assert!(max_err <= 1e-2, "interior error {max_err}");
    }

    #[test]
    fn degenerate_transform_rejected() {
        let img = blob_image(16, 16, 0.0, 0.0);
        let tau = AffineTransform {
            a: [[0.1, 0.0], [0.0, 0.1]],
            v: [0.0, 0.0],
        };
        assert!(warp(&img, &tau).is_err());
    }

    #[test]
    fn constant_image_has_zero_jacobian() {
        let img = Frame::from_elem(20, 20, 0.5).unwrap();
        let j = jacobian(&img, &AffineTransform::identity());
        for i in 0..6 {
            assert!(j.col(i).iter().all(|&v| v.abs() < 1e-14));
        }
    }

    #[test]
    fn translation_columns_equal_image_gradients() {
        let img = blob_image(24, 24, 0.0, 0.0);
        let j = jacobian(&img, &AffineTransform::identity());
        let (gy, gx) = central_diff(img.grid());
        assert_eq!(j.col(4), &gy);
        assert_eq!(j.col(5), &gx);
    }

    #[test]
    fn jacobian_predicts_warp_change_to_second_order() {
        let img = blob_image(32, 32, 0.0, 0.0);
        let tau = AffineTransform::identity();
        let j = jacobian(&img, &tau);
        let delta = [2e-4, -1e-4, 1.5e-4, -2e-4, 6e-4, -5e-4];
        let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        let moved = warp(&img, &tau.add_delta(&delta)).unwrap();
        let base = warp(&img, &tau).unwrap();
        let predicted = j.apply(&delta);
        let err = moved.sub(&base).sub(&predicted).max_abs();
        assert!(err <= 50.0 * norm * norm, "err {err} vs {}", 50.0 * norm * norm);
    }

    #[test]
    fn zero_residual_gives_zero_step() {
        let b = blob_image(32, 32, 0.0, 0.0);
        let tau = AffineTransform::translation(0.3, -0.2);
        let x = warp(&b, &tau).unwrap();
        let r = Frame::zeros(32, 32);
        let (step, warn) = delta_tau(&x, &r, &b, &tau, &SupportMask::zeros(32, 32)).unwrap();
        assert!(warn.is_none());
        let norm = step.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1e-10, "step norm {norm}");
    }

    #[test]
    fn full_mask_yields_zero_step_and_warning() {
        let b = blob_image(32, 32, 0.0, 0.0);
        let (step, warn) = delta_tau(&b, &Frame::zeros(32, 32), &b, &AffineTransform::identity(),
            &SupportMask::ones(32, 32)).unwrap();
        assert_eq!(step, [0.0; 6]);
        assert!(warn.is_some());
    }

    #[test]
    fn half_pixel_translation_recovered_in_one_step() {
        let b = blob_image(48, 48, 0.0, 0.0);
        let x = blob_image(48, 48, 0.5, 0.0); // analytic half-pixel shift
        let (step, warn) = delta_tau(&x, &Frame::zeros(48, 48), &b, &AffineTransform::identity(),
            &SupportMask::zeros(48, 48)).unwrap();
        assert!(warn.is_none());
        assert!((step[4] - 0.5).abs() <= 0.1, "dy step {}", step[4]);
        assert!(step[5].abs() <= 0.1, "dx step {}", step[5]);
    }

    #[test]
    fn step_invariant_to_common_constant_offset() {
        let b = blob_image(32, 32, 0.0, 0.0);
        let x = blob_image(32, 32, 0.4, -0.3);
        let mask = SupportMask::zeros(32, 32);
        let zero = Frame::zeros(32, 32);
        let (s1, _) = delta_tau(&x, &zero, &b, &AffineTransform::identity(), &mask).unwrap();
        let shift = Frame::from_elem(32, 32, 0.25).unwrap();
        let (s2, _) =
            delta_tau(&x.add(&shift), &zero, &b.add(&shift), &AffineTransform::identity(), &mask)
                .unwrap();
        for i in 0..6 {
            assert!((s1[i] - s2[i]).abs() < 1e-9, "param {i}: {} vs {}", s1[i], s2[i]);
        }
    }

    #[test]
    fn align_identical_frames_returns_identity() {
        let img = blob_image(40, 40, 0.0, 0.0);
        let (tau, warped, rep) = align_to_reference(&img, &img).unwrap();
        assert!(rep.converged);
        assert!(tau.offset_norm() <= 1e-6);
        assert!(warped.sub(&img).max_abs() <= 1e-6);
    }

    #[test]
    fn two_pixel_translation_recovered_within_tenth_pixel() {
        let reference = blob_image(48, 48, 0.0, 0.0);
        let frame = blob_image(48, 48, -2.0, 1.0); // shifted content
        let (tau, _, _) = align_to_reference(&frame, &reference).unwrap();
        // frame(y - 2, x + 1) matches reference: expect v = (2, -1)
        assert!((tau.v[0] - 2.0).abs() <= 0.1, "dy {}", tau.v[0]);
        assert!((tau.v[1] + 1.0).abs() <= 0.1, "dx {}", tau.v[1]);
    }

    #[test]
    fn one_degree_rotation_recovered() {
        let theta = 1.0f64.to_radians();
        let reference = blob_image(48, 48, 0.0, 0.0);
        let frame = rotated_blob_image(48, 48, theta);
        let (tau, _, _) = align_to_reference(&frame, &reference).unwrap();
        // frame(R_theta p) = reference(p) requires A = R_theta^{-1} = R_{-theta}
        let (s, c) = (-theta).sin_cos();
        let expect = [[c, -s], [s, c]];
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (tau.a[i][j] - expect[i][j]).abs() <= 1e-2,
                    "A[{i}][{j}] = {} vs {}",
                    tau.a[i][j],
                    expect[i][j]
                );
            }
        }
    }
}
