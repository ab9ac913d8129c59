//! Convolutional sparse coding of the rain layer.
//!
//! Two solvers live here:
//!
//! * [`update_feature_maps`] solves the per-frame map subproblem
//!   `min_M 0.5 ||Σ D_ks ⊗ M_ks - target||² + Σ (b_ks/ρ) ||M_ks||₁`
//!   with an inner ADMM whose least-squares step is diagonalized in the
//!   Fourier domain (rank-one frequency systems solved by Sherman-Morrison).
//!
//! * [`update_filters`] performs online dictionary learning: per-frame map
//!   correlation statistics are folded into exponentially forgotten
//!   accumulators, and each filter is refit by exact block-coordinate descent
//!   on the accumulated surrogate under the unit Frobenius-ball constraint.

use crate::bank::{FeatureMapSet, FilterBank, ScaleParams};
use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2, pad_filter_centered};
use crate::frame::Frame;
use ndarray::Array2;
use num_complex::Complex64;

/// Elementwise `sign(x) * max(|x| - kappa, 0)`.
pub fn soft_threshold(x: &Array2<f64>, kappa: f64) -> Result<Array2<f64>> {
    if kappa < 0.0 || !kappa.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "soft threshold requires kappa >= 0, got {kappa}"
        )));
    }
    Ok(x.mapv(|v| {
        if v > kappa {
            v - kappa
        } else if v < -kappa {
            v + kappa
        } else {
            0.0
        }
    }))
}

/// Solver settings for the inner ADMM and the dictionary sweeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CscConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub dict_sweeps: usize,
}

impl Default for CscConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-4,
            dict_sweeps: 1,
        }
    }
}

/// Convergence record of the last [`update_feature_maps`] call.
#[derive(Debug, Clone, Copy, Default)]
pub struct CscReport {
    pub converged: bool,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub objective: f64,
}

/// Warm-started inner-ADMM state: auxiliary maps, scaled multipliers and the
/// adapted penalty, all carried across calls.
#[derive(Debug, Clone, PartialEq)]
pub struct CscWorkspace {
    shape: (usize, usize),
    z: Vec<Array2<f64>>,
    u: Vec<Array2<f64>>,
    mu: f64,
    #[doc(hidden)]
    pub last_report_storage: CscReportStorage,
}

/// Wrapper so the workspace stays `PartialEq` while carrying the report.
#[derive(Debug, Clone, Default)]
pub struct CscReportStorage(pub CscReport);

impl PartialEq for CscReportStorage {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl CscWorkspace {
    pub fn new(bank: &FilterBank, height: usize, width: usize) -> Self {
        let n = bank.filter_count();
        Self {
            shape: (height, width),
            z: vec![Array2::zeros((height, width)); n],
            u: vec![Array2::zeros((height, width)); n],
            mu: 0.0,
            last_report_storage: CscReportStorage::default(),
        }
    }

    pub fn last_report(&self) -> CscReport {
        self.last_report_storage.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub(crate) fn raw_parts(&self) -> (&[Array2<f64>], &[Array2<f64>], f64) {
        (&self.z, &self.u, self.mu)
    }

    pub(crate) fn from_raw_parts(
        shape: (usize, usize),
        z: Vec<Array2<f64>>,
        u: Vec<Array2<f64>>,
        mu: f64,
    ) -> Self {
        Self {
            shape,
            z,
            u,
            mu,
            last_report_storage: CscReportStorage::default(),
        }
    }
}

/// Solves the feature-map subproblem for the current target (`R - T` in the
/// outer loop). Returns the best iterate by objective; on non-convergence the
/// report carries `converged = false`.
pub fn update_feature_maps(
    bank: &FilterBank,
    target: &Frame,
    scales: &ScaleParams,
    rho: f64,
    ws: &mut CscWorkspace,
    cfg: &CscConfig,
) -> Result<FeatureMapSet> {
    if rho <= 0.0 || !rho.is_finite() {
        return Err(Error::InvalidParameter(format!("rho must be positive, got {rho}")));
    }
    let n = bank.filter_count();
    if scales.len() != n {
        return Err(Error::InvalidParameter(format!(
            "scale parameter count {} does not match filter count {n}",
            scales.len()
        )));
    }
    let (h, w) = target.dim();
    if ws.shape != (h, w) {
        return Err(Error::DimensionMismatch {
            expected: ws.shape,
            got: (h, w),
        });
    }

    let kappas: Vec<f64> = scales.values().iter().map(|b| b / rho).collect();
    let mu_init = (10.0 * scales.mean() / rho).max(1e-12);
    if ws.mu > 0.0 && ws.mu != mu_init {
        // keep the unscaled multiplier invariant when the penalty is reset
        let factor = ws.mu / mu_init;
        for u in &mut ws.u {
            u.mapv_inplace(|v| v * factor);
        }
    }
    let mut mu = mu_init;

    let fd: Vec<Array2<Complex64>> = bank
        .filters()
        .iter()
        .map(|f| fft2(&pad_filter_centered(f, h, w)))
        .collect();
    let fd_norm2: Array2<f64> = {
        let mut acc = Array2::zeros((h, w));
        for d in &fd {
            acc = acc + d.mapv(|v| v.norm_sqr());
        }
        acc
    };
    let yd = fft2(target.grid());
    let rhs_base: Vec<Array2<Complex64>> = fd.iter().map(|d| d.mapv(|v| v.conj()) * &yd).collect();

    let cells = (n * h * w) as f64;
    let abs_floor = 1e-12 * cells.sqrt();

    let mut z = ws.z.clone();
    let mut u = ws.u.clone();
    let mut best_obj = f64::INFINITY;
    let mut best_z = z.clone();
    let mut report = CscReport::default();

    for it in 0..cfg.max_iters {
        // least-squares step, solved per frequency
        let vd: Vec<Array2<Complex64>> = z.iter().zip(&u).map(|(zj, uj)| fft2(&(zj - uj))).collect();
        let mut s_acc: Array2<Complex64> = Array2::zeros((h, w));
        let mut rhs: Vec<Array2<Complex64>> = Vec::with_capacity(n);
        for j in 0..n {
            let r = &rhs_base[j] + &vd[j].mapv(|v| v * mu);
            s_acc = s_acc + &fd[j] * &r;
            rhs.push(r);
        }
        let m: Vec<Array2<f64>> = (0..n)
            .map(|j| {
                let mut md = Array2::zeros((h, w));
                for ((out, (&r, &d)), (&s, &dn2)) in md
                    .iter_mut()
                    .zip(rhs[j].iter().zip(fd[j].iter()))
                    .zip(s_acc.iter().zip(fd_norm2.iter()))
                {
                    *out = (r - d.conj() * s / (mu + dn2)) / mu;
                }
                ifft2(&md)
            })
            .collect();

        // shrinkage and multiplier steps
        let z_prev = z;
        z = (0..n)
            .map(|j| soft_threshold(&(&m[j] + &u[j]), kappas[j] / mu).expect("kappa >= 0"))
            .collect();
        for j in 0..n {
            u[j] = &u[j] + &(&m[j] - &z[j]);
        }

        let primal: f64 = (0..n)
            .map(|j| (&m[j] - &z[j]).iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let dual: f64 = mu
            * (0..n)
                .map(|j| (&z[j] - &z_prev[j]).iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
        let m_norm: f64 = m.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        let z_norm: f64 = z.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        let u_norm: f64 = u.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        let eps_pri = cfg.tol * m_norm.max(z_norm) + abs_floor;
        let eps_dual = cfg.tol * mu * u_norm + abs_floor;

        let obj = csc_objective(&fd, &kappas, &z, &yd);
        if obj < best_obj {
            best_obj = obj;
            best_z = z.clone();
        }

        report.iterations = it + 1;
        report.primal_residual = primal;
        report.dual_residual = dual;
        report.objective = best_obj;
        if primal <= eps_pri && dual <= eps_dual {
            report.converged = true;
            break;
        }

        // residual balancing keeps the two residuals within a decade
        if primal > 10.0 * dual {
            mu *= 2.0;
            for uj in &mut u {
                uj.mapv_inplace(|v| v * 0.5);
            }
        } else if dual > 10.0 * primal {
            mu *= 0.5;
            for uj in &mut u {
                uj.mapv_inplace(|v| v * 2.0);
            }
        }
    }

    ws.z = z;
    ws.u = u;
    ws.mu = mu;
    ws.last_report_storage = CscReportStorage(report);
    FeatureMapSet::from_maps(best_z)
}

/// Objective `0.5||Σ D⊗Z - target||² + Σ κ||Z||₁`, with the quadratic part
/// evaluated in the Fourier domain (Parseval).
fn csc_objective(
    fd: &[Array2<Complex64>],
    kappas: &[f64],
    z: &[Array2<f64>],
    yd: &Array2<Complex64>,
) -> f64 {
    let (h, w) = yd.dim();
    let mut synth: Array2<Complex64> = Array2::zeros((h, w));
    for (d, zj) in fd.iter().zip(z) {
        synth = synth + d * &fft2(zj);
    }
    let fit: f64 = synth
        .iter()
        .zip(yd.iter())
        .map(|(s, y)| (s - y).norm_sqr())
        .sum::<f64>()
        / (h * w) as f64;
    let l1: f64 = kappas
        .iter()
        .zip(z)
        .map(|(k, zj)| k * zj.iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    0.5 * fit + l1
}

/// Exponentially forgotten second-moment statistics of the feature maps and
/// their correlation with the synthesis target, the sufficient statistics of
/// the dictionary surrogate.
///
/// The current frame's contribution sits in a separate slot so that repeated
/// refits within one frame replace (rather than double-count) it;
/// [`DictionaryStats::commit_frame`] folds it into the history with decay.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryStats {
    shape: (usize, usize),
    n: usize,
    base_cross: Vec<Array2<f64>>,
    base_target: Vec<Array2<f64>>,
    cur_cross: Vec<Array2<f64>>,
    cur_target: Vec<Array2<f64>>,
}

fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j && j < n);
    i * n - i * (i + 1) / 2 + j
}

impl Default for DictionaryStats {
    /// Empty statistics; stands in while the real accumulators are loaned to
    /// the filter update.
    fn default() -> Self {
        Self {
            shape: (0, 0),
            n: 0,
            base_cross: Vec::new(),
            base_target: Vec::new(),
            cur_cross: Vec::new(),
            cur_target: Vec::new(),
        }
    }
}

impl DictionaryStats {
    pub fn new(bank: &FilterBank, height: usize, width: usize) -> Self {
        let n = bank.filter_count();
        let pairs = n * (n + 1) / 2;
        Self {
            shape: (height, width),
            n,
            base_cross: vec![Array2::zeros((height, width)); pairs],
            base_target: vec![Array2::zeros((height, width)); n],
            cur_cross: vec![Array2::zeros((height, width)); pairs],
            cur_target: vec![Array2::zeros((height, width)); n],
        }
    }

    pub fn filter_count(&self) -> usize {
        self.n
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    /// Folds the current frame's slot into the history with `decay` applied
    /// to everything accumulated so far. Call once per frame, after the last
    /// filter refit.
    pub fn commit_frame(&mut self, decay: f64) {
        for (b, c) in self.base_cross.iter_mut().zip(&mut self.cur_cross) {
            *b = (&*b + &*c) * decay;
            c.fill(0.0);
        }
        for (b, c) in self.base_target.iter_mut().zip(&mut self.cur_target) {
            *b = (&*b + &*c) * decay;
            c.fill(0.0);
        }
    }

    fn set_current(&mut self, maps: &FeatureMapSet, target: &Frame) {
        let md: Vec<Array2<Complex64>> = maps.maps().iter().map(fft2).collect();
        let yd = fft2(target.grid());
        for i in 0..self.n {
            let mi_conj = md[i].mapv(|v| v.conj());
            for j in i..self.n {
                let prod = &mi_conj * &md[j];
                self.cur_cross[pair_index(self.n, i, j)] = ifft2(&prod);
            }
            let tprod = &mi_conj * &yd;
            self.cur_target[i] = ifft2(&tprod);
        }
    }

    /// `Σ_frames Σ_n m_i[n] * m_j[n + δ]` with circular indexing.
    fn cross_at(&self, i: usize, j: usize, dr: isize, dc: isize) -> f64 {
        if i <= j {
            let (h, w) = self.shape;
            let r = dr.rem_euclid(h as isize) as usize;
            let c = dc.rem_euclid(w as isize) as usize;
            let idx = pair_index(self.n, i, j);
            self.base_cross[idx][(r, c)] + self.cur_cross[idx][(r, c)]
        } else {
            self.cross_at(j, i, -dr, -dc)
        }
    }

    /// `Σ_frames Σ_n m_j[n] * target[n + δ]` with circular indexing.
    fn target_at(&self, j: usize, dr: isize, dc: isize) -> f64 {
        let (h, w) = self.shape;
        let r = dr.rem_euclid(h as isize) as usize;
        let c = dc.rem_euclid(w as isize) as usize;
        self.base_target[j][(r, c)] + self.cur_target[j][(r, c)]
    }

    pub(crate) fn base_slices(&self) -> (&[Array2<f64>], &[Array2<f64>]) {
        (&self.base_cross, &self.base_target)
    }

    /// Rebuilds statistics from persisted accumulators; the current-frame
    /// slots start empty (they are always empty between frames).
    pub(crate) fn from_base(
        shape: (usize, usize),
        n: usize,
        base_cross: Vec<Array2<f64>>,
        base_target: Vec<Array2<f64>>,
    ) -> Self {
        let (h, w) = shape;
        let pairs = n * (n + 1) / 2;
        debug_assert_eq!(base_cross.len(), pairs);
        debug_assert_eq!(base_target.len(), n);
        Self {
            shape,
            n,
            base_cross,
            base_target,
            cur_cross: vec![Array2::zeros((h, w)); pairs],
            cur_target: vec![Array2::zeros((h, w)); n],
        }
    }

    /// Quadratic part of the surrogate, `0.5 dᵀAd - dᵀr`, over all filters.
    /// Constant terms (target energy) are omitted; differences across filter
    /// iterates are exact.
    pub fn surrogate_quadratic(&self, bank: &FilterBank) -> f64 {
        let offsets: Vec<Vec<(isize, isize)>> =
            (0..self.n).map(|j| filter_offsets(bank, j)).collect();
        let mut q = 0.0;
        for j in 0..self.n {
            let dj = bank.filter(j);
            for jp in 0..self.n {
                let djp = bank.filter(jp);
                let mut term = 0.0;
                for (a, &(ar, ac)) in offsets[j].iter().enumerate() {
                    let va = dj.as_slice().unwrap()[a];
                    if va == 0.0 {
                        continue;
                    }
                    for (b, &(br, bc)) in offsets[jp].iter().enumerate() {
                        term += va * djp.as_slice().unwrap()[b] * self.cross_at(j, jp, ar - br, ac - bc);
                    }
                }
                q += 0.5 * term;
            }
            let mut lin = 0.0;
            for (a, &(ar, ac)) in offsets[j].iter().enumerate() {
                lin += dj.as_slice().unwrap()[a] * self.target_at(j, ar, ac);
            }
            q -= lin;
        }
        q
    }
}

fn filter_offsets(bank: &FilterBank, j: usize) -> Vec<(isize, isize)> {
    let (_, p) = bank.scale_of(j);
    let c = (p as isize - 1) / 2;
    let mut offs = Vec::with_capacity(p * p);
    for kr in 0..p as isize {
        for kc in 0..p as isize {
            offs.push((kr - c, kc - c));
        }
    }
    offs
}

/// Refits every filter by exact block-coordinate descent on the accumulated
/// surrogate, each block constrained to the unit Frobenius ball. Returns the
/// new bank and the stats augmented with this frame's maps.
pub fn update_filters(
    bank: &FilterBank,
    maps: &FeatureMapSet,
    target: &Frame,
    mut stats: DictionaryStats,
    cfg: &CscConfig,
) -> Result<(FilterBank, DictionaryStats)> {
    if maps.len() != bank.filter_count() {
        return Err(Error::InvalidParameter(format!(
            "map count {} does not match filter count {}",
            maps.len(),
            bank.filter_count()
        )));
    }
    if maps.shape() != stats.shape || target.dim() != stats.shape {
        return Err(Error::DimensionMismatch {
            expected: stats.shape,
            got: maps.shape(),
        });
    }

    stats.set_current(maps, target);
    if maps.is_all_zero() {
        return Ok((bank.clone(), stats));
    }

    let n = bank.filter_count();
    let mut new_bank = bank.clone();
    for _ in 0..cfg.dict_sweeps.max(1) {
        for j in 0..n {
            let offs = filter_offsets(&new_bank, j);
            let p2 = offs.len();

            // autocorrelation energy at zero lag; zero means this filter's
            // maps never fired and there is nothing to fit
            if stats.cross_at(j, j, 0, 0) <= 1e-14 {
                continue;
            }

            let mut hess = nalgebra::DMatrix::<f64>::zeros(p2, p2);
            for a in 0..p2 {
                for b in 0..p2 {
                    hess[(a, b)] =
                        stats.cross_at(j, j, offs[a].0 - offs[b].0, offs[a].1 - offs[b].1);
                }
            }
            let mut lin = nalgebra::DVector::<f64>::zeros(p2);
            for a in 0..p2 {
                let mut v = stats.target_at(j, offs[a].0, offs[a].1);
                for jp in 0..n {
                    if jp == j {
                        continue;
                    }
                    let djp = new_bank.filter(jp);
                    let offs_jp = filter_offsets(&new_bank, jp);
                    for (b, &(br, bc)) in offs_jp.iter().enumerate() {
                        let coeff = djp.as_slice().unwrap()[b];
                        if coeff != 0.0 {
                            v -= coeff * stats.cross_at(j, jp, offs[a].0 - br, offs[a].1 - bc);
                        }
                    }
                }
                lin[a] = v;
            }

            let trace: f64 = (0..p2).map(|a| hess[(a, a)]).sum();
            let ridge = 1e-9 * (1.0 + trace / p2 as f64);
            if let Some(sol) = solve_ball_constrained(&hess, &lin, ridge) {
                let (_, p) = new_bank.scale_of(j);
                let arr = Array2::from_shape_vec((p, p), sol.iter().copied().collect())
                    .expect("solution length matches patch");
                new_bank.set_filter_projected(j, arr);
            }
        }
    }
    Ok((new_bank, stats))
}

/// Minimizes `0.5 dᵀHd - dᵀg` subject to `||d|| <= 1` by solving the ridge
/// system and, when the unconstrained solution leaves the ball, searching the
/// Lagrange multiplier by bisection.
fn solve_ball_constrained(
    hess: &nalgebra::DMatrix<f64>,
    lin: &nalgebra::DVector<f64>,
    ridge: f64,
) -> Option<nalgebra::DVector<f64>> {
    let p2 = lin.len();
    let solve_with = |eta: f64| -> Option<nalgebra::DVector<f64>> {
        let mut m = hess.clone();
        for a in 0..p2 {
            m[(a, a)] += ridge + eta;
        }
        m.cholesky().map(|ch| ch.solve(lin))
    };

    let d0 = solve_with(0.0)?;
    if d0.norm() <= 1.0 {
        return Some(d0);
    }

    let mut hi = ridge.max(1e-9);
    let mut d_hi = solve_with(hi)?;
    let mut guard = 0;
    while d_hi.norm() > 1.0 && guard < 200 {
        hi *= 4.0;
        d_hi = solve_with(hi)?;
        guard += 1;
    }
    let mut lo = 0.0;
    let mut best = d_hi;
    for _ in 0..120 {
        let mid = 0.5 * (lo + hi);
        let d = solve_with(mid)?;
        if d.norm() > 1.0 {
            lo = mid;
        } else {
            hi = mid;
            best = d;
        }
        if (hi - lo) <= 1e-14 * hi.max(1.0) {
            break;
        }
    }
    Some(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::ScaleSpec;
    use crate::reference::{csc_objective_direct, direct_convolve_circular, prox_grad_csc};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tight_cfg() -> CscConfig {
        CscConfig {
            max_iters: 3000,
            tol: 1e-13,
            dict_sweeps: 1,
        }
    }

    fn unit_1x1_bank() -> FilterBank {
        let mut k = Array2::zeros((1, 1));
        k[(0, 0)] = 1.0;
        FilterBank::from_filters(vec![ScaleSpec { patch: 1, count: 1 }], vec![k]).unwrap()
    }

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| rng.gen_range(lo..hi))
    }

    #[test]
    fn soft_threshold_basic_values() {
        let g = Array2::from_elem((2, 2), 0.5);
        let out = soft_threshold(&g, 0.2).unwrap();
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-15));

        let g = Array2::from_elem((2, 2), -0.1);
        let out = soft_threshold(&g, 0.2).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        let g = Array2::from_shape_fn((3, 3), |(r, c)| r as f64 - c as f64);
        let out = soft_threshold(&g, 0.0).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn soft_threshold_rejects_negative_kappa() {
        assert!(soft_threshold(&Array2::zeros((2, 2)), -0.1).is_err());
    }

    #[test]
    fn zero_target_yields_zero_maps() {
        let bank = unit_1x1_bank();
        let target = Frame::zeros(16, 16);
        let scales = ScaleParams::uniform(&bank, 0.1).unwrap();
        let mut ws = CscWorkspace::new(&bank, 16, 16);
        let maps = update_feature_maps(&bank, &target, &scales, 1.0, &mut ws, &tight_cfg()).unwrap();
        assert!(maps.is_all_zero());
    }

    #[test]
    fn scalar_lasso_matches_soft_threshold_closed_form() {
        let bank = unit_1x1_bank();
        let target = Frame::from_elem(16, 16, 0.5).unwrap();
        let scales = ScaleParams::uniform(&bank, 0.1).unwrap();
        let mut ws = CscWorkspace::new(&bank, 16, 16);
        let maps = update_feature_maps(&bank, &target, &scales, 1.0, &mut ws, &tight_cfg()).unwrap();
        for &v in maps.map(0).iter() {
            assert!((v - 0.4).abs() <= 1e-12, "got {v}, want 0.4");
        }
        assert!(ws.last_report().converged);
    }

    #[test]
    fn residuals_below_tolerance_at_convergence() {
        let bank = FilterBank::streak_init(&[ScaleSpec { patch: 3, count: 2 }]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let target = Frame::new(random_grid(&mut rng, 16, 16, -0.3, 0.7)).unwrap();
        let scales = ScaleParams::uniform(&bank, 0.05).unwrap();
        let mut ws = CscWorkspace::new(&bank, 16, 16);
        let cfg = CscConfig {
            max_iters: 500,
            tol: 1e-6,
            dict_sweeps: 1,
        };
        let _ = update_feature_maps(&bank, &target, &scales, 1.0, &mut ws, &cfg).unwrap();
        let rep = ws.last_report();
        assert!(rep.converged, "no convergence after {} iters", rep.iterations);
        // residual thresholds are relative; reconstruct the same scaling
        assert!(rep.primal_residual <= 1e-6 * 16.0 + 1e-9);
        assert!(rep.dual_residual <= 1e-6 * 16.0 + 1e-9);
    }

    #[test]
    fn objective_matches_prox_grad_oracle_on_8x8() {
        let bank = FilterBank::streak_init(&[ScaleSpec { patch: 3, count: 1 }]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target_grid = random_grid(&mut rng, 8, 8, -0.5, 0.9);
        let target = Frame::new(target_grid.clone()).unwrap();
        let b = 0.08;
        let scales = ScaleParams::uniform(&bank, b).unwrap();
        let mut ws = CscWorkspace::new(&bank, 8, 8);
        let cfg = CscConfig {
            max_iters: 4000,
            tol: 1e-12,
            dict_sweeps: 1,
        };
        let maps = update_feature_maps(&bank, &target, &scales, 1.0, &mut ws, &cfg).unwrap();
        let mine = csc_objective_direct(
            &[bank.filter(0).clone()],
            &[b],
            &[maps.map(0).clone()],
            &target_grid,
        );
        let oracle = prox_grad_csc(&[bank.filter(0).clone()], &[b], &target_grid, 1e-10, 200_000);
        assert!(
            oracle.stationarity <= 1e-10,
            "oracle did not reach stationarity: {}",
            oracle.stationarity
        );
        let rel = (mine - oracle.objective).abs() / oracle.objective.abs().max(1e-30);
        assert!(rel <= 1e-4, "rel objective gap {rel}");
    }

    #[test]
    fn objective_non_increasing_up_to_oscillation_tolerance() {
        let bank = FilterBank::streak_init(&[ScaleSpec { patch: 3, count: 2 }]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let target = Frame::new(random_grid(&mut rng, 16, 16, -0.5, 0.9)).unwrap();
        let scales = ScaleParams::uniform(&bank, 0.05).unwrap();
        let cfg = CscConfig {
            max_iters: 1,
            tol: 1e-15,
            dict_sweeps: 1,
        };
        // step the solver one inner iteration at a time via the warm start
        let mut ws = CscWorkspace::new(&bank, 16, 16);
        let mut prev = f64::INFINITY;
        for _ in 0..60 {
            let _ = update_feature_maps(&bank, &target, &scales, 1.0, &mut ws, &cfg).unwrap();
            let obj = ws.last_report().objective;
            assert!(
                obj <= prev + 1e-4 * prev.abs().max(1.0),
                "objective rose: {prev} -> {obj}"
            );
            prev = obj;
        }
    }

    #[test]
    fn larger_penalty_never_densifies_maps() {
        let bank = FilterBank::streak_init(&[ScaleSpec { patch: 3, count: 1 }]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let target = Frame::new(random_grid(&mut rng, 12, 12, -0.5, 1.0)).unwrap();
        let mut prev_l0 = usize::MAX;
        for &b in &[0.01, 0.03, 0.1, 0.3, 1.0] {
            let scales = ScaleParams::uniform(&bank, b).unwrap();
            let mut ws = CscWorkspace::new(&bank, 12, 12);
            let maps =
                update_feature_maps(&bank, &target, &scales, 1.0, &mut ws, &tight_cfg()).unwrap();
            let l0 = maps.nonzero_count(0);
            assert!(l0 <= prev_l0, "kappa {b} densified {prev_l0} -> {l0}");
            prev_l0 = l0;
        }
    }

    #[test]
    fn zero_maps_leave_filters_unchanged() {
        let bank = FilterBank::streak_init(&[ScaleSpec { patch: 3, count: 2 }]).unwrap();
        let maps = FeatureMapSet::zeros(&bank, 16, 16);
        let target = Frame::from_elem(16, 16, 0.3).unwrap();
        let stats = DictionaryStats::new(&bank, 16, 16);
        let (bank2, _stats) =
            update_filters(&bank, &maps, &target, stats, &CscConfig::default()).unwrap();
        assert_eq!(bank, bank2);
    }

    #[test]
    fn updated_filters_stay_in_unit_ball() {
        let bank = FilterBank::streak_init(&[ScaleSpec { patch: 3, count: 2 }]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let maps = FeatureMapSet::from_maps(
            (0..2).map(|_| random_grid(&mut rng, 16, 16, -0.2, 1.0)).collect(),
        )
        .unwrap();
        let target = Frame::new(random_grid(&mut rng, 16, 16, 0.0, 1.0)).unwrap();
        let stats = DictionaryStats::new(&bank, 16, 16);
        let (bank2, _) = update_filters(&bank, &maps, &target, stats, &CscConfig::default()).unwrap();
        assert!(bank2.max_filter_norm() <= 1.0 + 1e-12);
    }

    #[test]
    fn delta_maps_recover_the_generating_kernel() {
        let scales = vec![ScaleSpec { patch: 5, count: 1 }];
        let bank = FilterBank::streak_init(&scales).unwrap();

        // the kernel the data was made from (unit norm, not the init kernel)
        let mut kernel = Array2::zeros((5, 5));
        for i in 0..5 {
            kernel[(i, 4 - i)] = 1.0;
        }
        let norm = kernel.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
        kernel.mapv_inplace(|v| v / norm);

        let mut delta = Array2::zeros((16, 16));
        delta[(8, 7)] = 1.0;
        let target = Frame::new(direct_convolve_circular(&kernel, &delta)).unwrap();
        let maps = FeatureMapSet::from_maps(vec![delta]).unwrap();

        let mut stats = DictionaryStats::new(&bank, 16, 16);
        let mut cur = bank;
        for _ in 0..10 {
            let (b2, s2) = update_filters(&cur, &maps, &target, stats, &CscConfig::default()).unwrap();
            cur = b2;
            stats = s2;
            stats.commit_frame(0.99);
        }
        let rec = cur.filter(0);
        let dot: f64 = rec.iter().zip(kernel.iter()).map(|(a, b)| a * b).sum();
        let rn = rec.iter().map(|v| v * v).sum::<f64>().sqrt();
        let corr = dot / (rn * 1.0);
        assert!(corr > 0.99, "correlation {corr}");
    }

    #[test]
    fn surrogate_non_increasing_over_sweeps() {
        let bank = FilterBank::streak_init(&[ScaleSpec { patch: 3, count: 3 }]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let maps = FeatureMapSet::from_maps(
            (0..3)
                .map(|_| {
                    // sparse maps: mostly zero with a few spikes
                    let mut m = Array2::zeros((16, 16));
                    for _ in 0..12 {
                        let r = rng.gen_range(0..16);
                        let c = rng.gen_range(0..16);
                        m[(r, c)] = rng.gen_range(-1.0..1.0f64);
                    }
                    m
                })
                .collect(),
        )
        .unwrap();
        let target = Frame::new(random_grid(&mut rng, 16, 16, 0.0, 1.0)).unwrap();

        let mut stats = DictionaryStats::new(&bank, 16, 16);
        stats.set_current(&maps, &target);
        let mut cur = bank;
        let mut prev = stats.surrogate_quadratic(&cur);
        let cfg = CscConfig {
            dict_sweeps: 1,
            ..CscConfig::default()
        };
        for _ in 0..3 {
            let fresh = DictionaryStats::new(&cur, 16, 16);
            let (b2, _s) = update_filters(&cur, &maps, &target, fresh, &cfg).unwrap();
            cur = b2;
            let q = stats.surrogate_quadratic(&cur);
            assert!(q <= prev + 1e-10, "surrogate rose {prev} -> {q}");
            prev = q;
        }
    }
}
