//! Slow, direct reference implementations used to verify the fast paths.
//!
//! Everything here is written against the mathematical definition only:
//! nested loops in the spatial domain, no FFTs, no shared code with the
//! solvers under test. These routines back the oracle comparisons in the
//! test suites; they are not meant to be fast.

use ndarray::Array2;

/// Circular convolution `(d ⊗ m)[n] = Σ_k d[k] m[n - k]` with the kernel taps
/// centered at the origin (odd kernel side).
pub fn direct_convolve_circular(filter: &Array2<f64>, map: &Array2<f64>) -> Array2<f64> {
    let (h, w) = map.dim();
    let p = filter.nrows();
    assert_eq!(p % 2, 1, "kernel side must be odd");
    let c = (p as isize - 1) / 2;
    let mut out = Array2::zeros((h, w));
    for r in 0..h as isize {
        for cc in 0..w as isize {
            let mut acc = 0.0;
            for kr in 0..p as isize {
                for kc in 0..p as isize {
                    let dr = kr - c;
                    let dc = kc - c;
                    let sr = (r - dr).rem_euclid(h as isize) as usize;
                    let sc = (cc - dc).rem_euclid(w as isize) as usize;
                    acc += filter[(kr as usize, kc as usize)] * map[(sr, sc)];
                }
            }
            out[(r as usize, cc as usize)] = acc;
        }
    }
    out
}

/// Adjoint of [`direct_convolve_circular`]: circular correlation
/// `(d ★ y)[n] = Σ_k d[k] y[n + k]` with centered taps.
pub fn direct_correlate_circular(filter: &Array2<f64>, grid: &Array2<f64>) -> Array2<f64> {
    let (h, w) = grid.dim();
    let p = filter.nrows();
    let c = (p as isize - 1) / 2;
    let mut out = Array2::zeros((h, w));
    for r in 0..h as isize {
        for cc in 0..w as isize {
            let mut acc = 0.0;
            for kr in 0..p as isize {
                for kc in 0..p as isize {
                    let dr = kr - c;
                    let dc = kc - c;
                    let sr = (r + dr).rem_euclid(h as isize) as usize;
                    let sc = (cc + dc).rem_euclid(w as isize) as usize;
                    acc += filter[(kr as usize, kc as usize)] * grid[(sr, sc)];
                }
            }
            out[(r as usize, cc as usize)] = acc;
        }
    }
    out
}

/// Result of the accelerated proximal-gradient reference solver.
pub struct LassoSolution {
    pub maps: Vec<Array2<f64>>,
    pub objective: f64,
    pub stationarity: f64,
    pub iterations: usize,
}

/// Objective `0.5 * ||Σ_j d_j ⊗ m_j - y||^2 + Σ_j κ_j ||m_j||_1` evaluated
/// with direct convolutions.
pub fn csc_objective_direct(
    filters: &[Array2<f64>],
    kappas: &[f64],
    maps: &[Array2<f64>],
    target: &Array2<f64>,
) -> f64 {
    let mut synth = Array2::zeros(target.dim());
    for (d, m) in filters.iter().zip(maps) {
        synth = synth + direct_convolve_circular(d, m);
    }
    let fit: f64 = synth
        .iter()
        .zip(target.iter())
        .map(|(s, t)| (s - t) * (s - t))
        .sum();
    let l1: f64 = kappas
        .iter()
        .zip(maps)
        .map(|(k, m)| k * m.iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    0.5 * fit + l1
}

/// Accelerated proximal gradient (FISTA) for the convolutional lasso,
/// run until the subgradient stationarity residual drops below
/// `stationarity_tol` or `max_iters` is hit.
pub fn prox_grad_csc(
    filters: &[Array2<f64>],
    kappas: &[f64],
    target: &Array2<f64>,
    stationarity_tol: f64,
    max_iters: usize,
) -> LassoSolution {
    let dims = target.dim();
    let n = filters.len();
    assert_eq!(kappas.len(), n);

    // Lipschitz bound of the data-fit gradient via power iteration on AᵀA.
    let mut v: Vec<Array2<f64>> = (0..n)
        .map(|j| Array2::from_shape_fn(dims, |(r, c)| ((r * 31 + c * 17 + j * 7) % 13) as f64 - 6.0))
        .collect();
    let mut lip = 1.0;
    for _ in 0..300 {
        let mut synth = Array2::zeros(dims);
        for (d, m) in filters.iter().zip(&v) {
            synth = synth + direct_convolve_circular(d, m);
        }
        let next: Vec<Array2<f64>> = filters
            .iter()
            .map(|d| direct_correlate_circular(d, &synth))
            .collect();
        let norm: f64 = next.iter().map(|m| m.iter().map(|x| x * x).sum::<f64>()).sum::<f64>();
        let norm = norm.sqrt();
        if norm < 1e-300 {
            break;
        }
        lip = norm;
        v = next.into_iter().map(|m| m / norm).collect();
    }
    let lip = (lip * 1.02).max(1e-12);

    let grad = |maps: &[Array2<f64>]| -> (Vec<Array2<f64>>, Array2<f64>) {
        let mut synth = Array2::zeros(dims);
        for (d, m) in filters.iter().zip(maps) {
            synth = synth + direct_convolve_circular(d, m);
        }
        let resid = synth - target;
        let g = filters
            .iter()
            .map(|d| direct_correlate_circular(d, &resid))
            .collect();
        (g, resid)
    };

    let stationarity = |maps: &[Array2<f64>], g: &[Array2<f64>]| -> f64 {
        let mut worst = 0.0f64;
        for ((m, gj), &k) in maps.iter().zip(g).zip(kappas) {
            for (mv, gv) in m.iter().zip(gj.iter()) {
                let r = if *mv != 0.0 {
                    (gv + k * mv.signum()).abs()
                } else {
                    (gv.abs() - k).max(0.0)
                };
                worst = worst.max(r);
            }
        }
        worst
    };

    let mut x: Vec<Array2<f64>> = (0..n).map(|_| Array2::zeros(dims)).collect();
    let mut y = x.clone();
    let mut theta = 1.0f64;
    let mut iterations = 0;
    for it in 0..max_iters {
        iterations = it + 1;
        let (gy, _) = grad(&y);
        let mut x_next = Vec::with_capacity(n);
        for j in 0..n {
            let thresh = kappas[j] / lip;
            let stepped = &y[j] - &(&gy[j] / lip);
            x_next.push(stepped.mapv(|v| {
                if v > thresh {
                    v - thresh
                } else if v < -thresh {
                    v + thresh
                } else {
                    0.0
                }
            }));
        }
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let beta = (theta - 1.0) / theta_next;
        y = x_next
            .iter()
            .zip(&x)
            .map(|(xn, xo)| xn + &((xn - xo) * beta))
            .collect();
        theta = theta_next;
        x = x_next;

        if it % 25 == 24 {
            let (gx, _) = grad(&x);
            if stationarity(&x, &gx) <= stationarity_tol {
                break;
            }
        }
    }
    let (gx, _) = grad(&x);
    LassoSolution {
        objective: csc_objective_direct(filters, kappas, &x, target),
        stationarity: stationarity(&x, &gx),
        maps: x,
        iterations,
    }
}

/// Masked-quadratic-plus-anisotropic-TV objective
/// `Σ_p h_p (f_p - o_p)^2 + weight * TV(f)` evaluated directly.
pub fn tv_objective_direct(
    obs: &Array2<f64>,
    mask: &Array2<u8>,
    weight: f64,
    f: &Array2<f64>,
) -> f64 {
    let (h, w) = f.dim();
    let mut data = 0.0;
    for ((idx, &fv), &ov) in f.indexed_iter().zip(obs.iter()) {
        if mask[idx] == 1 {
            data += (fv - ov) * (fv - ov);
        }
    }
    let mut tv = 0.0;
    for r in 0..h {
        for c in 0..w {
            if c + 1 < w {
                tv += (f[(r, c + 1)] - f[(r, c)]).abs();
            }
            if r + 1 < h {
                tv += (f[(r + 1, c)] - f[(r, c)]).abs();
            }
        }
    }
    data + weight * tv
}

/// Target-level subgradient descent on the masked TV objective.
///
/// Uses Polyak-style steps against a decreasing level gap, which drives the
/// iterates to the optimum as the gap shrinks. Returns the best point found.
pub fn tv_subgradient_minimize(
    obs: &Array2<f64>,
    mask: &Array2<u8>,
    weight: f64,
    iters: usize,
) -> (Array2<f64>, f64) {
    let (h, w) = obs.dim();
    let mut x = obs.clone();
    let mut best = x.clone();
    let mut f_best = tv_objective_direct(obs, mask, weight, &x);
    let mut gap = 0.1 * (f_best.abs() + 1.0);
    let mut since_improve = 0usize;

    for _ in 0..iters {
        // subgradient
        let mut g = Array2::zeros((h, w));
        for ((idx, &xv), &ov) in x.indexed_iter().zip(obs.iter()) {
            if mask[idx] == 1 {
                g[idx] += 2.0 * (xv - ov);
            }
        }
        for r in 0..h {
            for c in 0..w {
                if c + 1 < w {
                    let s = (x[(r, c + 1)] - x[(r, c)]).signum();
                    g[(r, c + 1)] += weight * s;
                    g[(r, c)] -= weight * s;
                }
                if r + 1 < h {
                    let s = (x[(r + 1, c)] - x[(r, c)]).signum();
                    g[(r + 1, c)] += weight * s;
                    g[(r, c)] -= weight * s;
                }
            }
        }
        let gnorm2: f64 = g.iter().map(|v| v * v).sum();
        if gnorm2 < 1e-300 {
            break;
        }
        let f_cur = tv_objective_direct(obs, mask, weight, &x);
        if f_cur < f_best - 1e-15 {
            f_best = f_cur;
            best = x.clone();
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve > 400 {
                gap *= 0.5;
                since_improve = 0;
                // restart from the incumbent so progress is never lost
                x = best.clone();
                continue;
            }
        }
        let step = (f_cur - (f_best - gap)) / gnorm2;
        let step = step.max(0.0);
        x = &x - &(&g * step);
    }
    (best, f_best)
}

/// Plain double-loop SSIM with an 11x11 Gaussian window (sigma 1.5),
/// averaged over all fully interior window positions.
pub fn ssim_naive(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    let c1 = (0.01f64);
    let c1 = c1 * c1;
    let c2 = (0.03f64);
    let c2 = c2 * c2;

    let (h, w) = a.dim();
    assert!(h >= WIN && w >= WIN);
    let half = WIN / 2;
    let mut weights = [[0.0f64; WIN]; WIN];
    let mut wsum = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let dy = i as f64 - half as f64;
            let dx = j as f64 - half as f64;
            *v = (-(dy * dy + dx * dx) / (2.0 * SIGMA * SIGMA)).exp();
            wsum += *v;
        }
    }
    for row in weights.iter_mut() {
        for v in row.iter_mut() {
            *v /= wsum;
        }
    }

    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=(h - WIN) {
        for c0 in 0..=(w - WIN) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for i in 0..WIN {
                for j in 0..WIN {
                    mu_a += weights[i][j] * a[(r0 + i, c0 + j)];
                    mu_b += weights[i][j] * b[(r0 + i, c0 + j)];
                }
            }
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for i in 0..WIN {
                for j in 0..WIN {
                    let da = a[(r0 + i, c0 + j)] - mu_a;
                    let db = b[(r0 + i, c0 + j)] - mu_b;
                    var_a += weights[i][j] * da * da;
                    var_b += weights[i][j] * db * db;
                    cov += weights[i][j] * da * db;
                }
            }
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}
