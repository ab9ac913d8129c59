//! Row-column 2-D FFT over real grids.
//!
//! Plans are cached per thread, so repeated transforms of the same shape
//! (the common case: one stream, one frame size) reuse their twiddle tables.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

thread_local! {
    static PLANS: RefCell<PlanCache> = RefCell::new(PlanCache::new());
}

struct PlanCache {
    planner: FftPlanner<f64>,
    forward: HashMap<usize, Arc<dyn Fft<f64>>>,
    inverse: HashMap<usize, Arc<dyn Fft<f64>>>,
}

impl PlanCache {
    fn new() -> Self {
        Self {
            planner: FftPlanner::new(),
            forward: HashMap::new(),
            inverse: HashMap::new(),
        }
    }

    fn forward(&mut self, n: usize) -> Arc<dyn Fft<f64>> {
        if let Some(p) = self.forward.get(&n) {
            return p.clone();
        }
        let p = self.planner.plan_fft_forward(n);
        self.forward.insert(n, p.clone());
        p
    }

    fn inverse(&mut self, n: usize) -> Arc<dyn Fft<f64>> {
        if let Some(p) = self.inverse.get(&n) {
            return p.clone();
        }
        let p = self.planner.plan_fft_inverse(n);
        self.inverse.insert(n, p.clone());
        p
    }
}

fn transform_2d(data: &mut Array2<Complex64>, forward: bool) {
    let (h, w) = data.dim();
    PLANS.with(|cache| {
        let mut cache = cache.borrow_mut();
        let row_plan = if forward { cache.forward(w) } else { cache.inverse(w) };
        let col_plan = if forward { cache.forward(h) } else { cache.inverse(h) };

        let mut row_buf = vec![Complex64::default(); w];
        for r in 0..h {
            for c in 0..w {
                row_buf[c] = data[(r, c)];
            }
            row_plan.process(&mut row_buf);
            for c in 0..w {
                data[(r, c)] = row_buf[c];
            }
        }

        let mut col_buf = vec![Complex64::default(); h];
        for c in 0..w {
            for r in 0..h {
                col_buf[r] = data[(r, c)];
            }
            col_plan.process(&mut col_buf);
            for r in 0..h {
                data[(r, c)] = col_buf[r];
            }
        }
    });
}

/// Forward 2-D DFT of a real grid (unnormalized).
pub fn fft2(real: &Array2<f64>) -> Array2<Complex64> {
    let mut data = real.mapv(|v| Complex64::new(v, 0.0));
    transform_2d(&mut data, true);
    data
}

/// Inverse 2-D DFT, returning the real part scaled by `1/(h*w)`.
pub fn ifft2(spectrum: &Array2<Complex64>) -> Array2<f64> {
    let mut data = spectrum.clone();
    transform_2d(&mut data, false);
    let norm = 1.0 / (data.len() as f64);
    data.mapv(|v| v.re * norm)
}

/// Embeds a `p x p` kernel (odd `p`, taps centered at the origin) into an
/// `h x w` grid with circular wrap-around, ready for spectral products.
pub fn pad_filter_centered(filter: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let p = filter.nrows();
    debug_assert_eq!(p, filter.ncols());
    debug_assert_eq!(p % 2, 1);
    let c = (p as isize - 1) / 2;
    let mut out = Array2::zeros((h, w));
    for (idx, &v) in filter.indexed_iter() {
        let dr = idx.0 as isize - c;
        let dc = idx.1 as isize - c;
        let r = dr.rem_euclid(h as isize) as usize;
        let cc = dc.rem_euclid(w as isize) as usize;
        out[(r, cc)] += v;
    }
    out
}
