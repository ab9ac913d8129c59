//! Moving-object support estimation as exact binary MRF minimization.
//!
//! The per-pixel energy couples a quadratic data term (background fit vs
//! foreground fit) with a Potts smoothness prior over the 4-neighborhood and
//! a per-pixel disagreement cost against the previous frame's mask. All
//! pairwise weights are non-negative, so the energy is submodular and a
//! single s-t min cut yields the exact global minimizer.

use crate::error::{Error, Result};
use crate::frame::{Frame, SupportMask};
use ndarray::Array2;

/// Binary labeling energy on a pixel grid: two unary costs per pixel plus
/// non-negative Potts weights on horizontal and vertical neighbor edges.
#[derive(Debug, Clone)]
pub struct PixelEnergy {
    cost0: Array2<f64>,
    cost1: Array2<f64>,
    /// weight of edge ((r,c),(r,c+1)); shape h x (w-1)
    wh: Array2<f64>,
    /// weight of edge ((r,c),(r+1,c)); shape (h-1) x w
    wv: Array2<f64>,
}

impl PixelEnergy {
    /// Validates shapes and rejects negative pairwise weights (they would
    /// break submodularity and with it the exactness guarantee).
    pub fn new(
        cost0: Array2<f64>,
        cost1: Array2<f64>,
        wh: Array2<f64>,
        wv: Array2<f64>,
    ) -> Result<Self> {
        let (h, w) = cost0.dim();
        if cost1.dim() != (h, w) {
            return Err(Error::DimensionMismatch {
                expected: (h, w),
                got: cost1.dim(),
            });
        }
        if wh.dim() != (h, w.saturating_sub(1)) || wv.dim() != (h.saturating_sub(1), w) {
            return Err(Error::InvalidParameter(
                "pairwise weight grids must be h x (w-1) and (h-1) x w".into(),
            ));
        }
        for v in cost0.iter().chain(cost1.iter()) {
            if !v.is_finite() {
                return Err(Error::NonFinite("unary cost"));
            }
        }
        for v in wh.iter().chain(wv.iter()) {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::InvalidParameter(
                    "pairwise weights must be finite and non-negative".into(),
                ));
            }
        }
        Ok(Self { cost0, cost1, wh, wv })
    }

    /// Uniform Potts weight `alpha` on every 4-neighbor edge.
    pub fn with_uniform_edges(
        cost0: Array2<f64>,
        cost1: Array2<f64>,
        alpha: f64,
    ) -> Result<Self> {
        let (h, w) = cost0.dim();
        Self::new(
            cost0,
            cost1,
            Array2::from_elem((h, w - 1), alpha),
            Array2::from_elem((h - 1, w), alpha),
        )
    }

    pub fn dim(&self) -> (usize, usize) {
        self.cost0.dim()
    }
}

/// Builds the support-mask energy for the current frame.
///
/// Unaries: `cost0 = (X-B-R)²/(2σ²) + α·H_prev`,
/// `cost1 = (X-F-R)²/(2σ²) + β + α·(1-H_prev)` — the temporal disagreement
/// cost against the previous mask is folded into the unaries, the spatial
/// smoothness is a uniform `α` Potts term on the 4-neighborhood.
#[allow(clippy::too_many_arguments)]
pub fn build_energy(
    x: &Frame,
    b_warped: &Frame,
    f: &Frame,
    r: &Frame,
    sigma2: f64,
    h_prev: &SupportMask,
    alpha: f64,
    beta: f64,
) -> Result<PixelEnergy> {
    if sigma2 <= 0.0 || !sigma2.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "sigma^2 must be positive, got {sigma2}"
        )));
    }
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::InvalidParameter(
            "alpha and beta must be non-negative".into(),
        ));
    }
    x.same_dim(b_warped)?;
    x.same_dim(f)?;
    x.same_dim(r)?;
    if x.dim() != h_prev.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            got: h_prev.dim(),
        });
    }
    let inv = 1.0 / (2.0 * sigma2);
    let (h, w) = x.dim();
    let mut cost0 = Array2::zeros((h, w));
    let mut cost1 = Array2::zeros((h, w));
    for rr in 0..h {
        for cc in 0..w {
            let prev = f64::from(h_prev.get(rr, cc));
            let d0 = x.get(rr, cc) - b_warped.get(rr, cc) - r.get(rr, cc);
            let d1 = x.get(rr, cc) - f.get(rr, cc) - r.get(rr, cc);
            cost0[(rr, cc)] = d0 * d0 * inv + alpha * prev;
            cost1[(rr, cc)] = d1 * d1 * inv + beta + alpha * (1.0 - prev);
        }
    }
    PixelEnergy::with_uniform_edges(cost0, cost1, alpha)
}

/// Evaluates `Σ unary(label) + Σ_edges weight·[labels differ]`.
pub fn energy_of(energy: &PixelEnergy, labeling: &SupportMask) -> Result<f64> {
    let (h, w) = energy.dim();
    if labeling.dim() != (h, w) {
        return Err(Error::DimensionMismatch {
            expected: (h, w),
            got: labeling.dim(),
        });
    }
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            total += if labeling.get(r, c) == 0 {
                energy.cost0[(r, c)]
            } else {
                energy.cost1[(r, c)]
            };
            if c + 1 < w && labeling.get(r, c) != labeling.get(r, c + 1) {
                total += energy.wh[(r, c)];
            }
            if r + 1 < h && labeling.get(r, c) != labeling.get(r + 1, c) {
                total += energy.wv[(r, c)];
            }
        }
    }
    Ok(total)
}

/// Returns a global minimizer of the energy via s-t min cut (Dinic).
///
/// Tie-breaking is deterministic and conservative: a pixel whose label is not
/// forced by any minimum cut is labeled 0 (background).
pub fn min_cut_solve(energy: &PixelEnergy) -> Result<SupportMask> {
    let (h, w) = energy.dim();
    let n = h * w;
    let source = n;
    let sink = n + 1;
    let mut graph = FlowGraph::new(n + 2);

    // label 1 <=> source side: cutting p->t pays cost1, cutting s->p pays cost0
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            graph.add_edge(source, p, energy.cost0[(r, c)], 0.0);
            graph.add_edge(p, sink, energy.cost1[(r, c)], 0.0);
            if c + 1 < w {
                let a = energy.wh[(r, c)];
                graph.add_edge(p, p + 1, a, a);
            }
            if r + 1 < h {
                let a = energy.wv[(r, c)];
                graph.add_edge(p, p + w, a, a);
            }
        }
    }

    graph.max_flow(source, sink);
    let reachable = graph.residual_reachable(source);
    let mut mask = SupportMask::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            if reachable[r * w + c] {
                mask.set(r, c, 1);
            }
        }
    }
    Ok(mask)
}

/// Dinic max flow with f64 capacities. Residual capacities below a
/// magnitude-relative epsilon are treated as saturated.
struct FlowGraph {
    to: Vec<u32>,
    cap: Vec<f64>,
    adj: Vec<Vec<u32>>,
    eps: f64,
    max_cap: f64,
}

impl FlowGraph {
    fn new(nodes: usize) -> Self {
        Self {
            to: Vec::new(),
            cap: Vec::new(),
            adj: vec![Vec::new(); nodes],
            eps: 0.0,
            max_cap: 0.0,
        }
    }

    fn add_edge(&mut self, u: usize, v: usize, cap_uv: f64, cap_vu: f64) {
        let idx = self.to.len() as u32;
        self.to.push(v as u32);
        self.cap.push(cap_uv);
        self.to.push(u as u32);
        self.cap.push(cap_vu);
        self.adj[u].push(idx);
        self.adj[v].push(idx + 1);
        self.max_cap = self.max_cap.max(cap_uv).max(cap_vu);
    }

    fn bfs(&self, s: usize, t: usize, level: &mut [i32]) -> bool {
        level.fill(-1);
        level[s] = 0;
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            for &e in &self.adj[u] {
                let v = self.to[e as usize] as usize;
                if level[v] < 0 && self.cap[e as usize] > self.eps {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        level[t] >= 0
    }

    fn dfs(
        &mut self,
        u: usize,
        t: usize,
        pushed: f64,
        level: &[i32],
        iter: &mut [usize],
    ) -> f64 {
        if u == t {
            return pushed;
        }
        while iter[u] < self.adj[u].len() {
            let e = self.adj[u][iter[u]] as usize;
            let v = self.to[e] as usize;
            if level[v] == level[u] + 1 && self.cap[e] > self.eps {
                let d = self.dfs(v, t, pushed.min(self.cap[e]), level, iter);
                if d > self.eps {
                    self.cap[e] -= d;
                    self.cap[e ^ 1] += d;
                    return d;
                }
            }
            iter[u] += 1;
        }
        0.0
    }

    fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        self.eps = 1e-12 * (1.0 + self.max_cap);
        let n = self.adj.len();
        let mut flow = 0.0;
        let mut level = vec![-1i32; n];
        while self.bfs(s, t, &mut level) {
            let mut iter = vec![0usize; n];
            loop {
                let pushed = self.dfs(s, t, f64::INFINITY, &level, &mut iter);
                if pushed <= self.eps {
                    break;
                }
                flow += pushed;
            }
        }
        flow
    }

    fn residual_reachable(&self, s: usize) -> Vec<bool> {
        let mut seen = vec![false; self.adj.len()];
        seen[s] = true;
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            for &e in &self.adj[u] {
                let v = self.to[e as usize] as usize;
                if !seen[v] && self.cap[e as usize] > self.eps {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen
    }
}
