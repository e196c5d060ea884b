//! Smoothed dynamic programming: the max of the exact recursion is replaced
//! by a temperature-`t` LogSumExp, and backtracking replaces each argmax by
//! the softmax expectation of the row index.
//!
//! For a window of `k` values with maximum `m`,
//! `m <= lse_t <= m + ln(k) / t`, so choosing `t = ln(2Δ + 1) / ε` keeps
//! each step within `ε` of the exact recursion.

use rayon::prelude::*;

use crate::costmodel::{softmax_into, CostVolume};
use crate::dynprog::{window, SmoothnessSpec};
use crate::error::{Error, Result};
use crate::grid::{Grid3, Surfaces};

/// `(1/t) · ln Σ_{lo..=hi} exp(t · v)`, max-subtracted.
pub fn logsumexp_window(v: &[f64], lo: usize, hi: usize, t: f64) -> Result<f64> {
    if lo > hi {
        return Err(Error::InvalidParameter(format!("empty window [{lo}, {hi}]")));
    }
    if hi >= v.len() {
        return Err(Error::Dimension(format!(
            "window [{lo}, {hi}] exceeds {} values",
            v.len()
        )));
    }
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::InvalidParameter(format!("temperature must be positive, got {t}")));
    }
    Ok(lse(&v[lo..=hi], t))
}

#[inline]
fn lse(w: &[f64], t: f64) -> f64 {
    let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = w.iter().map(|&v| (t * (v - m)).exp()).sum();
    m + s.ln() / t
}

/// Smallest temperature with `ln(2Δ + 1) / t <= ε`.
pub fn select_temperature(max_delta: usize, epsilon: f64) -> Result<f64> {
    if max_delta == 0 {
        return Err(Error::InvalidParameter("max delta must be at least 1".into()));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }
    Ok(((2 * max_delta + 1) as f64).ln() / epsilon)
}

/// Forward tables and softmax caches of one surface.
#[derive(Clone, Debug)]
pub struct SurfaceState {
    width: usize,
    depth: usize,
    temperature: f64,
    deltas: Vec<usize>,
    tau: Vec<f64>,
    /// start of each `(x, z)` window's weights in `weights`, for `x >= 1`
    offsets: Vec<usize>,
    weights: Vec<f64>,
    final_weights: Vec<f64>,
    centers: Vec<usize>,
    positions: Vec<f64>,
}

impl SurfaceState {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    #[inline]
    pub fn tau(&self, x: usize, z: usize) -> f64 {
        self.tau[x * self.depth + z]
    }

    pub fn tau_column(&self, x: usize) -> &[f64] {
        &self.tau[x * self.depth..(x + 1) * self.depth]
    }

    /// Window `[lo, hi]` of column `x - 1` feeding `τ_{x,z}`, for `x >= 1`.
    #[inline]
    pub fn window(&self, x: usize, z: usize) -> (usize, usize) {
        window(z, self.deltas[x - 1], self.depth)
    }

    /// Cached softmax weights over [`Self::window`]`(x, z)`.
    pub fn weights(&self, x: usize, z: usize) -> &[f64] {
        let (lo, hi) = self.window(x, z);
        let o = self.offsets[x * self.depth + z];
        &self.weights[o..o + hi - lo + 1]
    }

    pub fn final_weights(&self) -> &[f64] {
        &self.final_weights
    }

    /// Rounded backtracking centers, one per column; empty before
    /// backtracking. `centers()[x]` selects the window used for `z_{x-1}`.
    pub fn centers(&self) -> &[usize] {
        &self.centers
    }

    /// Backtracked positions; empty before backtracking.
    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn is_backtracked(&self) -> bool {
        self.positions.len() == self.width
    }

    fn forward(costs: &[f64], width: usize, depth: usize, deltas: &[usize], t: f64) -> Self {
        let mut tau = vec![0.0; width * depth];
        tau[..depth].copy_from_slice(&costs[..depth]);
        let mut offsets = vec![0usize; width * depth];
        let mut weights = Vec::new();
        for x in 1..width {
            let delta = deltas[x - 1];
            let (prev, cur) = tau.split_at_mut(x * depth);
            let prev = &prev[(x - 1) * depth..];
            for z in 0..depth {
                let (lo, hi) = window(z, delta, depth);
                let w = &prev[lo..=hi];
                let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let start = weights.len();
                let mut s = 0.0;
                for &v in w {
                    let e = (t * (v - m)).exp();
                    weights.push(e);
                    s += e;
                }
                weights[start..].iter_mut().for_each(|e| *e /= s);
                offsets[x * depth + z] = start;
                cur[z] = costs[x * depth + z] + (m + s.ln() / t);
            }
        }
        let mut final_weights = vec![0.0; depth];
        softmax_into(&tau[(width - 1) * depth..], t, &mut final_weights);
        SurfaceState {
            width,
            depth,
            temperature: t,
            deltas: deltas.to_vec(),
            tau,
            offsets,
            weights,
            final_weights,
            centers: Vec::new(),
            positions: Vec::new(),
        }
    }

    fn backtrack(&mut self) -> Vec<f64> {
        let (width, depth) = (self.width, self.depth);
        let mut z = vec![0.0; width];
        let mut centers = vec![0usize; width];
        z[width - 1] = expectation(0, &self.final_weights);
        for x in (1..width).rev() {
            let k = round_center(z[x], depth);
            centers[x] = k;
            let (lo, _) = self.window(x, k);
            z[x - 1] = expectation(lo, self.weights(x, k));
        }
        centers[0] = round_center(z[0], depth);
        self.centers = centers;
        self.positions = z.clone();
        z
    }
}

#[inline]
fn expectation(lo: usize, w: &[f64]) -> f64 {
    w.iter()
        .enumerate()
        .map(|(j, &p)| (lo + j) as f64 * p)
        .sum()
}

/// `round(z)` clamped to a valid row; halves round away from zero.
#[inline]
pub(crate) fn round_center(z: f64, depth: usize) -> usize {
    (z.round().max(0.0) as usize).min(depth - 1)
}

/// Forward tables for all surfaces.
#[derive(Clone, Debug)]
pub struct DPState {
    surfaces: Vec<SurfaceState>,
}

impl DPState {
    pub fn surfaces(&self) -> usize {
        self.surfaces.len()
    }

    pub fn surface(&self, i: usize) -> &SurfaceState {
        &self.surfaces[i]
    }

    pub fn width(&self) -> usize {
        self.surfaces.first().map_or(0, |s| s.width)
    }

    pub fn depth(&self) -> usize {
        self.surfaces.first().map_or(0, |s| s.depth)
    }

    /// All `τ` values as an `N × X × Z` grid.
    pub fn tau(&self) -> Grid3 {
        let data = self.surfaces.iter().flat_map(|s| s.tau.iter().copied()).collect();
        Grid3::from_vec(self.surfaces(), self.width(), self.depth(), data)
            .expect("surface states share dimensions")
    }

    /// `max_z τ_{X-1,z}` per surface: the smoothed optimal objective.
    pub fn soft_totals(&self) -> Vec<f64> {
        self.surfaces
            .iter()
            .map(|s| {
                s.tau_column(s.width - 1)
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    pub fn is_backtracked(&self) -> bool {
        self.surfaces.iter().all(SurfaceState::is_backtracked)
    }

    pub(crate) fn surfaces_iter(&self) -> impl Iterator<Item = &SurfaceState> {
        self.surfaces.iter()
    }
}

/// The smoothed forward recursion with its softmax caches.
pub fn soft_forward(c: &CostVolume, spec: &SmoothnessSpec) -> Result<DPState> {
    spec.check_dims(c)?;
    let (width, depth) = (c.width(), c.depth());
    let surfaces = (0..c.surfaces())
        .into_par_iter()
        .map(|i| {
            SurfaceState::forward(
                c.surface(i),
                width,
                depth,
                spec.deltas_of(i),
                spec.temperature(i),
            )
        })
        .collect();
    Ok(DPState { surfaces })
}

/// Soft backtracking. Records the rounded window centers and positions in
/// `state` for the backward pass.
pub fn soft_backtrack(state: &mut DPState) -> Surfaces {
    let rows: Vec<Vec<f64>> = state.surfaces.iter_mut().map(SurfaceState::backtrack).collect();
    Surfaces::from_rows(&rows).expect("surface states share one width")
}

/// Forward pass then backtracking.
pub fn segment(c: &CostVolume, spec: &SmoothnessSpec) -> Result<Surfaces> {
    segment_with_state(c, spec).map(|(s, _)| s)
}

/// Like [`segment`], keeping the state needed by
/// [`crate::gradients::backward`].
pub fn segment_with_state(c: &CostVolume, spec: &SmoothnessSpec) -> Result<(Surfaces, DPState)> {
    let mut state = soft_forward(c, spec)?;
    let surfaces = soft_backtrack(&mut state);
    Ok((surfaces, state))
}
