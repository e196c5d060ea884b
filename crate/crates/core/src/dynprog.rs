//! Exact smoothness-constrained dynamic programming, and an exhaustive
//! oracle for checking it.
//!
//! Ties are broken toward the smallest row at every argmax, the final column
//! included. Backtracking from the last column therefore returns, among all
//! optimal paths, the one that is lexicographically smallest when positions
//! are compared from the last column backwards. The oracle uses the same
//! order.

use rayon::prelude::*;

use crate::costmodel::CostVolume;
use crate::error::{Error, Result};
use crate::grid::{Grid3, Surfaces};
use crate::softdp::select_temperature;

/// Per-surface, per-column-pair smoothness limits plus the temperature of
/// the smoothed solver.
///
/// `delta(i, x)` bounds `|z_x - z_{x+1}|` on surface `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothnessSpec {
    surfaces: usize,
    width: usize,
    deltas: Vec<usize>,
    temperatures: Vec<f64>,
    alpha: Option<f64>,
    epsilon: Option<f64>,
}

impl SmoothnessSpec {
    pub fn new(
        surfaces: usize,
        width: usize,
        deltas: Vec<usize>,
        temperatures: Vec<f64>,
    ) -> Result<Self> {
        if surfaces == 0 || width == 0 {
            return Err(Error::Dimension("smoothness spec needs at least one column".into()));
        }
        if deltas.len() != surfaces * (width - 1) {
            return Err(Error::Dimension(format!(
                "{} limits for {surfaces} surfaces of width {width}",
                deltas.len()
            )));
        }
        if temperatures.len() != surfaces {
            return Err(Error::Dimension(format!(
                "{} temperatures for {surfaces} surfaces",
                temperatures.len()
            )));
        }
        if let Some(t) = temperatures.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive and finite, got {t}"
            )));
        }
        Ok(SmoothnessSpec {
            surfaces,
            width,
            deltas,
            temperatures,
            alpha: None,
            epsilon: None,
        })
    }

    /// The same limit and temperature everywhere.
    pub fn uniform(surfaces: usize, width: usize, delta: usize, temperature: f64) -> Result<Self> {
        Self::new(
            surfaces,
            width,
            vec![delta; surfaces * width.saturating_sub(1)],
            vec![temperature; surfaces],
        )
    }

    /// Builds a spec whose per-surface temperature is the smallest one that
    /// keeps every smoothed max within `epsilon` of the true max.
    pub fn from_epsilon(
        surfaces: usize,
        width: usize,
        deltas: Vec<usize>,
        epsilon: f64,
    ) -> Result<Self> {
        let mut spec = Self::new(surfaces, width, deltas, vec![1.0; surfaces])?;
        spec.set_epsilon(epsilon)?;
        Ok(spec)
    }

    /// Re-derives every surface's temperature from `epsilon`.
    pub fn set_epsilon(&mut self, epsilon: f64) -> Result<()> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be positive and finite, got {epsilon}"
            )));
        }
        for i in 0..self.surfaces {
            // a zero limit makes every window a single row, any t is exact
            let d = self.max_delta(i).max(1);
            self.temperatures[i] = select_temperature(d, epsilon)?;
        }
        self.epsilon = Some(epsilon);
        Ok(())
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        self.temperatures.iter_mut().for_each(|t| *t = temperature);
        self.epsilon = None;
        Ok(self)
    }

    /// Replaces every limit of a surface with that surface's largest limit.
    pub fn per_surface_constant(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.surfaces {
            let m = self.max_delta(i);
            out.deltas_of_mut(i).iter_mut().for_each(|d| *d = m);
        }
        out
    }

    pub fn surfaces(&self) -> usize {
        self.surfaces
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn delta(&self, i: usize, x: usize) -> usize {
        self.deltas[i * (self.width - 1) + x]
    }

    pub fn deltas_of(&self, i: usize) -> &[usize] {
        let w = self.width - 1;
        &self.deltas[i * w..(i + 1) * w]
    }

    fn deltas_of_mut(&mut self, i: usize) -> &mut [usize] {
        let w = self.width - 1;
        &mut self.deltas[i * w..(i + 1) * w]
    }

    pub fn max_delta(&self, i: usize) -> usize {
        self.deltas_of(i).iter().copied().max().unwrap_or(0)
    }

    pub fn temperature(&self, i: usize) -> f64 {
        self.temperatures[i]
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    pub fn epsilon(&self) -> Option<f64> {
        self.epsilon
    }

    pub fn check_dims(&self, c: &Grid3) -> Result<()> {
        if (c.surfaces(), c.width()) != (self.surfaces, self.width) {
            return Err(Error::Dimension(format!(
                "cost volume has {} surfaces x {} columns, smoothness spec {} x {}",
                c.surfaces(),
                c.width(),
                self.surfaces,
                self.width
            )));
        }
        if c.depth() == 0 {
            return Err(Error::Dimension("cost volume has no rows".into()));
        }
        Ok(())
    }

    /// True when every column step of `path` respects the limits, allowing
    /// `slack` extra rows.
    pub fn admits(&self, path: &Surfaces, slack: f64) -> bool {
        (0..self.surfaces).all(|i| {
            let r = path.row(i);
            r.windows(2)
                .enumerate()
                .all(|(x, w)| (w[0] - w[1]).abs() <= self.delta(i, x) as f64 + slack)
        })
    }
}

/// Clipped row window `[z - delta, z + delta] ∩ [0, depth)`.
#[inline]
pub(crate) fn window(z: usize, delta: usize, depth: usize) -> (usize, usize) {
    (z.saturating_sub(delta), (z + delta).min(depth - 1))
}

/// Integer surface positions with their objective values.
#[derive(Clone, Debug, PartialEq)]
pub struct HardSolution {
    pub path: Vec<Vec<usize>>,
    pub totals: Vec<f64>,
}

impl HardSolution {
    pub fn to_surfaces(&self) -> Surfaces {
        let rows: Vec<Vec<f64>> = self
            .path
            .iter()
            .map(|r| r.iter().map(|&z| z as f64).collect())
            .collect();
        Surfaces::from_rows(&rows).expect("paths share one width")
    }
}

fn first_max(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

fn solve_surface(c: &Grid3, spec: &SmoothnessSpec, i: usize) -> (Vec<usize>, f64) {
    let (width, depth) = (c.width(), c.depth());
    let mut tau = c.column(i, 0).to_vec();
    let mut next = vec![0.0; depth];
    let mut pointers = vec![0usize; width * depth];
    for x in 1..width {
        let delta = spec.delta(i, x - 1);
        let col = c.column(i, x);
        for z in 0..depth {
            let (lo, hi) = window(z, delta, depth);
            let arg = lo + first_max(&tau[lo..=hi]);
            pointers[x * depth + z] = arg;
            next[z] = col[z] + tau[arg];
        }
        std::mem::swap(&mut tau, &mut next);
    }
    let mut path = vec![0; width];
    path[width - 1] = first_max(&tau);
    for x in (1..width).rev() {
        path[x - 1] = pointers[x * depth + path[x]];
    }
    let total = path
        .iter()
        .enumerate()
        .fold(0.0, |acc, (x, &z)| acc + c.get(i, x, z));
    (path, total)
}

/// Maximizes `Σ_x c_i(x, z_x)` per surface subject to the smoothness limits.
pub fn hard_dp_solve(c: &CostVolume, spec: &SmoothnessSpec) -> Result<HardSolution> {
    spec.check_dims(c)?;
    let (path, totals) = (0..c.surfaces())
        .into_par_iter()
        .map(|i| solve_surface(c, spec, i))
        .unzip();
    Ok(HardSolution { path, totals })
}

/// Largest number of candidate paths the oracle will enumerate.
pub const ORACLE_LIMIT: f64 = 1e7;

/// Enumerates every feasible path. Exponential; for testing only.
pub fn brute_force_oracle(c: &CostVolume, spec: &SmoothnessSpec) -> Result<HardSolution> {
    spec.check_dims(c)?;
    let (width, depth) = (c.width(), c.depth());
    let paths = (depth as f64).powi(width as i32);
    if paths > ORACLE_LIMIT {
        return Err(Error::TooLarge {
            paths,
            limit: ORACLE_LIMIT,
        });
    }
    let mut solution = HardSolution {
        path: Vec::new(),
        totals: Vec::new(),
    };
    for i in 0..c.surfaces() {
        // odometer with column 0 fastest, so candidates arrive in order of
        // the last column first; keeping only strict improvements realizes
        // the shared tie-break
        let mut z = vec![0usize; width];
        let mut best: Option<(f64, Vec<usize>)> = None;
        'enumerate: loop {
            let feasible = (0..width - 1).all(|x| z[x].abs_diff(z[x + 1]) <= spec.delta(i, x));
            if feasible {
                let total = (0..width).fold(0.0, |acc, x| acc + c.get(i, x, z[x]));
                if best.as_ref().is_none_or(|(b, _)| total > *b) {
                    best = Some((total, z.clone()));
                }
            }
            for digit in z.iter_mut() {
                *digit += 1;
                if *digit < depth {
                    continue 'enumerate;
                }
                *digit = 0;
            }
            break;
        }
        let (total, path) = best.expect("the constant path z = 0 is always feasible");
        solution.path.push(path);
        solution.totals.push(total);
    }
    Ok(solution)
}
