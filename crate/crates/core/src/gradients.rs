//! Reverse-mode derivatives of backtracked positions with respect to costs.
//!
//! Positions depend on `τ` only through softmax expectations, and each
//! `τ_{x,z}` depends on column `x - 1` through a LogSumExp whose gradient is
//! the cached softmax over its window. The rounded backtracking centers are
//! piecewise constant and contribute nothing.

use serde::{Deserialize, Serialize};

use crate::costmodel::CostVolume;
use crate::dd::DD;
use crate::dynprog::{window, SmoothnessSpec};
use crate::error::{Error, Result};
use crate::grid::{Grid3, Surfaces};
use crate::softdp::{round_center, segment_with_state, DPState, SurfaceState};

/// Cotangents of a scalar with respect to the cost volume and, once
/// [`CostGrad::chain_mu`] has run, the parabola centers.
#[derive(Clone, Debug, PartialEq)]
pub struct CostGrad {
    pub d_cost: Grid3,
    pub d_mu: Option<Surfaces>,
}

impl CostGrad {
    /// Chains through `c(x, z) = -(z - μ)²`: `dμ = Σ_z dC(x, z) · 2(z - μ)`.
    pub fn chain_mu(&mut self, mu: &Surfaces) -> Result<&Surfaces> {
        let g = &self.d_cost;
        if (g.surfaces(), g.width()) != (mu.surfaces(), mu.width()) {
            return Err(Error::Dimension("mu does not match the cost gradient".into()));
        }
        let mut d_mu = Surfaces::zeros(mu.surfaces(), mu.width());
        for i in 0..mu.surfaces() {
            for x in 0..mu.width() {
                let m = mu.get(i, x);
                let v = g
                    .column(i, x)
                    .iter()
                    .enumerate()
                    .map(|(z, &d)| d * 2.0 * (z as f64 - m))
                    .sum();
                d_mu.set(i, x, v);
            }
        }
        Ok(self.d_mu.insert(d_mu))
    }
}

fn backward_surface(s: &SurfaceState, d_z: &[f64], out: &mut [f64]) {
    let (width, depth, t) = (s.width(), s.depth(), s.temperature());
    let z = s.positions();
    let centers = s.centers();
    out.iter_mut().for_each(|v| *v = 0.0);

    // positions -> tau, through d/dτ_j Σ_k k·softmax(tτ)_k = t·w_j·(j - E[k])
    let last = (width - 1) * depth;
    for (j, &w) in s.final_weights().iter().enumerate() {
        out[last + j] += d_z[width - 1] * t * w * (j as f64 - z[width - 1]);
    }
    for x in (1..width).rev() {
        let g = d_z[x - 1];
        if g == 0.0 {
            continue;
        }
        let k = centers[x];
        let (lo, _) = s.window(x, k);
        let base = (x - 1) * depth + lo;
        for (j, &w) in s.weights(x, k).iter().enumerate() {
            out[base + j] += g * t * w * ((lo + j) as f64 - z[x - 1]);
        }
    }

    // tau_x -> tau_{x-1}; ∂τ_{x,z}/∂c(x,z) = 1 so the cost cotangent is the τ cotangent
    for x in (1..width).rev() {
        let (prev, cur) = out.split_at_mut(x * depth);
        let prev = &mut prev[(x - 1) * depth..];
        for (zc, &g) in cur[..depth].iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let (lo, _) = s.window(x, zc);
            for (p, &w) in prev[lo..].iter_mut().zip(s.weights(x, zc)) {
                *p += g * w;
            }
        }
    }
}

/// Pulls the position cotangents `d_z` back onto the cost volume.
///
/// `state` must come from [`crate::softdp::soft_backtrack`] (or
/// [`crate::softdp::segment_with_state`]).
pub fn backward(state: &DPState, d_z: &Surfaces) -> Result<CostGrad> {
    if !state.is_backtracked() {
        return Err(Error::MissingCache);
    }
    if (d_z.surfaces(), d_z.width()) != (state.surfaces(), state.width()) {
        return Err(Error::Dimension(format!(
            "position cotangent is {}x{}, state {}x{}",
            d_z.surfaces(),
            d_z.width(),
            state.surfaces(),
            state.width()
        )));
    }
    let mut d_cost = Grid3::zeros(state.surfaces(), state.width(), state.depth());
    let per_surface = state.width() * state.depth();
    for (i, (s, out)) in state
        .surfaces_iter()
        .zip(d_cost.as_mut_slice().chunks_mut(per_surface.max(1)))
        .enumerate()
    {
        backward_surface(s, d_z.row(i), out);
    }
    Ok(CostGrad { d_cost, d_mu: None })
}

/// Entries where both gradients are below this are not compared.
pub const NEGLIGIBLE: f64 = 1e-9;

/// Worst disagreement between [`backward`] and central differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// `[surface, output column, cost column, cost row]` of the largest
    /// relative error.
    pub worst_index: [usize; 4],
    pub compared: usize,
    pub h: f64,
}

/// `|a - b| / max(|a|, |b|)`, or `None` when both are negligible.
pub fn relative_error(a: f64, b: f64) -> Option<f64> {
    let scale = a.abs().max(b.abs());
    (scale >= NEGLIGIBLE).then(|| (a - b).abs() / scale)
}

fn precise_softmax(values: &[DD], t: DD) -> Vec<DD> {
    let m = values.iter().fold(values[0], |a, &b| a.max(b));
    let e: Vec<DD> = values.iter().map(|&v| (t * (v - m)).exp()).collect();
    let s = e.iter().fold(DD::ZERO, |a, &b| a + b);
    e.into_iter().map(|v| v / s).collect()
}

fn precise_expectation(lo: usize, w: &[DD]) -> DD {
    w.iter()
        .enumerate()
        .fold(DD::ZERO, |a, (j, &p)| a + DD::from_f64((lo + j) as f64) * p)
}

/// Forward pass and backtracking of one surface in double-double precision.
/// Written independently of the cached `f64` solver.
pub(crate) fn precise_segment_surface(
    costs: &[DD],
    width: usize,
    depth: usize,
    deltas: &[usize],
    temperature: f64,
) -> Vec<DD> {
    let t = DD::from_f64(temperature);
    let mut tau: Vec<Vec<DD>> = vec![costs[..depth].to_vec()];
    for x in 1..width {
        let prev = &tau[x - 1];
        let col: Vec<DD> = (0..depth)
            .map(|z| {
                let (lo, hi) = window(z, deltas[x - 1], depth);
                let w = &prev[lo..=hi];
                let m = w.iter().fold(w[0], |a, &b| a.max(b));
                let s = w
                    .iter()
                    .fold(DD::ZERO, |a, &v| a + (t * (v - m)).exp());
                costs[x * depth + z] + m + s.ln() / t
            })
            .collect();
        tau.push(col);
    }
    let mut z = vec![DD::ZERO; width];
    z[width - 1] = precise_expectation(0, &precise_softmax(&tau[width - 1], t));
    for x in (1..width).rev() {
        let k = round_center(z[x].to_f64(), depth);
        let (lo, hi) = window(k, deltas[x - 1], depth);
        z[x - 1] = precise_expectation(lo, &precise_softmax(&tau[x - 1][lo..=hi], t));
    }
    z
}

/// Compares the full Jacobian `∂z_x / ∂c(x', z')` of every surface against
/// central differences with step `h`. Reports; never asserts.
///
/// Perturbed forward passes run in double-double precision so that the
/// difference quotient is not swamped by `f64` rounding of the positions.
pub fn finite_diff_check(c: &CostVolume, spec: &SmoothnessSpec, h: f64) -> Result<GradCheckReport> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {h}")));
    }
    let (n, width, depth) = c.dims();
    let (_, state) = segment_with_state(c, spec)?;

    // analytic rows, one backward pass per output position
    let mut jacobian = Vec::with_capacity(n * width);
    for i in 0..n {
        for xo in 0..width {
            let mut d_z = Surfaces::zeros(n, width);
            d_z.set(i, xo, 1.0);
            jacobian.push(backward(&state, &d_z)?.d_cost);
        }
    }

    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst_index: [0; 4],
        compared: 0,
        h,
    };
    let step = DD::from_f64(h);
    let two_h = DD::from_f64(2.0 * h);
    for i in 0..n {
        let mut probe: Vec<DD> = c.surface(i).iter().map(|&v| DD::from_f64(v)).collect();
        let (deltas, t) = (spec.deltas_of(i), spec.temperature(i));
        for x in 0..width {
            for z in 0..depth {
                let k = x * depth + z;
                let orig = probe[k];
                probe[k] = orig + step;
                let up = precise_segment_surface(&probe, width, depth, deltas, t);
                probe[k] = orig - step;
                let dn = precise_segment_surface(&probe, width, depth, deltas, t);
                probe[k] = orig;
                for xo in 0..width {
                    let numeric = ((up[xo] - dn[xo]) / two_h).to_f64();
                    let analytic = jacobian[i * width + xo].get(i, x, z);
                    report.max_abs_err = report.max_abs_err.max((numeric - analytic).abs());
                    if let Some(rel) = relative_error(analytic, numeric) {
                        report.compared += 1;
                        if rel > report.max_rel_err {
                            report.max_rel_err = rel;
                            report.worst_index = [i, xo, x, z];
                        }
                    }
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::softdp::{segment, soft_forward};

    fn lcg_costs(n: usize, w: usize, d: usize, seed: u64) -> CostVolume {
        let mut s = seed;
        CostVolume::new(Grid3::from_fn(n, w, d, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }))
        .unwrap()
    }

    #[test]
    fn random_grid_matches_finite_differences() {
        let c = lcg_costs(1, 4, 6, 17);
        let spec = SmoothnessSpec::uniform(1, 4, 1, 5.0).unwrap();
        let (_, state) = segment_with_state(&c, &spec).unwrap();
        let ones = Surfaces::from_vec(1, 4, vec![1.0; 4]).unwrap();
        let g = backward(&state, &ones).unwrap();
        let h = DD::from_f64(1e-6);
        let mut probe: Vec<DD> = c.surface(0).iter().map(|&v| DD::from_f64(v)).collect();
        let total = |p: &[DD]| {
            precise_segment_surface(p, 4, 6, spec.deltas_of(0), 5.0)
                .into_iter()
                .fold(DD::ZERO, |a, b| a + b)
        };
        for k in 0..24 {
            let o = probe[k];
            probe[k] = o + h;
            let up = total(&probe);
            probe[k] = o - h;
            let dn = total(&probe);
            probe[k] = o;
            let fd = ((up - dn) / (h + h)).to_f64();
            let a = g.d_cost.as_slice()[k];
            if let Some(rel) = relative_error(a, fd) {
                assert!(rel <= 1e-6, "{k}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn precise_forward_agrees_with_cached_solver() {
        let c = lcg_costs(1, 6, 7, 23);
        let spec = SmoothnessSpec::uniform(1, 6, 2, 3.0).unwrap();
        let z = segment(&c, &spec).unwrap();
        let dd: Vec<DD> = c.surface(0).iter().map(|&v| DD::from_f64(v)).collect();
        let p = precise_segment_surface(&dd, 6, 7, spec.deltas_of(0), 3.0);
        for (x, v) in p.iter().enumerate() {
            assert!((v.to_f64() - z.get(0, x)).abs() < 1e-12);
        }
    }

    #[test]
    fn column_shift_direction_is_flat() {
        let c = lcg_costs(1, 5, 7, 3);
        let spec = SmoothnessSpec::uniform(1, 5, 2, 3.0).unwrap();
        let (_, state) = segment_with_state(&c, &spec).unwrap();
        for xo in 0..5 {
            let mut d_z = Surfaces::zeros(1, 5);
            d_z.set(0, xo, 1.0);
            let g = backward(&state, &d_z).unwrap();
            for x0 in 0..5 {
                let dir: f64 = g.d_cost.column(0, x0).iter().sum();
                assert!(dir.abs() < 1e-12, "output {xo}, column {x0}: {dir}");
            }
        }
    }

    #[test]
    fn tiny_temperature_has_tiny_gradient() {
        let c = lcg_costs(1, 3, 5, 9);
        let spec = SmoothnessSpec::uniform(1, 3, 1, 1e-9).unwrap();
        let (_, state) = segment_with_state(&c, &spec).unwrap();
        let mut d_z = Surfaces::zeros(1, 3);
        d_z.set(0, 2, 1.0);
        let g = backward(&state, &d_z).unwrap();
        assert!(g.d_cost.column(0, 2).iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn backward_is_linear_in_cotangent() {
        let c = lcg_costs(2, 6, 5, 41);
        let spec = SmoothnessSpec::uniform(2, 6, 1, 4.0).unwrap();
        let (_, state) = segment_with_state(&c, &spec).unwrap();
        let u = Surfaces::from_vec(2, 6, (0..12).map(|k| (k as f64 * 0.7).sin()).collect()).unwrap();
        let v = Surfaces::from_vec(2, 6, (0..12).map(|k| (k as f64 * 1.3).cos()).collect()).unwrap();
        let (a, b) = (2.5, -0.75);
        let mix = Surfaces::from_vec(
            2,
            6,
            u.as_slice().iter().zip(v.as_slice()).map(|(p, q)| a * p + b * q).collect(),
        )
        .unwrap();
        let gu = backward(&state, &u).unwrap().d_cost;
        let gv = backward(&state, &v).unwrap().d_cost;
        let gm = backward(&state, &mix).unwrap().d_cost;
        for k in 0..gm.as_slice().len() {
            let expect = a * gu.as_slice()[k] + b * gv.as_slice()[k];
            assert!((gm.as_slice()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn chain_mu_matches_parabola_derivative() {
        let mu = Surfaces::from_rows(&[vec![2.3, 3.1, 2.8, 4.4]]).unwrap();
        let c = crate::costmodel::cost_from_mu(&mu, 7);
        let spec = SmoothnessSpec::uniform(1, 4, 1, 2.0).unwrap();
        let (_, state) = segment_with_state(&c, &spec).unwrap();
        let ones = Surfaces::from_vec(1, 4, vec![1.0; 4]).unwrap();
        let mut g = backward(&state, &ones).unwrap();
        let d_mu = g.chain_mu(&mu).unwrap().clone();
        let h = 1e-6;
        for x in 0..4 {
            let mut up = mu.clone();
            up.set(0, x, mu.get(0, x) + h);
            let mut dn = mu.clone();
            dn.set(0, x, mu.get(0, x) - h);
            let f = |m: &Surfaces| -> f64 {
                segment(&crate::costmodel::cost_from_mu(m, 7), &spec).unwrap().as_slice().iter().sum()
            };
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - d_mu.get(0, x)).abs() <= 1e-6 * fd.abs().max(1.0), "{x}: {fd} vs {}", d_mu.get(0, x));
        }
    }

    #[test]
    fn unbacktracked_state_is_rejected() {
        let c = lcg_costs(1, 3, 4, 1);
        let spec = SmoothnessSpec::uniform(1, 3, 1, 1.0).unwrap();
        let st = soft_forward(&c, &spec).unwrap();
        assert!(matches!(backward(&st, &Surfaces::zeros(1, 3)), Err(Error::MissingCache)));
    }

    #[test]
    fn report_flags_coarse_steps() {
        let c = lcg_costs(1, 4, 5, 5);
        let spec = SmoothnessSpec::uniform(1, 4, 1, 5.0).unwrap();
        let fine = finite_diff_check(&c, &spec, 1e-6).unwrap();
        let coarse = finite_diff_check(&c, &spec, 1e-1).unwrap();
        assert!(fine.max_rel_err <= 1e-5, "{fine:?}");
        assert!(coarse.max_abs_err > fine.max_abs_err);
    }

    #[test]
    fn zero_costs_have_flat_uniform_shift() {
        let c = CostVolume::new(Grid3::zeros(1, 3, 5)).unwrap();
        let spec = SmoothnessSpec::uniform(1, 3, 1, 2.0).unwrap();
        let (_, state) = segment_with_state(&c, &spec).unwrap();
        let g = backward(&state, &Surfaces::from_vec(1, 3, vec![1.0; 3]).unwrap()).unwrap();
        let total: f64 = g.d_cost.as_slice().iter().sum();
        assert!(total.abs() < 1e-12);
    }
}
