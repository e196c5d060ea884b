//! Synthetic layered scans with known tracings.
//!
//! Surface `i` is a sinusoid `base_i + A_i sin(2πx/λ_i + φ_i)` with a random
//! phase, pushed down to keep `min_gap` rows below surface `i - 1` and up
//! to leave room for the surfaces below it. Pixels take the intensity of
//! their layer; the row `round(s)` on a boundary takes the mean of the two
//! layers, so a central difference along `z` peaks exactly there.
//!
//! Randomness comes from `Pcg32` (a 64-bit linear congruential generator
//! with a permuted output), seeded with [`PhantomSpec::seed`]. Phases are
//! drawn first, one per surface, then one standard normal per pixel in
//! column-major order when `noise_sigma > 0`. Intensities are quantized to
//! the 16-bit grid, so a PGM round trip is lossless.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_pcg::Pcg32;
use serde::{Deserialize, Serialize};

use crate::costmodel::Polarity;
use crate::error::{Error, Result};
use crate::evalloss::GroundTruth;
use crate::grid::Surfaces;
use crate::imageio::{quantize16, BScan};

/// Columns `[start, end)` of `surface` where the boundary contrast vanishes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dropout {
    pub surface: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub width: usize,
    pub depth: usize,
    pub surfaces: usize,
    #[serde(default)]
    pub seed: u64,
    /// Sinusoid amplitude per surface, in rows.
    pub amplitude: Vec<f64>,
    /// Sinusoid wavelength per surface, in columns.
    pub wavelength: Vec<f64>,
    /// `surfaces + 1` layer intensities, top to bottom.
    pub contrasts: Vec<f64>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub dropouts: Vec<Dropout>,
    pub min_gap: f64,
}

impl PhantomSpec {
    /// A noise-free spec with evenly spaced, alternating-polarity layers.
    pub fn layered(width: usize, depth: usize, surfaces: usize, seed: u64) -> Self {
        let contrasts = (0..=surfaces)
            .map(|k| {
                let step = (k / 2) as f64;
                if k % 2 == 0 {
                    0.1 + 0.05 * step
                } else {
                    (0.6 + 0.08 * step).min(1.0)
                }
            })
            .collect();
        PhantomSpec {
            width,
            depth,
            surfaces,
            seed,
            amplitude: vec![3.0; surfaces],
            wavelength: vec![width as f64 / 1.5; surfaces],
            contrasts,
            noise_sigma: 0.0,
            dropouts: Vec::new(),
            min_gap: 4.0,
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_dropout(mut self, surface: usize, start: usize, end: usize) -> Self {
        self.dropouts.push(Dropout {
            surface,
            start,
            end,
        });
        self
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = vec![amplitude; self.surfaces];
        self
    }

    /// Polarity of each boundary outside dropout spans.
    pub fn polarity(&self) -> Vec<Polarity> {
        self.contrasts
            .windows(2)
            .map(|w| Polarity::between(w[0], w[1]))
            .collect()
    }

    /// `ceil(2π·A/λ)` for each surface: the largest column step of its raw
    /// sinusoid.
    pub fn sinusoid_step_bound(&self, i: usize) -> usize {
        (2.0 * PI * self.amplitude[i] / self.wavelength[i]).ceil() as usize
    }

    fn validate(&self) -> Result<()> {
        let n = self.surfaces;
        if self.width < 2 || self.depth < 2 || n == 0 {
            return Err(Error::InvalidParameter(format!(
                "phantom needs width, depth >= 2 and at least one surface, got {}x{} with {n}",
                self.width, self.depth
            )));
        }
        let lens = [
            ("amplitude", self.amplitude.len(), n),
            ("wavelength", self.wavelength.len(), n),
            ("contrasts", self.contrasts.len(), n + 1),
        ];
        for (name, got, want) in lens {
            if got != want {
                return Err(Error::Dimension(format!("{name} has {got} entries, expected {want}")));
            }
        }
        if self.amplitude.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::InvalidParameter("amplitudes must be finite and >= 0".into()));
        }
        if self.wavelength.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::InvalidParameter("wavelengths must be positive".into()));
        }
        if self.contrasts.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidParameter("contrasts must lie in [0, 1]".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidParameter("noise sigma must be >= 0".into()));
        }
        if !(self.min_gap.is_finite() && self.min_gap >= 0.0) {
            return Err(Error::InvalidParameter("min gap must be >= 0".into()));
        }
        if n as f64 * self.min_gap >= self.depth as f64
            || (n - 1) as f64 * self.min_gap > (self.depth - 1) as f64
        {
            return Err(Error::Infeasible(format!(
                "{n} surfaces {} rows apart do not fit in {} rows",
                self.min_gap, self.depth
            )));
        }
        for d in &self.dropouts {
            if d.surface >= n || d.start >= d.end || d.end > self.width {
                return Err(Error::InvalidParameter(format!(
                    "dropout {d:?} does not fit {n} surfaces of width {}",
                    self.width
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: BScan,
    pub truth: GroundTruth,
    /// Guaranteed bound on `|s_x - s_{x+1}|` per surface.
    pub step_bounds: Vec<usize>,
    pub polarity: Vec<Polarity>,
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let (n, width, depth) = (spec.surfaces, spec.width, spec.depth);
    let mut rng = Pcg32::seed_from_u64(spec.seed);
    let phases: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 * PI).collect();

    let top = (depth - 1) as f64;
    let mut truth = Surfaces::zeros(n, width);
    for x in 0..width {
        let mut above: Option<f64> = None;
        for (i, phase) in phases.iter().enumerate() {
            let base = (i + 1) as f64 * top / (n + 1) as f64;
            let raw = base
                + spec.amplitude[i] * (2.0 * PI * x as f64 / spec.wavelength[i] + phase).sin();
            let lower = above.map_or(0.0, |a| a + spec.min_gap);
            let upper = top - (n - 1 - i) as f64 * spec.min_gap;
            let s = raw.max(lower).min(upper);
            truth.set(i, x, s);
            above = Some(s);
        }
    }

    let mut step_bounds = Vec::with_capacity(n);
    for i in 0..n {
        let own = spec.sinusoid_step_bound(i);
        step_bounds.push(step_bounds.last().map_or(own, |&b: &usize| b.max(own)));
    }

    let mut data = vec![0.0; width * depth];
    let mut levels = spec.contrasts.clone();
    for x in 0..width {
        levels.copy_from_slice(&spec.contrasts);
        for d in spec.dropouts.iter().filter(|d| (d.start..d.end).contains(&x)) {
            let m = 0.5 * (levels[d.surface] + levels[d.surface + 1]);
            levels[d.surface] = m;
            levels[d.surface + 1] = m;
        }
        let rows: Vec<usize> = (0..n)
            .map(|i| (truth.get(i, x).round() as usize).min(depth - 1))
            .collect();
        for z in 0..depth {
            let v = match rows.iter().position(|&r| r == z) {
                Some(i) => 0.5 * (levels[i] + levels[i + 1]),
                None => levels[rows.iter().filter(|&&r| r < z).count()],
            };
            data[x * depth + z] = v;
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in data.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += spec.noise_sigma * e;
        }
    }
    data.iter_mut().for_each(|v| *v = quantize16(*v));

    Ok(Phantom {
        image: BScan::new(width, depth, data)?,
        truth: GroundTruth::new(truth, depth)?,
        step_bounds,
        polarity: spec.polarity(),
    })
}
