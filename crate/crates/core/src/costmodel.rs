//! From per-pixel logits to surface estimates and on-surface costs.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid3, Surfaces};
use crate::imageio::{Channel, ChannelStack};

macro_rules! volume_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Grid3);

        impl Deref for $name {
            type Target = Grid3;
            fn deref(&self) -> &Grid3 {
                &self.0
            }
        }

        impl $name {
            pub fn into_inner(self) -> Grid3 {
                self.0
            }
        }
    };
}

volume_newtype!(
    /// Unnormalized per-pixel scores, one column per `(surface, x)`.
    LogitVolume
);
volume_newtype!(
    /// Column-wise softmax of a [`LogitVolume`]; each column sums to one.
    ProbabilityVolume
);
volume_newtype!(
    /// On-surface costs `c_i(x, z)`; larger is better.
    CostVolume
);

impl LogitVolume {
    pub fn new(grid: Grid3) -> Result<Self> {
        if !grid.all_finite() {
            return Err(Error::Range("logits must be finite".into()));
        }
        Ok(LogitVolume(grid))
    }
}

impl CostVolume {
    pub fn new(grid: Grid3) -> Result<Self> {
        if !grid.all_finite() {
            return Err(Error::Range("costs must be finite".into()));
        }
        Ok(CostVolume(grid))
    }

    pub fn extract_surface(&self, i: usize) -> CostVolume {
        CostVolume(self.0.extract_surface(i))
    }
}

impl ProbabilityVolume {
    /// Accepts a grid whose columns are already probability distributions.
    pub fn new(grid: Grid3) -> Result<Self> {
        for i in 0..grid.surfaces() {
            for x in 0..grid.width() {
                let col = grid.column(i, x);
                if col.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(Error::Range(format!("column ({i}, {x}) leaves [0, 1]")));
                }
                let sum: f64 = col.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::Range(format!("column ({i}, {x}) sums to {sum}")));
                }
            }
        }
        Ok(ProbabilityVolume(grid))
    }
}

/// Max-subtracted softmax of one column, written into `out`.
pub(crate) fn softmax_into(values: &[f64], scale: f64, out: &mut [f64]) {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(values) {
        *o = (scale * (v - m)).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax_z(logits: &LogitVolume) -> ProbabilityVolume {
    let mut p = Grid3::zeros(logits.surfaces(), logits.width(), logits.depth());
    for i in 0..logits.surfaces() {
        for x in 0..logits.width() {
            softmax_into(logits.column(i, x), 1.0, p.column_mut(i, x));
        }
    }
    ProbabilityVolume(p)
}

/// Soft-argmax `μ = Σ_z z·p` of every column.
pub fn surface_mu(p: &ProbabilityVolume) -> Surfaces {
    let mut mu = Surfaces::zeros(p.surfaces(), p.width());
    for i in 0..p.surfaces() {
        for x in 0..p.width() {
            let m = p
                .column(i, x)
                .iter()
                .enumerate()
                .map(|(z, &w)| z as f64 * w)
                .sum();
            mu.set(i, x, m);
        }
    }
    mu
}

/// The parabolic cost `c_i(x, z) = -(z - μ_x^(i))²`. No clamping of `μ`.
pub fn cost_from_mu(mu: &Surfaces, depth: usize) -> CostVolume {
    CostVolume(Grid3::from_fn(mu.surfaces(), mu.width(), depth, |i, x, z| {
        let d = z as f64 - mu.get(i, x);
        -(d * d)
    }))
}

/// Logits to cost in one go: column softmax, soft-argmax, parabola.
pub fn cost_from_logits(logits: &LogitVolume) -> CostVolume {
    cost_from_mu(&surface_mu(&softmax_z(logits)), logits.depth())
}

/// Chains a cotangent on `μ` back to the logits it was computed from:
/// `∂μ/∂l_z = p_z (z - μ)`.
pub fn mu_backward(p: &ProbabilityVolume, mu: &Surfaces, d_mu: &Surfaces) -> Grid3 {
    let mut out = Grid3::zeros(p.surfaces(), p.width(), p.depth());
    for i in 0..p.surfaces() {
        for x in 0..p.width() {
            let (m, g) = (mu.get(i, x), d_mu.get(i, x));
            for (z, (o, &pz)) in out.column_mut(i, x).iter_mut().zip(p.column(i, x)).enumerate() {
                *o = g * pz * (z as f64 - m);
            }
        }
    }
    out
}

/// Chains a cotangent on probabilities back through the column softmax.
pub fn softmax_backward(p: &ProbabilityVolume, d_p: &Grid3) -> Grid3 {
    let mut out = Grid3::zeros(p.surfaces(), p.width(), p.depth());
    for i in 0..p.surfaces() {
        for x in 0..p.width() {
            let (pc, dc) = (p.column(i, x), d_p.column(i, x));
            let inner: f64 = pc.iter().zip(dc).map(|(a, b)| a * b).sum();
            for ((o, &pz), &dz) in out.column_mut(i, x).iter_mut().zip(pc).zip(dc) {
                *o = pz * (dz - inner);
            }
        }
    }
    out
}

/// Unconstrained per-column argmax, ties toward the smallest row.
pub fn argmax_surfaces(volume: &Grid3) -> Surfaces {
    let mut out = Surfaces::zeros(volume.surfaces(), volume.width());
    for i in 0..volume.surfaces() {
        for x in 0..volume.width() {
            let col = volume.column(i, x);
            let mut best = 0;
            for (z, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = z;
                }
            }
            out.set(i, x, best as f64);
        }
    }
    out
}

/// Which way intensity changes when crossing a boundary in the +z direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    DarkToBright,
    BrightToDark,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::DarkToBright => 1.0,
            Polarity::BrightToDark => -1.0,
        }
    }

    /// Polarity of the boundary between two layer intensities, top then bottom.
    pub fn between(upper: f64, lower: f64) -> Polarity {
        if lower >= upper {
            Polarity::DarkToBright
        } else {
            Polarity::BrightToDark
        }
    }
}

impl std::str::FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dark-to-bright" | "d2b" => Ok(Polarity::DarkToBright),
            "bright-to-dark" | "b2d" => Ok(Polarity::BrightToDark),
            _ => Err(Error::InvalidParameter(format!("unknown polarity {s:?}"))),
        }
    }
}

/// Boundary evidence without a learned model: the signed 90° gradient,
/// oriented per surface by `polarity` and multiplied by `gain`.
pub fn heuristic_logits(stack: &ChannelStack, polarity: &[Polarity], gain: f64) -> Result<LogitVolume> {
    if polarity.is_empty() {
        return Err(Error::InvalidParameter("at least one surface is required".into()));
    }
    if !gain.is_finite() {
        return Err(Error::InvalidParameter(format!("gain must be finite, got {gain}")));
    }
    let g90 = stack.channel(Channel::Grad90);
    let depth = stack.depth();
    let grid = Grid3::from_fn(polarity.len(), stack.width(), depth, |i, x, z| {
        gain * polarity[i].sign() * g90[x * depth + z]
    });
    LogitVolume::new(grid)
}
