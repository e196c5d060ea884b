//! Training losses and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::costmodel::{surface_mu, ProbabilityVolume};
use crate::error::{Error, Result};
use crate::grid::{Grid3, Surfaces};

/// Probabilities are clamped into `[P_CLAMP, 1 - P_CLAMP]` before logs.
pub const P_CLAMP: f64 = 1e-8;

/// Reference tracings `s_x^(i)` on a scan of `depth` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    positions: Surfaces,
    depth: usize,
}

impl GroundTruth {
    pub fn new(positions: Surfaces, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Dimension("ground truth needs at least one row".into()));
        }
        let upper = (depth - 1) as f64;
        if let Some(v) = positions
            .as_slice()
            .iter()
            .find(|v| !(v.is_finite() && (0.0..=upper).contains(*v)))
        {
            return Err(Error::Range(format!("tracing position {v} outside [0, {upper}]")));
        }
        Ok(GroundTruth { positions, depth })
    }

    pub fn positions(&self) -> &Surfaces {
        &self.positions
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn surfaces(&self) -> usize {
        self.positions.surfaces()
    }

    pub fn width(&self) -> usize {
        self.positions.width()
    }

    /// Row of the indicator `g` in column `(i, x)`: `round(s)`.
    pub fn onehot_row(&self, i: usize, x: usize) -> usize {
        (self.positions.get(i, x).round() as usize).min(self.depth - 1)
    }

    /// The full `N × X × Z` indicator volume.
    pub fn onehot(&self) -> Grid3 {
        let mut g = Grid3::zeros(self.surfaces(), self.width(), self.depth);
        for i in 0..self.surfaces() {
            for x in 0..self.width() {
                g.set(i, x, self.onehot_row(i, x), 1.0);
            }
        }
        g
    }

    pub(crate) fn check_volume(&self, p: &Grid3) -> Result<()> {
        if p.dims() != (self.surfaces(), self.width(), self.depth) {
            return Err(Error::Dimension(format!(
                "probabilities {:?} vs ground truth {:?}",
                p.dims(),
                (self.surfaces(), self.width(), self.depth)
            )));
        }
        Ok(())
    }
}

/// Multi-surface binary cross entropy, averaged over all `N·X·Z` pixels.
///
/// Accepts any grid of per-pixel probabilities, normalized or not.
pub fn loss_mce(p: &Grid3, gt: &GroundTruth) -> Result<f64> {
    gt.check_volume(p)?;
    let mut sum = 0.0;
    for i in 0..gt.surfaces() {
        for x in 0..gt.width() {
            let hot = gt.onehot_row(i, x);
            for (z, &pz) in p.column(i, x).iter().enumerate() {
                let q = pz.clamp(P_CLAMP, 1.0 - P_CLAMP);
                sum -= if z == hot { q.ln() } else { (1.0 - q).ln() };
            }
        }
    }
    Ok(sum / p.as_slice().len() as f64)
}

/// `∂ loss_mce / ∂p`, zero wherever the clamp is active.
pub fn loss_mce_grad(p: &Grid3, gt: &GroundTruth) -> Result<Grid3> {
    gt.check_volume(p)?;
    let scale = 1.0 / p.as_slice().len() as f64;
    let mut g = Grid3::zeros(p.surfaces(), p.width(), p.depth());
    for i in 0..gt.surfaces() {
        for x in 0..gt.width() {
            let hot = gt.onehot_row(i, x);
            for (z, (o, &pz)) in g.column_mut(i, x).iter_mut().zip(p.column(i, x)).enumerate() {
                if !(P_CLAMP..=1.0 - P_CLAMP).contains(&pz) {
                    continue;
                }
                *o = if z == hot { -scale / pz } else { scale / (1.0 - pz) };
            }
        }
    }
    Ok(g)
}

/// Mean absolute position error over all `N·X` columns.
pub fn loss_l1(pred: &Surfaces, gt: &GroundTruth) -> Result<f64> {
    pred.same_dims(gt.positions(), "prediction vs ground truth")?;
    let n = pred.as_slice().len() as f64;
    Ok(pred
        .as_slice()
        .iter()
        .zip(gt.positions().as_slice())
        .map(|(z, s)| (z - s).abs())
        .sum::<f64>()
        / n)
}

/// Subgradient of [`loss_l1`], taking `0` at a perfect fit.
pub fn loss_l1_grad(pred: &Surfaces, gt: &GroundTruth) -> Result<Surfaces> {
    pred.same_dims(gt.positions(), "prediction vs ground truth")?;
    let n = pred.as_slice().len() as f64;
    let data = pred
        .as_slice()
        .iter()
        .zip(gt.positions().as_slice())
        .map(|(z, s)| {
            let d = z - s;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Surfaces::from_vec(pred.surfaces(), pred.width(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mce: f64,
    pub l1: f64,
    pub total: f64,
}

/// `L = L_mCE(p) + L_1(pred)`.
pub fn total_loss(p: &Grid3, gt: &GroundTruth, pred: &Surfaces) -> Result<LossBreakdown> {
    let mce = loss_mce(p, gt)?;
    let l1 = loss_l1(pred, gt)?;
    Ok(LossBreakdown {
        mce,
        l1,
        total: mce + l1,
    })
}

/// The pretraining loss: [`total_loss`] with the soft-argmax `μ` of `p` as
/// the predicted positions.
pub fn pretrain_loss(p: &ProbabilityVolume, gt: &GroundTruth) -> Result<LossBreakdown> {
    total_loss(p, gt, &surface_mu(p))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMetrics {
    pub masd_px: f64,
    pub masd_um: f64,
    pub hd_px: f64,
    pub hd_um: f64,
    pub hd95_px: f64,
    pub hd95_um: f64,
}

impl SurfaceMetrics {
    fn from_distances(d: &mut [f64], um_per_pixel: f64) -> Self {
        let masd = d.iter().sum::<f64>() / d.len() as f64;
        d.sort_by(f64::total_cmp);
        let hd = d.last().copied().unwrap_or(0.0);
        let hd95 = percentile_sorted(d, 0.95);
        SurfaceMetrics {
            masd_px: masd,
            masd_um: masd * um_per_pixel,
            hd_px: hd,
            hd_um: hd * um_per_pixel,
            hd95_px: hd95,
            hd95_um: hd95 * um_per_pixel,
        }
    }
}

/// Per-surface distance statistics; distances are column-wise along `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub um_per_pixel: f64,
    pub surfaces: Vec<SurfaceMetrics>,
    pub mean: SurfaceMetrics,
}

/// Linear interpolation between order statistics at rank `q·(n - 1)`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn metrics(pred: &Surfaces, gt: &GroundTruth, um_per_pixel: f64) -> Result<MetricReport> {
    if !(um_per_pixel.is_finite() && um_per_pixel > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "resolution must be positive, got {um_per_pixel}"
        )));
    }
    pred.same_dims(gt.positions(), "prediction vs ground truth")?;
    let surfaces: Vec<SurfaceMetrics> = (0..pred.surfaces())
        .map(|i| {
            let mut d: Vec<f64> = pred
                .row(i)
                .iter()
                .zip(gt.positions().row(i))
                .map(|(z, s)| (z - s).abs())
                .collect();
            SurfaceMetrics::from_distances(&mut d, um_per_pixel)
        })
        .collect();
    let n = surfaces.len().max(1) as f64;
    let avg = |f: fn(&SurfaceMetrics) -> f64| surfaces.iter().map(f).sum::<f64>() / n;
    let mean = SurfaceMetrics {
        masd_px: avg(|m| m.masd_px),
        masd_um: avg(|m| m.masd_um),
        hd_px: avg(|m| m.hd_px),
        hd_um: avg(|m| m.hd_um),
        hd95_px: avg(|m| m.hd95_px),
        hd95_um: avg(|m| m.hd95_um),
    };
    Ok(MetricReport {
        um_per_pixel,
        surfaces,
        mean,
    })
}
