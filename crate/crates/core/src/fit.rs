//! Fitting per-column logits to a tracing by gradient descent, first on the
//! soft-argmax `μ` alone, then through the smoothed solver.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costmodel::{
    cost_from_mu, heuristic_logits, mu_backward, softmax_backward, softmax_into, softmax_z,
    surface_mu, LogitVolume, Polarity, ProbabilityVolume,
};
use crate::dynprog::SmoothnessSpec;
use crate::error::{Error, Result};
use crate::evalloss::{
    loss_l1_grad, loss_mce_grad, total_loss, GroundTruth, LossBreakdown, P_CLAMP,
};
use crate::gradients::backward;
use crate::grid::{Grid3, Surfaces};
use crate::imageio::{fmt_real, gradient_channels, BScan};
use crate::softdp::segment_with_state;

/// Step-size halvings tried before a step is given up.
pub const MAX_HALVINGS: usize = 30;

/// Step-size growth after an accepted step.
const GROWTH: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub learning_rate: f64,
    /// Step size of the second phase; defaults to `learning_rate`. May be 0.
    pub finetune_learning_rate: Option<f64>,
    pub alpha: f64,
    pub epsilon: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            pretrain_steps: 500,
            finetune_steps: 100,
            learning_rate: 10.0,
            finetune_learning_rate: None,
            alpha: 1.0,
            epsilon: 1.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some(lr) = self.finetune_learning_rate {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "finetune learning rate must be >= 0, got {lr}"
                )));
            }
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidParameter(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    fn finetune_rate(&self) -> f64 {
        self.finetune_learning_rate.unwrap_or(self.learning_rate)
    }
}

/// `Δ_x = ceil(α + max |s_x - s_{x+1}|)` over all training tracings, with
/// temperatures chosen from `epsilon`.
pub fn estimate_delta(training: &[GroundTruth], alpha: f64, epsilon: f64) -> Result<SmoothnessSpec> {
    let first = training
        .first()
        .ok_or_else(|| Error::InvalidParameter("no training tracings".into()))?;
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
    }
    let (n, width) = (first.surfaces(), first.width());
    let mut steps = vec![0.0f64; n * width.saturating_sub(1)];
    for gt in training {
        if (gt.surfaces(), gt.width()) != (n, width) {
            return Err(Error::Dimension(format!(
                "training tracings mix {n}x{width} and {}x{}",
                gt.surfaces(),
                gt.width()
            )));
        }
        for (i, row) in gt.positions().rows().enumerate() {
            for (x, w) in row.windows(2).enumerate() {
                let s = &mut steps[i * (width - 1) + x];
                *s = s.max((w[0] - w[1]).abs());
            }
        }
    }
    let deltas = steps.iter().map(|s| (alpha + s).ceil() as usize).collect();
    Ok(SmoothnessSpec::from_epsilon(n, width, deltas, epsilon)?.with_alpha(alpha))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

/// Loss after `step` descent steps, counted across both phases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: LossBreakdown,
    pub learning_rate: f64,
}

pub fn format_history(history: &[LossRecord]) -> String {
    let mut out = String::from("step,phase,mce,l1,total\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step,
            r.phase.as_str(),
            fmt_real(r.loss.mce),
            fmt_real(r.loss.l1),
            fmt_real(r.loss.total)
        );
    }
    out
}

/// Where the initial logits come from.
#[derive(Clone, Debug)]
pub enum FitInput {
    Logits(LogitVolume),
    /// Heuristic gradient logits of the image.
    Image {
        image: BScan,
        polarity: Vec<Polarity>,
        gain: f64,
    },
}

impl FitInput {
    pub fn into_logits(self) -> Result<LogitVolume> {
        match self {
            FitInput::Logits(l) => Ok(l),
            FitInput::Image {
                image,
                polarity,
                gain,
            } => heuristic_logits(&gradient_channels(&image), &polarity, gain),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// The final segmentation: phase-2 output, or `μ` if no finetuning ran.
    pub surfaces: Surfaces,
    /// `μ` at the end of pretraining.
    pub pretrained: Surfaces,
    pub logits: LogitVolume,
    pub history: Vec<LossRecord>,
}

struct Evaluation {
    loss: LossBreakdown,
    grad: Grid3,
    pred: Surfaces,
}

fn add_into(acc: &mut Grid3, other: &Grid3) {
    for (a, b) in acc.as_mut_slice().iter_mut().zip(other.as_slice()) {
        *a += b;
    }
}

fn evaluate(
    logits: &LogitVolume,
    gt: &GroundTruth,
    phase: Phase,
    spec: &SmoothnessSpec,
) -> Result<Evaluation> {
    let p: ProbabilityVolume = softmax_z(logits);
    let mu = surface_mu(&p);
    let (pred, d_mu) = match phase {
        Phase::Pretrain => {
            let d = loss_l1_grad(&mu, gt)?;
            (mu.clone(), d)
        }
        Phase::Finetune => {
            let cost = cost_from_mu(&mu, gt.depth());
            let (pred, state) = segment_with_state(&cost, spec)?;
            let mut g = backward(&state, &loss_l1_grad(&pred, gt)?)?;
            let d = g.chain_mu(&mu)?.clone();
            (pred, d)
        }
    };
    let loss = total_loss(&p, gt, &pred)?;
    let mut grad = softmax_backward(&p, &loss_mce_grad(&p, gt)?);
    add_into(&mut grad, &mu_backward(&p, &mu, &d_mu));
    Ok(Evaluation { loss, grad, pred })
}

fn finite_or_diverged(step: usize, loss: &LossBreakdown) -> Result<()> {
    if loss.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            loss: loss.total,
        })
    }
}

/// Runs `steps` descent steps on the whole volume, halving the step size
/// while the loss would increase and growing it after each accepted step.
/// Recorded losses never go up.
#[allow(clippy::too_many_arguments)]
fn descend(
    logits: &mut LogitVolume,
    gt: &GroundTruth,
    spec: &SmoothnessSpec,
    phase: Phase,
    steps: usize,
    mut lr: f64,
    step0: usize,
    history: &mut Vec<LossRecord>,
) -> Result<Surfaces> {
    let mut cur = evaluate(logits, gt, phase, spec)?;
    finite_or_diverged(step0, &cur.loss)?;
    for k in 1..=steps {
        let step = step0 + k;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            if lr == 0.0 {
                break;
            }
            let mut cand = logits.clone().into_inner();
            for (c, g) in cand.as_mut_slice().iter_mut().zip(cur.grad.as_slice()) {
                *c -= lr * g;
            }
            let cand = LogitVolume::new(cand).map_err(|_| Error::Diverged {
                step,
                loss: f64::NAN,
            })?;
            let next = evaluate(&cand, gt, phase, spec)?;
            finite_or_diverged(step, &next.loss)?;
            if next.loss.total <= cur.loss.total {
                accepted = Some((cand, next));
                break;
            }
            lr *= 0.5;
        }
        if let Some((cand, next)) = accepted {
            *logits = cand;
            cur = next;
            lr *= GROWTH;
        }
        history.push(LossRecord {
            step,
            phase,
            loss: cur.loss,
            learning_rate: lr,
        });
    }
    Ok(cur.pred)
}

/// One column of the pretraining loss: unnormalized cross-entropy and
/// `|μ - s|`, with the gradient of `mce / cells + l1 / columns`.
struct ColumnEval {
    mce: f64,
    l1: f64,
    mu: f64,
}

impl ColumnEval {
    fn total(&self, cells: f64, columns: f64) -> f64 {
        self.mce / cells + self.l1 / columns
    }
}

fn eval_column(
    logits: &[f64],
    hot: usize,
    s: f64,
    cells: f64,
    columns: f64,
    p: &mut [f64],
    grad: Option<&mut [f64]>,
) -> ColumnEval {
    softmax_into(logits, 1.0, p);
    let mut mce = 0.0;
    let mut mu = 0.0;
    for (z, &pz) in p.iter().enumerate() {
        let q = pz.clamp(P_CLAMP, 1.0 - P_CLAMP);
        mce -= if z == hot { q.ln() } else { (1.0 - q).ln() };
        mu += z as f64 * pz;
    }
    let l1 = (mu - s).abs();
    if let Some(grad) = grad {
        let d_mu = if mu > s {
            1.0 / columns
        } else if mu < s {
            -1.0 / columns
        } else {
            0.0
        };
        let d_p = |z: usize, pz: f64| -> f64 {
            if !(P_CLAMP..=1.0 - P_CLAMP).contains(&pz) {
                0.0
            } else if z == hot {
                -1.0 / (cells * pz)
            } else {
                1.0 / (cells * (1.0 - pz))
            }
        };
        let inner: f64 = p.iter().enumerate().map(|(z, &pz)| pz * d_p(z, pz)).sum();
        for (z, (g, &pz)) in grad.iter_mut().zip(p.iter()).enumerate() {
            *g = pz * (d_p(z, pz) - inner) + d_mu * pz * (z as f64 - mu);
        }
    }
    ColumnEval { mce, l1, mu }
}

/// Pretraining. The loss is a sum of independent per-column terms, so each
/// column keeps its own step size: grown after an accepted step, halved
/// (and the column left unchanged) when the step would increase its term.
fn pretrain(
    logits: &mut LogitVolume,
    gt: &GroundTruth,
    steps: usize,
    base_lr: f64,
    history: &mut Vec<LossRecord>,
) -> Result<Surfaces> {
    let (n, width, depth) = logits.dims();
    let cells = (n * width * depth) as f64;
    let columns = (n * width) as f64;
    let mut theta = logits.clone().into_inner().into_vec();
    let targets: Vec<(usize, f64)> = (0..n)
        .flat_map(|i| (0..width).map(move |x| (i, x)))
        .map(|(i, x)| (gt.onehot_row(i, x), gt.positions().get(i, x)))
        .collect();

    struct Col {
        lr: f64,
        eval: ColumnEval,
        grad: Vec<f64>,
        p: Vec<f64>,
        cand: Vec<f64>,
    }
    let mut cols: Vec<Col> = theta
        .chunks(depth)
        .zip(&targets)
        .map(|(l, &(hot, s))| {
            let (mut grad, mut p) = (vec![0.0; depth], vec![0.0; depth]);
            let eval = eval_column(l, hot, s, cells, columns, &mut p, Some(&mut grad));
            Col {
                lr: base_lr,
                eval,
                grad,
                p,
                cand: vec![0.0; depth],
            }
        })
        .collect();

    let summarize = |cols: &[Col]| {
        let mce = cols.iter().map(|c| c.eval.mce).sum::<f64>() / cells;
        let l1 = cols.iter().map(|c| c.eval.l1).sum::<f64>() / columns;
        let lr = cols.iter().map(|c| c.lr).sum::<f64>() / columns;
        (LossBreakdown { mce, l1, total: mce + l1 }, lr)
    };
    finite_or_diverged(0, &summarize(&cols).0)?;

    for step in 1..=steps {
        theta
            .par_chunks_mut(depth)
            .zip(cols.par_iter_mut())
            .zip(targets.par_iter())
            .for_each(|((l, c), &(hot, s))| {
                for ((v, &x), &g) in c.cand.iter_mut().zip(l.iter()).zip(&c.grad) {
                    *v = x - c.lr * g;
                }
                let next = eval_column(&c.cand, hot, s, cells, columns, &mut c.p, None);
                if next.total(cells, columns) <= c.eval.total(cells, columns) {
                    l.copy_from_slice(&c.cand);
                    c.eval = eval_column(l, hot, s, cells, columns, &mut c.p, Some(&mut c.grad));
                    c.lr *= GROWTH;
                } else {
                    c.lr *= 0.5;
                }
            });
        let (loss, lr) = summarize(&cols);
        finite_or_diverged(step, &loss)?;
        history.push(LossRecord {
            step,
            phase: Phase::Pretrain,
            loss,
            learning_rate: lr,
        });
    }
    *logits = LogitVolume::new(Grid3::from_vec(n, width, depth, theta)?)?;
    let mu = cols.iter().map(|c| c.eval.mu).collect();
    Surfaces::from_vec(n, width, mu)
}

/// Pretrains on `L_mCE + L1(μ)`, then finetunes on `L_mCE + L1(segment)`.
pub fn fit_surfaces(
    input: FitInput,
    gt: &GroundTruth,
    spec: &SmoothnessSpec,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    let mut logits = input.into_logits()?;
    gt.check_volume(&logits)?;
    if (spec.surfaces(), spec.width()) != (gt.surfaces(), gt.width()) {
        return Err(Error::Dimension(format!(
            "smoothness spec is {}x{}, tracing {}x{}",
            spec.surfaces(),
            spec.width(),
            gt.surfaces(),
            gt.width()
        )));
    }
    let mut history = Vec::with_capacity(cfg.pretrain_steps + cfg.finetune_steps);
    let pretrained = pretrain(&mut logits, gt, cfg.pretrain_steps, cfg.learning_rate, &mut history)?;
    let surfaces = if cfg.finetune_steps > 0 {
        descend(
            &mut logits,
            gt,
            spec,
            Phase::Finetune,
            cfg.finetune_steps,
            cfg.finetune_rate(),
            cfg.pretrain_steps,
            &mut history,
        )?
    } else {
        pretrained.clone()
    };
    Ok(FitResult {
        surfaces,
        pretrained,
        logits,
        history,
    })
}
