//! The `ddpseg` command line: `gen`, `cost`, `solve`, `fit`, `eval` and
//! `gradcheck`.
//!
//! Every option can also come from a JSON file passed with `--config`:
//!
//! ```json
//! { "version": 1, "threads": 2, "solve": { "epsilon": 0.01, "alpha": 1.0 } }
//! ```
//!
//! Flags given on the command line win over the file. Exit status is 0 on
//! success, 1 for invalid input or options, 2 when a file cannot be read or
//! written. Outputs are written to a temporary file and renamed into place.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;
use serde::{Deserialize, Serialize};

use crate::costmodel::{cost_from_logits, heuristic_logits, CostVolume, LogitVolume, Polarity};
use crate::dynprog::{hard_dp_solve, SmoothnessSpec};
use crate::error::{Error, Result};
use crate::evalloss::{metrics, GroundTruth};
use crate::fit::{estimate_delta, fit_surfaces, format_history, FitConfig, FitInput};
use crate::gradients::{finite_diff_check, GradCheckReport};
use crate::grid::{Grid3, Surfaces};
use crate::imageio::{
    gradient_channels, load_bscan, read_surfaces, read_volume, save_bscan, write_atomic,
    write_surfaces, write_volume, ImageFormat,
};
use crate::phantom::{generate, Dropout, PhantomSpec};
use crate::softdp::segment;

/// The only config schema understood so far.
pub const CONFIG_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "ddpseg", version, about = "Smoothness-constrained surface segmentation")]
pub struct Cli {
    /// JSON file with default options, overridden by flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-surface work [default: 1].
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Subcommand, Debug)]
pub enum Verb {
    /// Generate a synthetic scan with its tracing.
    Gen(GenArgs),
    /// Turn an image or a logit volume into a cost volume.
    Cost(CostArgs),
    /// Segment a cost volume.
    Solve(SolveArgs),
    /// Fit per-column logits to a tracing, then segment.
    Fit(FitArgs),
    /// Compare a segmentation with a tracing.
    Eval(EvalArgs),
    /// Check solver gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenArgs {
    /// Output directory; receives image.pgm (or image.csv), truth.csv and phantom.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Full phantom description; the flags below override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Columns [default: 64].
    #[arg(long)]
    pub width: Option<usize>,
    /// Rows [default: 48].
    #[arg(long)]
    pub depth: Option<usize>,
    /// [default: 2]
    #[arg(long)]
    pub surfaces: Option<usize>,
    /// Sinusoid amplitude in rows, for every surface [default: 4].
    #[arg(long)]
    pub amplitude: Option<f64>,
    /// Sinusoid wavelength in columns, for every surface [default: 40].
    #[arg(long)]
    pub wavelength: Option<f64>,
    /// Layer intensities top to bottom, one more than surfaces.
    #[arg(long, value_delimiter = ',')]
    pub contrasts: Option<Vec<f64>>,
    /// Gaussian noise sigma [default: 0].
    #[arg(long)]
    pub noise: Option<f64>,
    /// Weak-boundary span as `surface:start:end` (end exclusive); repeatable.
    #[arg(long, value_parser = parse_dropout)]
    pub dropout: Option<Vec<Dropout>>,
    /// Minimum rows between adjacent surfaces [default: 6].
    #[arg(long)]
    pub min_gap: Option<f64>,
    /// Write the image as CSV instead of PGM.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub csv: Option<bool>,
}

fn parse_dropout(s: &str) -> std::result::Result<Dropout, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [surface, start, end] = parts.as_slice() else {
        return Err(format!("expected surface:start:end, got {s:?}"));
    };
    let num = |v: &str| v.parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok(Dropout {
        surface: num(surface)?,
        start: num(start)?,
        end: num(end)?,
    })
}

#[derive(Args, Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostArgs {
    /// B-scan (PGM, or CSV by extension).
    #[arg(long, conflicts_with = "logits")]
    pub image: Option<PathBuf>,
    /// Logit volume CSV.
    #[arg(long)]
    pub logits: Option<PathBuf>,
    /// Boundary polarity per surface, e.g. `d2b,b2d`; required with --image.
    #[arg(long, value_delimiter = ',')]
    pub polarity: Option<Vec<Polarity>>,
    /// Logit gain for image input [default: 50].
    #[arg(long)]
    pub gain: Option<f64>,
    /// Output cost volume CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveArgs {
    /// Cost volume CSV.
    #[arg(long)]
    pub cost: Option<PathBuf>,
    /// Output surface CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Exact dynamic program (integer rows).
    #[arg(long, conflicts_with = "soft", num_args = 0..=1, default_missing_value = "true")]
    pub hard: Option<bool>,
    /// Smoothed dynamic program (fractional rows) [the default].
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub soft: Option<bool>,
    /// One smoothness limit for every column pair.
    #[arg(long, conflicts_with = "deltas_from")]
    pub delta: Option<usize>,
    /// Training tracings to estimate per-column limits from; repeatable.
    #[arg(long)]
    pub deltas_from: Option<Vec<PathBuf>>,
    /// Margin added to the largest training step [default: 1].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Smoothed-max error budget per window [default: 0.1].
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Explicit temperature; overrides --epsilon.
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Args, Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitArgs {
    /// B-scan to derive initial logits from.
    #[arg(long, conflicts_with = "logits")]
    pub image: Option<PathBuf>,
    /// Initial logit volume CSV.
    #[arg(long)]
    pub logits: Option<PathBuf>,
    /// Tracing to fit.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Tracings for smoothness estimation [default: the fitted tracing].
    #[arg(long)]
    pub training: Option<Vec<PathBuf>>,
    #[arg(long, value_delimiter = ',')]
    pub polarity: Option<Vec<Polarity>>,
    /// [default: 50]
    #[arg(long)]
    pub gain: Option<f64>,
    /// [default: 500]
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    /// [default: 100]
    #[arg(long)]
    pub finetune_steps: Option<usize>,
    /// [default: 10]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// [default: --learning-rate]
    #[arg(long)]
    pub finetune_learning_rate: Option<f64>,
    /// [default: 1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// [default: 1]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Output surface CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss history CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Axial resolution [default: 3.24].
    #[arg(long)]
    pub um_per_pixel: Option<f64>,
    /// Rows of the scan, for range checks [default: inferred].
    #[arg(long)]
    pub depth: Option<usize>,
    /// Metric JSON [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckArgs {
    /// Cost volume CSV [default: a random one].
    #[arg(long)]
    pub cost: Option<PathBuf>,
    /// Seed for the random cost volume [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: 6]
    #[arg(long)]
    pub width: Option<usize>,
    /// [default: 8]
    #[arg(long)]
    pub depth: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    pub surfaces: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    pub delta: Option<usize>,
    /// [default: 5]
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Finite-difference step [default: 1e-6].
    #[arg(long)]
    pub h: Option<f64>,
    /// Report JSON [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    version: u32,
    threads: Option<usize>,
    gen: Option<GenArgs>,
    cost: Option<CostArgs>,
    solve: Option<SolveArgs>,
    fit: Option<FitArgs>,
    eval: Option<EvalArgs>,
    gradcheck: Option<GradcheckArgs>,
}

fn read_config(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: ConfigFile = serde_json::from_str(&text)?;
    if cfg.version != CONFIG_VERSION {
        return Err(Error::InvalidParameter(format!(
            "config version {} is not supported (expected {CONFIG_VERSION})",
            cfg.version
        )));
    }
    Ok(cfg)
}

/// Fills every unset flag from the config file.
macro_rules! overlay {
    ($flags:expr, $file:expr; $($field:ident),+ $(,)?) => {
        if let Some(file) = $file {
            $( if $flags.$field.is_none() { $flags.$field = file.$field; } )+
        }
    };
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| Error::InvalidParameter(format!("--{flag} is required")))
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// What `gen` records next to the image.
#[derive(Debug, Serialize, Deserialize)]
pub struct PhantomMeta {
    pub spec: PhantomSpec,
    pub step_bounds: Vec<usize>,
    pub polarity: Vec<Polarity>,
}

fn run_gen(a: GenArgs) -> Result<()> {
    let out = required(a.out, "out")?;
    let mut spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)?
        }
        None => {
            let mut s = PhantomSpec::layered(64, 48, 2, 0).with_amplitude(4.0);
            s.wavelength = vec![40.0; 2];
            s.min_gap = 6.0;
            s
        }
    };
    if let Some(n) = a.surfaces {
        let base = PhantomSpec::layered(spec.width, spec.depth, n, spec.seed);
        spec.surfaces = n;
        spec.contrasts = base.contrasts;
        spec.amplitude = vec![spec.amplitude.first().copied().unwrap_or(4.0); n];
        spec.wavelength = vec![spec.wavelength.first().copied().unwrap_or(40.0); n];
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.width {
        spec.width = v;
    }
    if let Some(v) = a.depth {
        spec.depth = v;
    }
    if let Some(v) = a.amplitude {
        spec.amplitude = vec![v; spec.surfaces];
    }
    if let Some(v) = a.wavelength {
        spec.wavelength = vec![v; spec.surfaces];
    }
    if let Some(v) = a.contrasts {
        spec.contrasts = v;
    }
    if let Some(v) = a.noise {
        spec.noise_sigma = v;
    }
    if let Some(v) = a.dropout {
        spec.dropouts = v;
    }
    if let Some(v) = a.min_gap {
        spec.min_gap = v;
    }
    let phantom = generate(&spec)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let (name, format) = if a.csv.unwrap_or(false) {
        ("image.csv", ImageFormat::Csv)
    } else {
        ("image.pgm", ImageFormat::Pgm16)
    };
    save_bscan(&phantom.image, &out.join(name), format)?;
    write_surfaces(phantom.truth.positions(), &out.join("truth.csv"))?;
    let meta = PhantomMeta {
        spec,
        step_bounds: phantom.step_bounds,
        polarity: phantom.polarity,
    };
    write_json(&meta, Some(&out.join("phantom.json")))
}

/// The `cost` verb without files: image evidence or logits to costs.
pub fn cost_volume(
    image: Option<&crate::imageio::BScan>,
    logits: Option<LogitVolume>,
    polarity: &[Polarity],
    gain: f64,
) -> Result<CostVolume> {
    let logits = match (image, logits) {
        (Some(img), None) => heuristic_logits(&gradient_channels(img), polarity, gain)?,
        (None, Some(l)) => l,
        _ => {
            return Err(Error::InvalidParameter(
                "exactly one of an image or logits is required".into(),
            ))
        }
    };
    Ok(cost_from_logits(&logits))
}

fn load_image(path: &Path) -> Result<crate::imageio::BScan> {
    load_bscan(path, ImageFormat::from_path(path))
}

fn run_cost(a: CostArgs) -> Result<()> {
    let out = required(a.out, "out")?;
    let polarity = a.polarity.unwrap_or_default();
    let gain = a.gain.unwrap_or(DEFAULT_GAIN);
    let cost = match (&a.image, &a.logits) {
        (Some(p), None) => {
            if polarity.is_empty() {
                return Err(Error::InvalidParameter("--polarity is required with --image".into()));
            }
            cost_volume(Some(&load_image(p)?), None, &polarity, gain)?
        }
        (None, Some(p)) => cost_volume(None, Some(LogitVolume::new(read_volume(p)?)?), &[], gain)?,
        _ => return Err(Error::InvalidParameter("one of --image or --logits is required".into())),
    };
    write_volume(&cost, &out)
}

/// Logit gain used when none is given.
pub const DEFAULT_GAIN: f64 = 50.0;

fn read_truth(path: &Path, depth: Option<usize>) -> Result<GroundTruth> {
    let s = read_surfaces(path, depth)?;
    let depth = depth.unwrap_or_else(|| inferred_depth(&s));
    GroundTruth::new(s, depth)
}

fn inferred_depth(s: &Surfaces) -> usize {
    let top = s.as_slice().iter().cloned().fold(0.0, f64::max);
    (top.ceil() as usize + 1).max(2)
}

#[allow(clippy::too_many_arguments)]
fn smoothness(
    n: usize,
    width: usize,
    depth: usize,
    delta: Option<usize>,
    deltas_from: Option<&[PathBuf]>,
    alpha: f64,
    epsilon: f64,
    temperature: Option<f64>,
) -> Result<SmoothnessSpec> {
    let spec = match (delta, deltas_from) {
        (Some(d), None) => {
            let mut s = SmoothnessSpec::uniform(n, width, d, 1.0)?;
            s.set_epsilon(epsilon)?;
            s
        }
        (None, Some(paths)) if !paths.is_empty() => {
            let training = paths
                .iter()
                .map(|p| read_truth(p, Some(depth)))
                .collect::<Result<Vec<_>>>()?;
            estimate_delta(&training, alpha, epsilon)?
        }
        _ => {
            return Err(Error::InvalidParameter(
                "one of --delta or --deltas-from is required".into(),
            ))
        }
    };
    if (spec.surfaces(), spec.width()) != (n, width) {
        return Err(Error::Dimension(format!(
            "training tracings are {}x{}, costs {n}x{width}",
            spec.surfaces(),
            spec.width()
        )));
    }
    match temperature {
        Some(t) => spec.with_temperature(t),
        None => Ok(spec),
    }
}

fn run_solve(a: SolveArgs) -> Result<()> {
    let out = required(a.out, "out")?;
    let path = required(a.cost, "cost")?;
    let cost = CostVolume::new(read_volume(&path)?)?;
    let (n, width, depth) = cost.dims();
    let spec = smoothness(
        n,
        width,
        depth,
        a.delta,
        a.deltas_from.as_deref(),
        a.alpha.unwrap_or(1.0),
        a.epsilon.unwrap_or(0.1),
        a.temperature,
    )?;
    if a.hard.unwrap_or(false) && a.soft.unwrap_or(false) {
        return Err(Error::InvalidParameter("--hard and --soft are exclusive".into()));
    }
    let surfaces = if a.hard.unwrap_or(false) {
        hard_dp_solve(&cost, &spec)?.to_surfaces()
    } else {
        segment(&cost, &spec)?
    };
    write_surfaces(&surfaces, &out)
}

fn run_fit(a: FitArgs) -> Result<()> {
    let out = required(a.out, "out")?;
    let truth_path = required(a.truth, "truth")?;
    let input = match (&a.image, &a.logits) {
        (Some(p), None) => FitInput::Image {
            image: load_image(p)?,
            polarity: required(a.polarity.clone(), "polarity")?,
            gain: a.gain.unwrap_or(DEFAULT_GAIN),
        },
        (None, Some(p)) => FitInput::Logits(LogitVolume::new(read_volume(p)?)?),
        _ => return Err(Error::InvalidParameter("one of --image or --logits is required".into())),
    };
    let depth = match &input {
        FitInput::Image { image, .. } => image.depth(),
        FitInput::Logits(l) => l.depth(),
    };
    let gt = read_truth(&truth_path, Some(depth))?;
    let defaults = FitConfig::default();
    let cfg = FitConfig {
        pretrain_steps: a.pretrain_steps.unwrap_or(defaults.pretrain_steps),
        finetune_steps: a.finetune_steps.unwrap_or(defaults.finetune_steps),
        learning_rate: a.learning_rate.unwrap_or(defaults.learning_rate),
        finetune_learning_rate: a.finetune_learning_rate,
        alpha: a.alpha.unwrap_or(defaults.alpha),
        epsilon: a.epsilon.unwrap_or(defaults.epsilon),
    };
    cfg.validate()?;
    let training = match &a.training {
        Some(paths) if !paths.is_empty() => paths
            .iter()
            .map(|p| read_truth(p, Some(depth)))
            .collect::<Result<Vec<_>>>()?,
        _ => vec![gt.clone()],
    };
    let spec = estimate_delta(&training, cfg.alpha, cfg.epsilon)?;
    let result = fit_surfaces(input, &gt, &spec, &cfg)?;
    write_surfaces(&result.surfaces, &out)?;
    if let Some(h) = &a.history {
        write_atomic(h, format_history(&result.history).as_bytes())?;
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let pred = read_surfaces(&required(a.pred, "pred")?, a.depth)?;
    let truth = read_surfaces(&required(a.truth, "truth")?, a.depth)?;
    let depth = a
        .depth
        .unwrap_or_else(|| inferred_depth(&pred).max(inferred_depth(&truth)));
    let report = metrics(&pred, &GroundTruth::new(truth, depth)?, a.um_per_pixel.unwrap_or(3.24))?;
    write_json(&report, a.out.as_deref())
}

/// Uniform costs in `[-1, 1)` from a seeded generator.
pub fn random_costs(seed: u64, surfaces: usize, width: usize, depth: usize) -> Result<CostVolume> {
    let mut rng = Pcg32::seed_from_u64(seed);
    let data = (0..surfaces * width * depth)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    CostVolume::new(Grid3::from_vec(surfaces, width, depth, data)?)
}

#[derive(Serialize)]
struct GradcheckOutput {
    surfaces: usize,
    width: usize,
    depth: usize,
    delta: usize,
    temperature: f64,
    report: GradCheckReport,
}

fn run_gradcheck(a: GradcheckArgs) -> Result<()> {
    let cost = match &a.cost {
        Some(p) => CostVolume::new(read_volume(p)?)?,
        None => random_costs(
            a.seed.unwrap_or(0),
            a.surfaces.unwrap_or(1),
            a.width.unwrap_or(6),
            a.depth.unwrap_or(8),
        )?,
    };
    let (n, width, depth) = cost.dims();
    let (delta, temperature) = (a.delta.unwrap_or(1), a.temperature.unwrap_or(5.0));
    let spec = SmoothnessSpec::uniform(n, width, delta, temperature)?;
    let report = finite_diff_check(&cost, &spec, a.h.unwrap_or(1e-6))?;
    let out = GradcheckOutput {
        surfaces: n,
        width,
        depth,
        delta,
        temperature,
        report,
    };
    write_json(&out, a.out.as_deref())
}

fn dispatch(cli: Cli, file: ConfigFile) -> Result<()> {
    match cli.verb {
        Verb::Gen(mut a) => {
            overlay!(a, file.gen; out, spec, seed, width, depth, surfaces, amplitude,
                wavelength, contrasts, noise, dropout, min_gap, csv);
            run_gen(a)
        }
        Verb::Cost(mut a) => {
            overlay!(a, file.cost; image, logits, polarity, gain, out);
            run_cost(a)
        }
        Verb::Solve(mut a) => {
            overlay!(a, file.solve; cost, out, hard, soft, delta, deltas_from, alpha,
                epsilon, temperature);
            run_solve(a)
        }
        Verb::Fit(mut a) => {
            overlay!(a, file.fit; image, logits, truth, training, polarity, gain,
                pretrain_steps, finetune_steps, learning_rate, finetune_learning_rate, alpha,
                epsilon, out, history);
            run_fit(a)
        }
        Verb::Eval(mut a) => {
            overlay!(a, file.eval; pred, truth, um_per_pixel, depth, out);
            run_eval(a)
        }
        Verb::Gradcheck(mut a) => {
            overlay!(a, file.gradcheck; cost, seed, width, depth, surfaces, delta,
                temperature, h, out);
            run_gradcheck(a)
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => read_config(p)?,
        None => ConfigFile::default(),
    };
    let threads = cli.threads.or(file.threads).unwrap_or(1);
    if threads == 0 {
        return Err(Error::InvalidParameter("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli, file))
}

/// Runs the command line and returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("ddpseg: {}", first.trim_start_matches("error: "));
            return 1;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ddpseg: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}
