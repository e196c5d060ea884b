//! Per-column argmax against the smoothness-constrained solver where a
//! boundary fades out.

use ddpseg::costmodel::{argmax_surfaces, cost_from_logits, heuristic_logits};
use ddpseg::evalloss::{metrics, GroundTruth};
use ddpseg::fit::estimate_delta;
use ddpseg::imageio::gradient_channels;
use ddpseg::phantom::{generate, PhantomSpec};
use ddpseg::softdp::segment;

fn phantom(seed: u64) -> PhantomSpec {
    let mut s = PhantomSpec::layered(64, 48, 2, seed).with_noise(0.05);
    s.contrasts = vec![0.2, 0.7, 0.35];
    s.amplitude = vec![4.0; 2];
    s.wavelength = vec![40.0; 2];
    s.min_gap = 6.0;
    s
}

fn main() -> ddpseg::Result<()> {
    let training = (100..110)
        .map(|s| generate(&phantom(s)).map(|p| p.truth))
        .collect::<ddpseg::Result<Vec<GroundTruth>>>()?;
    let spec = estimate_delta(&training, 1.0, 0.1)?;
    println!("estimated limits: surface 0 max {}, surface 1 max {}", spec.max_delta(0), spec.max_delta(1));

    println!("{:>4} {:>14} {:>14} {:>12} {:>12}", "seed", "argmax MASD", "solver MASD", "argmax span", "solver span");
    for seed in 0..8u64 {
        let (surface, start) = ((seed % 2) as usize, 12 + (seed as usize * 5) % 36);
        let p = generate(&phantom(seed).with_dropout(surface, start, start + 10))?;
        let logits = heuristic_logits(&gradient_channels(&p.image), &p.polarity, 50.0)?;
        let base = argmax_surfaces(&logits);
        let ddp = segment(&cost_from_logits(&logits), &spec)?;
        let span = |s: &ddpseg::Surfaces| {
            (start..start + 10)
                .map(|x| (s.get(surface, x) - p.truth.positions().get(surface, x)).abs())
                .sum::<f64>()
                / 10.0
        };
        println!(
            "{seed:4} {:14.3} {:14.3} {:12.2} {:12.2}",
            metrics(&base, &p.truth, 1.0)?.mean.masd_px,
            metrics(&ddp, &p.truth, 1.0)?.mean.masd_px,
            span(&base),
            span(&ddp)
        );
    }
    Ok(())
}
