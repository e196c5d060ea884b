//! Exact and smoothed solutions of the same cost volume as the smoothing
//! budget shrinks.

use ddpseg::costmodel::{cost_from_logits, heuristic_logits};
use ddpseg::dynprog::hard_dp_solve;
use ddpseg::evalloss::metrics;
use ddpseg::fit::estimate_delta;
use ddpseg::imageio::gradient_channels;
use ddpseg::phantom::{generate, PhantomSpec};
use ddpseg::softdp::segment_with_state;

fn main() -> ddpseg::Result<()> {
    let p = generate(&PhantomSpec::layered(80, 56, 2, 21).with_noise(0.04))?;
    let logits = heuristic_logits(&gradient_channels(&p.image), &p.polarity, 50.0)?;
    let cost = cost_from_logits(&logits);

    let spec = estimate_delta(std::slice::from_ref(&p.truth), 1.0, 0.1)?;
    let hard = hard_dp_solve(&cost, &spec)?;
    let hard_s = hard.to_surfaces();
    println!("hard: totals {:?}, MASD {:.3} px", hard.totals, metrics(&hard_s, &p.truth, 1.0)?.mean.masd_px);

    println!("{:>8} {:>10} {:>14} {:>12}", "epsilon", "t", "max |soft-hard|", "total gap");
    for eps in [3.0, 1.0, 0.3, 0.1, 1e-2, 1e-3, 1e-4] {
        let mut s = spec.clone();
        s.set_epsilon(eps)?;
        let (z, state) = segment_with_state(&cost, &s)?;
        let diff = z
            .as_slice()
            .iter()
            .zip(hard_s.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let gap = state.soft_totals()[0] - hard.totals[0];
        println!("{eps:8.0e} {:10.3} {diff:14.6} {gap:12.3e}", s.temperature(0));
    }
    Ok(())
}
