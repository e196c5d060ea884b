//! How far the smoothed max sits above the true max, against its bound
//! `log(window) / t`.

use ddpseg::softdp::{logsumexp_window, select_temperature};
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;

fn main() -> ddpseg::Result<()> {
    let mut rng = Pcg32::seed_from_u64(5);
    let v: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("window of 9 values, max {m:.4}");
    println!("{:>8} {:>12} {:>12}", "t", "gap", "bound");
    for t in [0.1, 0.5, 1.0, 5.0, 20.0, 100.0, 1000.0] {
        let gap = logsumexp_window(&v, 0, 8, t)? - m;
        println!("{t:8} {gap:12.6} {:12.6}", 9f64.ln() / t);
    }
    // equal values are the worst case: the bound is attained
    let flat = vec![0.25; 9];
    println!("flat window at t=2: gap {:.6}, bound {:.6}", logsumexp_window(&flat, 0, 8, 2.0)? - 0.25, 9f64.ln() / 2.0);
    for (delta, eps) in [(1, 0.1), (4, 0.1), (4, 1e-3)] {
        println!("delta {delta}, epsilon {eps}: t = {:.3}", select_temperature(delta, eps)?);
    }
    Ok(())
}
