//! The seven derived channels of a scan, summarized.

use ddpseg::imageio::{gradient_channels, Channel};
use ddpseg::phantom::{generate, PhantomSpec};

fn main() -> ddpseg::Result<()> {
    let p = generate(&PhantomSpec::layered(64, 48, 2, 9).with_noise(0.02))?;
    let stack = gradient_channels(&p.image);
    println!("{:12} {:>9} {:>9} {:>9}", "channel", "min", "max", "mean");
    for c in Channel::ALL {
        let v = stack.channel(c);
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        println!("{:12} {lo:9.4} {hi:9.4} {mean:9.4}", format!("{c:?}"));
    }

    // the vertical gradient peaks on the boundaries
    let x = 20;
    let col: Vec<f64> = (0..48).map(|z| stack.get(Channel::Grad90, x, z)).collect();
    let peak = (0..48).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
    let trough = (0..48).min_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
    println!(
        "column {x}: strongest rise at row {peak}, strongest fall at row {trough}; truth {:.2} and {:.2}",
        p.truth.positions().get(0, x),
        p.truth.positions().get(1, x)
    );
    Ok(())
}
