//! Analytic solver gradients against central differences.

use ddpseg::driver::random_costs;
use ddpseg::dynprog::SmoothnessSpec;
use ddpseg::gradients::{backward, finite_diff_check};
use ddpseg::softdp::segment_with_state;
use ddpseg::Surfaces;

fn main() -> ddpseg::Result<()> {
    println!("{:>4} {:>4} {:>12} {:>12} {:>8}", "seed", "t", "max abs", "max rel", "entries");
    for seed in 0..6 {
        for t in [1.0, 5.0, 20.0] {
            let c = random_costs(seed, 1, 7, 9)?;
            let spec = SmoothnessSpec::uniform(1, 7, 2, t)?;
            let r = finite_diff_check(&c, &spec, 1e-6)?;
            println!("{seed:4} {t:4} {:12.3e} {:12.3e} {:8}", r.max_abs_err, r.max_rel_err, r.compared);
        }
    }

    // the gradient of the last position, laid out as the cost grid
    let c = random_costs(0, 1, 5, 6)?;
    let spec = SmoothnessSpec::uniform(1, 5, 1, 5.0)?;
    let (z, state) = segment_with_state(&c, &spec)?;
    let mut dz = Surfaces::zeros(1, 5);
    dz.set(0, 4, 1.0);
    let g = backward(&state, &dz)?;
    println!("positions {:?}", z.row(0).iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    for row in 0..6 {
        let line: Vec<String> = (0..5).map(|x| format!("{:8.4}", g.d_cost.get(0, x, row))).collect();
        println!("z={row} {}", line.join(" "));
    }
    Ok(())
}
