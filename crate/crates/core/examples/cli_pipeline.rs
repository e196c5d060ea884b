//! `gen`, `cost`, `solve` and `eval` chained through files in a temporary
//! directory, exactly as from a shell.

use ddpseg::driver::main_with;

fn run(args: &[&str]) {
    let code = main_with(std::iter::once("ddpseg").chain(args.iter().copied()));
    assert_eq!(code, 0, "ddpseg {}", args.join(" "));
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let p = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    let (gen, cost, soft, hard) = (p("gen"), p("cost.csv"), p("soft.csv"), p("hard.csv"));
    let (image, truth) = (p("gen/image.pgm"), p("gen/truth.csv"));

    run(&["gen", "--seed", "7", "--noise", "0.05", "--dropout", "0:20:30", "--out", &gen]);
    run(&["cost", "--image", &image, "--polarity", "d2b,b2d", "--out", &cost]);
    run(&["solve", "--cost", &cost, "--deltas-from", &truth, "--epsilon", "0.1", "--out", &soft]);
    run(&["solve", "--hard", "--cost", &cost, "--deltas-from", &truth, "--out", &hard]);
    println!("soft solver:");
    run(&["eval", "--pred", &soft, "--truth", &truth]);
    println!("hard solver:");
    run(&["eval", "--pred", &hard, "--truth", &truth]);
}
