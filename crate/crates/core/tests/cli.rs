use std::fs;
use std::path::Path;
use std::process::Command;

use ddpseg::costmodel::{cost_from_logits, heuristic_logits, CostVolume};
use ddpseg::driver::{main_with, PhantomMeta};
use ddpseg::dynprog::{hard_dp_solve, SmoothnessSpec};
use ddpseg::evalloss::{metrics, GroundTruth};
use ddpseg::fit::estimate_delta;
use ddpseg::imageio::{gradient_channels, read_surfaces, read_volume};
use ddpseg::phantom::generate;
use ddpseg::softdp::segment;
use tempfile::TempDir;

fn run(args: &[&str]) -> i32 {
    main_with(std::iter::once("ddpseg").chain(args.iter().copied()))
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

#[test]
fn gen_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (p(tmp.path(), "a"), p(tmp.path(), "b"));
    let args = ["gen", "--seed", "7", "--noise", "0.05", "--dropout", "1:4:14"];
    assert_eq!(run(&[&args[..], &["--out", &a]].concat()), 0);
    assert_eq!(run(&[&args[..], &["--out", &b]].concat()), 0);
    for f in ["image.pgm", "truth.csv", "phantom.json"] {
        assert_eq!(
            fs::read(Path::new(&a).join(f)).unwrap(),
            fs::read(Path::new(&b).join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn file_pipeline_matches_in_memory_pipeline() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let gen = p(d, "gen");
    assert_eq!(run(&["gen", "--seed", "3", "--noise", "0.03", "--dropout", "0:10:20", "--out", &gen]), 0);
    let image = p(d, "gen/image.pgm");
    let truth = p(d, "gen/truth.csv");
    let (cost, soft, out) = (p(d, "cost.csv"), p(d, "soft.csv"), p(d, "metrics.json"));
    assert_eq!(run(&["cost", "--image", &image, "--polarity", "d2b,b2d", "--gain", "50", "--out", &cost]), 0);
    assert_eq!(
        run(&["solve", "--cost", &cost, "--deltas-from", &truth, "--alpha", "1", "--epsilon", "0.1", "--out", &soft]),
        0
    );
    assert_eq!(run(&["eval", "--pred", &soft, "--truth", &truth, "--depth", "48", "--out", &out]), 0);

    let meta: PhantomMeta = serde_json::from_str(&fs::read_to_string(p(d, "gen/phantom.json")).unwrap()).unwrap();
    let ph = generate(&meta.spec).unwrap();
    let logits = heuristic_logits(&gradient_channels(&ph.image), &meta.polarity, 50.0).unwrap();
    let c = cost_from_logits(&logits);
    assert_eq!(read_volume(Path::new(&cost)).unwrap(), *c);
    let spec = estimate_delta(std::slice::from_ref(&ph.truth), 1.0, 0.1).unwrap();
    let s = segment(&c, &spec).unwrap();
    assert_eq!(read_surfaces(Path::new(&soft), None).unwrap(), s);
    let mem = serde_json::to_string_pretty(&metrics(&s, &ph.truth, 3.24).unwrap()).unwrap() + "\n";
    assert_eq!(fs::read_to_string(&out).unwrap(), mem);
}

#[test]
fn hard_and_sharp_soft_solutions_agree() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let gen = p(d, "gen");
    assert_eq!(run(&["gen", "--seed", "11", "--out", &gen]), 0);
    let (cost, hard, soft) = (p(d, "cost.csv"), p(d, "hard.csv"), p(d, "soft.csv"));
    let image = p(d, "gen/image.pgm");
    assert_eq!(run(&["cost", "--image", &image, "--polarity", "d2b,b2d", "--out", &cost]), 0);
    assert_eq!(run(&["solve", "--hard", "--cost", &cost, "--delta", "2", "--out", &hard]), 0);
    assert_eq!(run(&["solve", "--soft", "--epsilon", "1e-4", "--cost", &cost, "--delta", "2", "--out", &soft]), 0);
    let h = read_surfaces(Path::new(&hard), None).unwrap();
    let s = read_surfaces(Path::new(&soft), None).unwrap();
    for (a, b) in h.as_slice().iter().zip(s.as_slice()) {
        assert!((a - b).abs() <= 1e-3, "{a} vs {b}");
    }
}

#[test]
fn eval_of_truth_against_itself_is_zero() {
    let tmp = TempDir::new().unwrap();
    let gen = p(tmp.path(), "gen");
    assert_eq!(run(&["gen", "--out", &gen]), 0);
    let truth = p(tmp.path(), "gen/truth.csv");
    let out = p(tmp.path(), "m.json");
    assert_eq!(run(&["eval", "--pred", &truth, "--truth", &truth, "--out", &out]), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    for key in ["masd_px", "masd_um", "hd_px", "hd_um", "hd95_px", "hd95_um"] {
        assert_eq!(v["mean"][key], 0.0, "{key}");
        assert_eq!(v["surfaces"][0][key], 0.0, "{key}");
    }
    assert_eq!(v["um_per_pixel"], 3.24);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let cfg = p(d, "run.json");
    let gen = p(d, "gen");
    fs::write(
        &cfg,
        format!(r#"{{"version": 1, "threads": 2, "gen": {{"seed": 5, "width": 30, "out": "{gen}"}}}}"#),
    )
    .unwrap();
    assert_eq!(run(&["--config", &cfg, "gen", "--width", "20"]), 0);
    let meta: PhantomMeta = serde_json::from_str(&fs::read_to_string(p(d, "gen/phantom.json")).unwrap()).unwrap();
    assert_eq!((meta.spec.seed, meta.spec.width), (5, 20));

    fs::write(&cfg, r#"{"version": 2}"#).unwrap();
    assert_eq!(run(&["--config", &cfg, "gen", "--out", &gen]), 1);
    fs::write(&cfg, r#"{"version": 1, "gen": {"colour": 3}}"#).unwrap();
    assert_eq!(run(&["--config", &cfg, "gen", "--out", &gen]), 1);
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let gen = p(d, "gen");
    assert_eq!(run(&["gen", "--surfaces", "3", "--depth", "60", "--noise", "0.02", "--out", &gen]), 0);
    let image = p(d, "gen/image.pgm");
    let cost = p(d, "cost.csv");
    assert_eq!(run(&["cost", "--image", &image, "--polarity", "d2b,b2d,d2b", "--out", &cost]), 0);
    let (one, four) = (p(d, "one.csv"), p(d, "four.csv"));
    assert_eq!(run(&["--threads", "1", "solve", "--cost", &cost, "--delta", "2", "--out", &one]), 0);
    assert_eq!(run(&["--threads", "4", "solve", "--cost", &cost, "--delta", "2", "--out", &four]), 0);
    assert_eq!(fs::read(one).unwrap(), fs::read(four).unwrap());
}

#[test]
fn fit_writes_surfaces_and_history() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let gen = p(d, "gen");
    assert_eq!(run(&["gen", "--width", "24", "--depth", "30", "--out", &gen]), 0);
    let (out, hist) = (p(d, "fit.csv"), p(d, "loss.csv"));
    let args = [
        "fit", "--image", &p(d, "gen/image.pgm"), "--truth", &p(d, "gen/truth.csv"),
        "--polarity", "d2b,b2d", "--pretrain-steps", "40", "--finetune-steps", "10",
        "--out", &out, "--history", &hist,
    ];
    assert_eq!(run(&args), 0);
    let h = fs::read_to_string(&hist).unwrap();
    let lines: Vec<&str> = h.lines().collect();
    assert_eq!(lines[0], "step,phase,mce,l1,total");
    assert_eq!(lines.len(), 51);
    assert!(lines[40].starts_with("40,pretrain,") && lines[41].starts_with("41,finetune,"));
    let truth = read_surfaces(Path::new(&p(d, "gen/truth.csv")), None).unwrap();
    let fitted = read_surfaces(Path::new(&out), None).unwrap();
    assert_eq!((fitted.surfaces(), fitted.width()), (truth.surfaces(), truth.width()));
}

#[test]
fn gradcheck_reports_small_errors() {
    let tmp = TempDir::new().unwrap();
    let out = p(tmp.path(), "g.json");
    assert_eq!(run(&["gradcheck", "--seed", "2", "--temperature", "5", "--out", &out]), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert!(v["report"]["max_rel_err"].as_f64().unwrap() <= 1e-5);
    assert!(v["report"]["compared"].as_u64().unwrap() > 0);
}

#[test]
fn hard_solve_on_file_costs_matches_library() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let gen = p(d, "gen");
    assert_eq!(run(&["gen", "--seed", "4", "--noise", "0.1", "--out", &gen]), 0);
    let cost = p(d, "cost.csv");
    let hard = p(d, "hard.csv");
    assert_eq!(run(&["cost", "--image", &p(d, "gen/image.pgm"), "--polarity", "d2b,b2d", "--out", &cost]), 0);
    assert_eq!(run(&["solve", "--hard", "--cost", &cost, "--delta", "1", "--out", &hard]), 0);
    let c = CostVolume::new(read_volume(Path::new(&cost)).unwrap()).unwrap();
    let spec = SmoothnessSpec::uniform(2, c.width(), 1, 1.0).unwrap();
    let lib = hard_dp_solve(&c, &spec).unwrap().to_surfaces();
    assert_eq!(read_surfaces(Path::new(&hard), None).unwrap(), lib);
    assert!(spec.admits(&lib, 0.0));
    let gt = GroundTruth::new(read_surfaces(Path::new(&p(d, "gen/truth.csv")), None).unwrap(), 48).unwrap();
    assert!(metrics(&lib, &gt, 1.0).unwrap().mean.masd_px < 5.0);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_ddpseg");
    let tmp = TempDir::new().unwrap();
    let missing = p(tmp.path(), "nope.csv");
    let out = p(tmp.path(), "x.csv");
    let io = Command::new(bin).args(["solve", "--cost", &missing, "--delta", "1", "--out", &out]).output().unwrap();
    assert_eq!(io.status.code(), Some(2));
    let stderr = String::from_utf8(io.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");

    let bad = Command::new(bin).args(["gen", "--width", "1", "--out", &out]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let unknown = Command::new(bin).args(["frobnicate"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(1));
    let help = Command::new(bin).args(["solve", "--help"]).output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8(help.stdout).unwrap().contains("--epsilon"));
}
