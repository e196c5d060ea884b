//! Pretraining on the soft-argmax, then finetuning through the solver.

use ddpseg::evalloss::{loss_l1, metrics};
use ddpseg::fit::{estimate_delta, fit_surfaces, FitConfig, FitInput, Phase};
use ddpseg::phantom::{generate, PhantomSpec};

fn main() -> ddpseg::Result<()> {
    let p = generate(&PhantomSpec::layered(64, 48, 2, 5).with_amplitude(4.0).with_noise(0.02))?;
    let cfg = FitConfig::default();
    let spec = estimate_delta(std::slice::from_ref(&p.truth), cfg.alpha, cfg.epsilon)?;
    let input = FitInput::Image {
        image: p.image.clone(),
        polarity: p.polarity.clone(),
        gain: 50.0,
    };
    let r = fit_surfaces(input, &p.truth, &spec, &cfg)?;

    for h in r.history.iter().filter(|h| [1, 10, 50, 100, 250, 500, 501, 550, 600].contains(&h.step)) {
        let phase = if h.phase == Phase::Pretrain { "pretrain" } else { "finetune" };
        println!("{:4} {phase:9} mCE {:.5} L1 {:.5} total {:.5}", h.step, h.loss.mce, h.loss.l1, h.loss.total);
    }
    println!("L1 of pretrained mu: {:.2e} px", loss_l1(&r.pretrained, &p.truth)?);
    let m = metrics(&r.surfaces, &p.truth, 3.24)?;
    println!("final MASD {:.3} um, HD {:.3} um", m.mean.masd_um, m.mean.hd_um);
    println!("final output respects the rounded limits: {}", spec.admits(&r.surfaces.rounded(), 1.0));
    Ok(())
}
