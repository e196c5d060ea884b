//! Writes a few synthetic scans with their tracings.
//!
//! ```text
//! cargo run --example phantom_gallery -- out/gallery
//! ```

use std::path::PathBuf;

use ddpseg::imageio::{save_bscan, write_surfaces, ImageFormat};
use ddpseg::phantom::{generate, PhantomSpec};

fn main() -> ddpseg::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "gallery".into()));
    std::fs::create_dir_all(&dir).map_err(|e| ddpseg::Error::Io { path: dir.clone(), source: e })?;

    let specs = [
        ("flat", PhantomSpec::layered(96, 64, 3, 1).with_amplitude(0.0)),
        ("wavy", PhantomSpec::layered(96, 64, 3, 2).with_amplitude(6.0)),
        ("noisy", PhantomSpec::layered(96, 64, 3, 3).with_noise(0.08)),
        (
            "dropout",
            PhantomSpec::layered(96, 64, 3, 4).with_noise(0.05).with_dropout(1, 30, 45),
        ),
    ];
    for (name, spec) in specs {
        let p = generate(&spec)?;
        save_bscan(&p.image, &dir.join(format!("{name}.pgm")), ImageFormat::Pgm16)?;
        write_surfaces(p.truth.positions(), &dir.join(format!("{name}.csv")))?;
        println!(
            "{name:8} {}x{} surfaces={} step bounds={:?} polarity={:?}",
            spec.width, spec.depth, spec.surfaces, p.step_bounds, p.polarity
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}
