//! Classical spot-size design of a from-scratch doublet.
//!
//! cargo run --release --example design_imaging -- [iters] [seed] [base_lr] [out.json]

use std::time::Instant;

use difflens::optimize::{design_imaging, eval_rms, init_paper_geometry, DesignConfig, Mode};

fn main() -> difflens::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iters = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = DesignConfig::new(Mode::Imaging, iters, seed);
    if let Some(lr) = args.get(3).and_then(|s| s.parse().ok()) {
        cfg.base_lr = lr;
    }
    let init = init_paper_geometry(2, seed)?;
    let before = eval_rms(&init, &cfg.field_angles, cfg.rays_eval, 0)?;
    let t = Instant::now();
    let out = design_imaging(&init, &cfg)?;
    let after = eval_rms(&out.system, &cfg.field_angles, cfg.rays_eval, 0)?;
    println!("steps {} in {:.1?}", out.history.len(), t.elapsed());
    if let Some(e) = &out.aborted {
        println!("aborted: {e}");
    }
    println!("rms spot: initial {:.5} mm -> final {:.5} mm ({:.1}%)", before, after, 100.0 * after / before);
    if let Some(path) = args.get(4) {
        difflens::io::save_lens(&out.system, std::path::Path::new(path))?;
        out.history.write_csv(&std::path::Path::new(path).with_extension("csv"))?;
    }
    for s in &out.system.surfaces {
        println!("  z {:.4} c {:+.4} a4 {:+.3e}", s.vertex_z, s.curvature, s.alpha[0]);
    }
    Ok(())
}
