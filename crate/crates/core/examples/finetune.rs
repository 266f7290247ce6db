//! The three fine-tuning regimes (freeze lens, freeze network, joint)
//! starting from a random lens and a sharp-trained network.
//!
//! cargo run --release --example finetune -- [iters]

use difflens::optimize::{eval_accuracy, finetune_e2e, init_paper_geometry, DesignConfig, Freeze, Mode};
use difflens::tasknet::{train_classifier, GlyphSpec, TrainConfig};

fn main() -> difflens::Result<()> {
    let iters = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let spec = GlyphSpec::default();
    let net = train_classifier(&spec, &TrainConfig::default(), |_, _| {})?;
    let init = init_paper_geometry(2, 0)?;
    let mut cfg = DesignConfig::new(Mode::E2e, iters, 0);
    cfg.net_lr = 1e-3;
    println!("start: {:.1}%", 100.0 * eval_accuracy(&init, &net, &spec, cfg.eval_size, &cfg)?);
    for freeze in [Freeze::Lens, Freeze::Net, Freeze::None] {
        let (out, tuned) = finetune_e2e(&init, &net, &spec, &cfg, freeze)?;
        let acc = eval_accuracy(&out.system, &tuned, &spec, cfg.eval_size, &cfg)?;
        println!("freeze {freeze:?}: {:.1}% after {} steps", 100.0 * acc, out.history.len());
    }
    Ok(())
}
