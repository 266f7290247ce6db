//! Task-driven doublet design from scratch against a frozen classifier.
//!
//! cargo run --release --example design_task -- [iters] [seed] [net.bin]

use difflens::optimize::{design_task, eval_accuracy, init_paper_geometry, DesignConfig, Mode};
use difflens::tasknet::{train_classifier, GlyphSpec, TaskNetwork, TrainConfig};

fn main() -> difflens::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iters = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = GlyphSpec { seed, ..GlyphSpec::default() };
    let net = match args.get(3) {
        Some(p) => TaskNetwork::load(std::path::Path::new(p))?,
        None => train_classifier(&spec, &TrainConfig { seed, ..TrainConfig::default() }, |_, _| {})?,
    };
    let cfg = DesignConfig::new(Mode::Task, iters, seed);
    let init = init_paper_geometry(2, seed)?;
    let before = eval_accuracy(&init, &net, &spec, cfg.eval_size, &cfg)?;
    let t = std::time::Instant::now();
    let out = design_task(&init, &net, &spec, &cfg)?;
    let after = eval_accuracy(&out.system, &net, &spec, cfg.eval_size, &cfg)?;
    println!("steps {} in {:.1?}", out.history.len(), t.elapsed());
    if let Some(e) = &out.aborted {
        println!("aborted: {e}");
    }
    let smooth = out.history.smoothed(50);
    if let (Some(a), Some(b)) = (smooth.first(), smooth.last()) {
        println!("smoothed loss {a:.4} -> {b:.4}");
    }
    println!("capture accuracy {:.1}% -> {:.1}%", 100.0 * before, 100.0 * after);
    Ok(())
}
