//! Trains the glyph classifier on sharp images.
//!
//! cargo run --release --example train_net -- [epochs] [out.bin]

use difflens::optimize::sharp_accuracy;
use difflens::tasknet::{train_classifier, GlyphSpec, TrainConfig};

fn main() -> difflens::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let out = args.get(2).cloned().unwrap_or_else(|| "net.bin".into());
    let spec = GlyphSpec::default();
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let t = std::time::Instant::now();
    let net = train_classifier(&spec, &cfg, |epoch, loss| println!("epoch {epoch}: mean loss {loss:.4}"))?;
    println!("trained in {:.1?}, sharp accuracy {:.2}%", t.elapsed(), 100.0 * sharp_accuracy(&net, &spec, 2000)?);
    net.save(std::path::Path::new(&out))?;
    Ok(())
}
