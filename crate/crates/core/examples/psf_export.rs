//! PSF, spot diagram and layout of a from-scratch doublet.
//!
//! cargo run --release --example psf_export -- [out_dir] [field_deg]

use std::path::PathBuf;

use difflens::io::{export_layout, export_psf, export_spot, save_lens};
use difflens::optimize::{init_paper_geometry, PAPER_HALF_FOV_DEG};
use difflens::psf::{psf_rgb, spot_stats, PsfConfig};

fn main() -> difflens::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let dir = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("psf_out"));
    let field: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20.0);
    std::fs::create_dir_all(&dir).map_err(|e| difflens::Error::Io { path: dir.clone(), source: e })?;

    let system = init_paper_geometry(2, 0)?;
    let cfg = PsfConfig { pitch: 0.01, ..PsfConfig::default() };
    let rgb = psf_rgb(&system, &system.params_f64(), field, &cfg)?;
    for (c, t) in ["R", "G", "B"].iter().zip(&rgb.traces) {
        let s = spot_stats(&t.hit_values())?;
        println!("{c}: valid {} rms {:.4} mm median {:.4} mm r80 {:.4} mm", s.valid, s.rms_radius, s.median_radius, s.r80);
    }
    println!("anchor ({:.4}, {:.4}) mm", rgb.anchor[0], rgb.anchor[1]);
    save_lens(&system, &dir.join("lens.json"))?;
    export_psf(&rgb.channels, &dir.join("psf.ppm"))?;
    export_spot(&rgb.traces, &dir.join("spot.csv"))?;
    export_layout(&system, PAPER_HALF_FOV_DEG, &dir.join("layout.svg"))?;
    println!("wrote {}", dir.display());
    Ok(())
}
