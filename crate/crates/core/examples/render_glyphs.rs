//! Renders glyphs through a lens at several fields and reports PSNR.
//!
//! cargo run --release --example render_glyphs -- [out_dir]

use std::path::PathBuf;

use difflens::imaging::{psnr, simulate_capture_batch, write_ppm};
use difflens::optimize::{init_paper_geometry, linspace_fields, toy_psf_pitch, PAPER_HALF_FOV_DEG};
use difflens::psf::PsfConfig;
use difflens::tasknet::{generate_glyphs, GlyphSpec, Split, CLASS_NAMES};

fn main() -> difflens::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "render_out".into()));
    std::fs::create_dir_all(&dir).map_err(|e| difflens::Error::Io { path: dir.clone(), source: e })?;
    let system = init_paper_geometry(2, 0)?;
    let fields = linspace_fields(PAPER_HALF_FOV_DEG, 3);
    let cfg = PsfConfig { kernel_size: 31, pitch: toy_psf_pitch(&system.sensor), rays: 4096, seed: 0 };
    let glyphs = generate_glyphs(&GlyphSpec::default(), 4, Split::Val);
    let captures = simulate_capture_batch(&system, &glyphs, &fields, &cfg)?;
    for c in &captures {
        let sharp = &glyphs[c.patch_index];
        let name = CLASS_NAMES[sharp.label.unwrap_or(0)];
        println!("glyph {} ({name}) at {:.1} deg: psnr {:.2} dB", c.patch_index, c.field_angle_deg, psnr(sharp, &c.image)?);
        write_ppm(&c.image, &dir.join(format!("glyph{}_field{}.ppm", c.patch_index, c.field_index)))?;
    }
    for (i, g) in glyphs.iter().enumerate() {
        write_ppm(g, &dir.join(format!("glyph{i}_sharp.ppm")))?;
    }
    Ok(())
}
