//! Traces a plano-convex singlet and compares its best focus with the
//! thick-lens back focal distance.
//!
//! cargo run --release --example paraxial_singlet

use difflens::optics::{ApertureStop, AsphericSurface, LensSystem, Material, Sensor};
use difflens::raytrace::{best_focus_z, sample_pupil_rays};

fn main() -> difflens::Result<()> {
    let glass = Material::new("n1.5", 1.5, 0.0)?;
    let surfaces = vec![
        AsphericSurface::spherical(1.0 / 50.0, 0.0, 6.0, glass),
        AsphericSurface::spherical(0.0, 2.0, 6.0, Material::air()),
    ];
    let stop = ApertureStop { index: 0, vertex_z: -1.0, radius: 0.5 };
    let system = LensSystem::new("plano-convex", surfaces, stop, Sensor { z: 110.0, ..Sensor::standard(110.0) })?;
    let bundle = sample_pupil_rays(&system, 0.0, 0.5893, 1024, 0);
    let focus = best_focus_z(&system, &bundle)?.expect("bundle reaches the back surface");
    let (n, r, t) = (1.5, 50.0, 2.0);
    let f = r / (n - 1.0);
    let bfd = f - t * f * (n - 1.0) / (n * r);
    println!("traced BFD {:.4} mm, thick-lens BFD {:.4} mm", focus - 2.0, bfd);
    Ok(())
}
