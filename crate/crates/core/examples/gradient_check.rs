//! Tape gradients of the RMS spot of a doublet against central differences.
//!
//! cargo run --release --example gradient_check

use difflens::autodiff::{Scalar, Tape};
use difflens::optimize::init_paper_geometry;
use difflens::psf::rms_radius;
use difflens::raytrace::{sample_pupil_rays, trace_to_sensor};

fn main() -> difflens::Result<()> {
    let system = init_paper_geometry(2, 1)?;
    let ids = system.optimizable_params(false);
    let bundle = sample_pupil_rays(&system, 15.0, 0.5893, 256, 0);
    let tape = Tape::new();
    let (params, leaves) = system.lift_on_tape(&tape, &ids);
    let rms = rms_radius(&trace_to_sensor(&system, &params, &bundle)?.hits)?;
    let grads = tape.backward(rms)?;
    let f = |s: &difflens::optics::LensSystem| -> difflens::Result<f64> {
        rms_radius(&trace_to_sensor(s, &s.params_f64(), &bundle)?.hits)
    };
    println!("rms {:.6} mm", rms.value());
    for (id, leaf) in ids.iter().zip(&leaves) {
        let h = 1e-6 * system.param(*id).abs().max(1e-3);
        let (mut a, mut b) = (system.clone(), system.clone());
        a.set_param(*id, system.param(*id) + h);
        b.set_param(*id, system.param(*id) - h);
        let fd = (f(&a)? - f(&b)?) / (2.0 * h);
        println!("{id:<22} ad {:+.6e} fd {:+.6e}", grads.wrt(*leaf), fd);
    }
    Ok(())
}
