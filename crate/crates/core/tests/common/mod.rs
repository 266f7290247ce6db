#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use difflens::geom::Vec3;
use difflens::optics::{ApertureStop, AsphericSurface, LensSystem, Material, Sensor};
use difflens::psf::GridSpec;
use difflens::raytrace::SensorHit;

/// Random but valid prescription: 1..=4 elements, aspheric terms, conics,
/// library and custom materials, stop at a random position.
pub fn random_lens(seed: u64) -> LensSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let elements = rng.gen_range(1..=4);
    let mut z = rng.gen_range(0.1..1.0);
    let mut surfaces = Vec::new();
    for e in 0..elements {
        let glass = match rng.gen_range(0..3) {
            0 => Material::pmma(),
            1 => Material::polycarbonate(),
            _ => Material::new(format!("custom{e}"), rng.gen_range(1.4..1.9), rng.gen_range(0.0..0.02)).unwrap(),
        };
        for material in [glass, Material::air()] {
            let semi = rng.gen_range(0.5..3.0);
            let conic = rng.gen_range(-2.0..2.0);
            let c_max = 0.9 / (semi * (1.0f64 + conic).max(0.05).sqrt());
            let mut s = AsphericSurface::spherical(rng.gen_range(-c_max..c_max), z, semi, material);
            s.conic = conic;
            s.alpha = [rng.gen_range(-1e-2..1e-2), rng.gen_range(-1e-3..1e-3), rng.gen_range(-1e-4..1e-4), rng.gen_range(-1e-5..1e-5)];
            surfaces.push(s);
            z += rng.gen_range(0.05..1.5);
        }
    }
    let index = rng.gen_range(0..=surfaces.len());
    let stop_z = if index == 0 {
        surfaces[0].vertex_z - rng.gen_range(0.05..0.5)
    } else if index == surfaces.len() {
        surfaces[index - 1].vertex_z + rng.gen_range(0.05..0.5)
    } else {
        let (a, b) = (surfaces[index - 1].vertex_z, surfaces[index].vertex_z);
        if b - a < 0.1 {
            for s in &mut surfaces[index..] {
                s.vertex_z += 0.1;
            }
        }
        let b = surfaces[index].vertex_z;
        rng.gen_range(a + 0.05..=b - 0.05)
    };
    let last = surfaces.last().unwrap().vertex_z.max(stop_z);
    let sensor = Sensor { z: last + rng.gen_range(0.5..5.0), ..Sensor::standard(0.0) };
    let stop = ApertureStop { index, vertex_z: stop_z, radius: rng.gen_range(0.2..1.5) };
    LensSystem::new(format!("random-{seed}"), surfaces, stop, sensor).expect("random lens is valid")
}

/// σ(x) = max(0, 1 − x), written out independently of the library.
pub fn tri(x: f64) -> f64 {
    (1.0 - x).max(0.0)
}

/// PSF(o_p) = Σ_i σ(|Δx|/L)·σ(|Δy|/L) evaluated pixel by pixel.
pub fn literal_splat(hits: &[SensorHit<f64>], spec: &GridSpec) -> Vec<f64> {
    let n = spec.size;
    let h = (n / 2) as f64;
    let mut out = vec![0.0; n * n];
    for row in 0..n {
        for col in 0..n {
            let px = spec.center[0] + (col as f64 - h) * spec.pitch;
            let py = spec.center[1] + (row as f64 - h) * spec.pitch;
            let mut acc = 0.0;
            for hit in hits.iter().filter(|h| h.valid) {
                acc += tri((px - hit.x).abs() / spec.pitch) * tri((py - hit.y).abs() / spec.pitch);
            }
            out[row * n + col] = acc;
        }
    }
    out
}

pub fn random_hits(rng: &mut ChaCha8Rng, spec: &GridSpec, count: usize) -> Vec<SensorHit<f64>> {
    let reach = spec.pitch * (spec.size as f64 / 2.0 + 1.5);
    (0..count)
        .map(|_| SensorHit {
            x: spec.center[0] + rng.gen_range(-reach..reach),
            y: spec.center[1] + rng.gen_range(-reach..reach),
            valid: rng.gen_bool(0.9),
        })
        .collect()
}

pub fn unit(x: f64, y: f64, z: f64) -> Vec3<f64> {
    Vec3::new(x, y, z).normalized()
}

pub fn cross(a: Vec3<f64>, b: Vec3<f64>) -> Vec3<f64> {
    Vec3::new(a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x)
}

/// Finite-difference step suited to a parameter of magnitude `v`.
pub fn fd_step(v: f64) -> f64 {
    1e-6 * v.abs().max(1e-2)
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
