//! Sequential ray tracing through a [`LensSystem`].
//!
//! Everything is generic over [`Scalar`]: on `f64` the tracer is a plain
//! numeric routine, on [`crate::autodiff::Var`] the sensor hits carry
//! gradients with respect to whichever surface parameters were lifted onto
//! the tape. Ray validity is a non-differentiable mask.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::optics::{Element, LensSystem, SurfaceParams};

pub const NEWTON_TOL_MM: f64 = 1e-9;
pub const NEWTON_MAX_ITERS: usize = 32;
pub const CHIEF_TOL_MM: f64 = 1e-6;
pub const CHIEF_MAX_ITERS: usize = 64;
/// Distance of the launch plane in front of the first vertex.
pub const LAUNCH_OFFSET_MM: f64 = 1.0;

#[derive(Debug, Clone, Copy)]
pub struct Ray<R> {
    pub origin: Vec3<R>,
    pub direction: Vec3<R>,
    /// µm
    pub wavelength: f64,
    pub valid: bool,
    pub energy: f64,
}

impl<R: Scalar> Ray<R> {
    pub fn new(origin: Vec3<R>, direction: Vec3<R>, wavelength: f64) -> Self {
        Ray { origin, direction, wavelength, valid: true, energy: 1.0 }
    }

    fn invalidated(mut self) -> Self {
        self.valid = false;
        self
    }
}

impl Ray<f64> {
    pub fn lift<R: Scalar>(&self) -> Ray<R> {
        Ray {
            origin: self.origin.lift(),
            direction: self.direction.lift(),
            wavelength: self.wavelength,
            valid: self.valid,
            energy: self.energy,
        }
    }
}

/// Collimated rays of one field angle and wavelength.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBundle {
    pub rays: Vec<Ray<f64>>,
    pub field_angle_deg: f64,
    pub wavelength: f64,
    pub seed: u64,
}

impl PartialEq for Ray<f64> {
    fn eq(&self, o: &Self) -> bool {
        self.origin == o.origin && self.direction == o.direction && self.wavelength == o.wavelength && self.valid == o.valid
    }
}

/// Direction of a collimated field bundle; the field lies along +y.
pub fn field_direction(field_angle_deg: f64) -> Vec3<f64> {
    let th = field_angle_deg.to_radians();
    Vec3::new(0.0, th.sin(), th.cos())
}

pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shirley–Chiu concentric map from [-1,1]² onto the unit disk.
fn concentric_disk(a: f64, b: f64) -> (f64, f64) {
    if a == 0.0 && b == 0.0 {
        return (0.0, 0.0);
    }
    let (r, phi) = if a.abs() > b.abs() {
        (a, std::f64::consts::FRAC_PI_4 * (b / a))
    } else {
        (b, std::f64::consts::FRAC_PI_2 - std::f64::consts::FRAC_PI_4 * (a / b))
    };
    (r * phi.cos(), r * phi.sin())
}

/// Stratified-jittered points on a disk of the given radius.
fn stratified_disk(count: usize, radius: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let m = (count as f64).sqrt().ceil() as usize;
    let mut strata: Vec<usize> = (0..m * m).collect();
    if strata.len() > count {
        strata.shuffle(rng);
        strata.truncate(count);
        strata.sort_unstable();
    }
    let shrink = radius * (1.0 - 1e-12);
    strata
        .into_iter()
        .map(|s| {
            let (i, j) = (s % m, s / m);
            let u = (i as f64 + rng.gen::<f64>()) / m as f64;
            let v = (j as f64 + rng.gen::<f64>()) / m as f64;
            let (x, y) = concentric_disk(2.0 * u - 1.0, 2.0 * v - 1.0);
            (x * shrink, y * shrink)
        })
        .collect()
}

/// Launches `count` collimated rays filling the entrance aperture.
///
/// The entrance aperture is the first aperture along the axis: the stop
/// when it leads the sequence, otherwise the first surface's clear radius.
/// A system without refracting surfaces acts as a pinhole: every ray
/// passes through the stop centre. The pupil pattern depends on `seed` and
/// the field angle only, so the three colour channels of one field share it.
pub fn sample_pupil_rays(system: &LensSystem, field_angle_deg: f64, wavelength: f64, count: usize, seed: u64) -> RayBundle {
    let dir = field_direction(field_angle_deg);
    let z_launch = system.front_z() - LAUNCH_OFFSET_MM;
    let points = match system.entrance_aperture() {
        Some((_, radius)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, field_angle_deg.to_bits()));
            stratified_disk(count.max(1), radius, &mut rng)
        }
        None => vec![(0.0, 0.0); count.max(1)],
    };
    let z_aperture = system.entrance_aperture().map_or(system.stop.vertex_z, |a| a.0);
    let back = (z_aperture - z_launch) / dir.z;
    let rays = points
        .into_iter()
        .map(|(x, y)| {
            let on_aperture = Vec3::new(x, y, z_aperture);
            Ray::new(on_aperture - dir.scale(back), dir, wavelength)
        })
        .collect();
    RayBundle { rays, field_angle_deg, wavelength, seed }
}

/// Newton solve of `o_z + t d_z − z_v − sag(x(t)² + y(t)²) = 0` in `f64`.
fn newton_distance(o: Vec3<f64>, d: Vec3<f64>, s: &SurfaceParams<f64>) -> Option<f64> {
    if d.z <= 0.0 {
        return None;
    }
    let mut t = (s.vertex_z - o.z) / d.z;
    for _ in 0..NEWTON_MAX_ITERS {
        let (px, py, pz) = (o.x + d.x * t, o.y + d.y * t, o.z + d.z * t);
        let r2 = px * px + py * py;
        let f = pz - s.vertex_z - s.sag(r2)?;
        if f.abs() < NEWTON_TOL_MM {
            return Some(t);
        }
        let fp = d.z - s.sag_slope(r2)? * 2.0 * (px * d.x + py * d.y);
        if fp == 0.0 || !fp.is_finite() {
            return None;
        }
        t -= f / fp;
        if !t.is_finite() {
            return None;
        }
    }
    None
}

/// Distance along the ray to the surface.
///
/// The root is found numerically; one final Newton update is evaluated in
/// `R`, which carries the implicit-function derivative `dt/dθ = −f_θ / f_t`.
pub fn surface_distance<R: Scalar>(ray: &Ray<R>, s: &SurfaceParams<R>) -> Option<R> {
    let (o, d) = (ray.origin, ray.direction);
    let sv = SurfaceParams {
        curvature: s.curvature.value(),
        conic: s.conic.value(),
        alpha: s.alpha.map(|a| a.value()),
        vertex_z: s.vertex_z.value(),
        semi_diameter: s.semi_diameter,
    };
    let (ov, dv) = (o.values(), d.values());
    let t0 = newton_distance(ov, dv, &sv)?;
    let p0 = o + d * R::constant(t0);
    let r2 = p0.x * p0.x + p0.y * p0.y;
    let f = p0.z - s.vertex_z - s.sag(r2)?;
    let r2v = r2.value();
    let fp = dv.z - sv.sag_slope(r2v)? * 2.0 * ((ov.x + dv.x * t0) * dv.x + (ov.y + dv.y * t0) * dv.y);
    if fp == 0.0 {
        return None;
    }
    let t = -(f * (1.0 / fp)) + t0;
    Some(t)
}

/// Moves the ray onto the surface; misses, t < 0 and hits outside the
/// clear aperture invalidate it.
pub fn intersect<R: Scalar>(ray: &Ray<R>, s: &SurfaceParams<R>) -> Ray<R> {
    if !ray.valid {
        return *ray;
    }
    let Some(t) = surface_distance(ray, s) else {
        return ray.invalidated();
    };
    if t.value() < 0.0 {
        return ray.invalidated();
    }
    let p = ray.origin + ray.direction * t;
    let (x, y) = (p.x.value(), p.y.value());
    if x * x + y * y > s.semi_diameter * s.semi_diameter {
        return ray.invalidated();
    }
    Ray { origin: p, ..*ray }
}

/// Vector Snell refraction; total internal reflection invalidates the ray.
///
/// `normal` may face either way; it is flipped to oppose the direction.
pub fn refract<R: Scalar>(ray: &Ray<R>, normal: Vec3<R>, n1: f64, n2: f64) -> Ray<R> {
    if !ray.valid {
        return *ray;
    }
    let d = ray.direction;
    let mut cos_i = -d.dot(normal);
    let mut n = normal;
    if cos_i.value() < 0.0 {
        cos_i = -cos_i;
        n = -n;
    }
    let eta = n1 / n2;
    let radicand = -((-(cos_i * cos_i) + 1.0) * (eta * eta)) + 1.0;
    if radicand.value() < 0.0 {
        return ray.invalidated();
    }
    let cos_t = radicand.sqrt();
    let direction = d.scale(eta) + n * (cos_i * eta - cos_t);
    Ray { direction, ..*ray }
}

fn intersect_plane<R: Scalar>(ray: &Ray<R>, z: f64) -> Option<Vec3<R>> {
    let dz = ray.direction.z.value();
    if dz <= 0.0 {
        return None;
    }
    let t = (-ray.origin.z + z) / ray.direction.z;
    if t.value() < 0.0 {
        return None;
    }
    Some(Vec3::new(ray.origin.x + ray.direction.x * t, ray.origin.y + ray.direction.y * t, R::constant(z)))
}

#[derive(Debug, Clone, Copy)]
pub struct SensorHit<R> {
    pub x: R,
    pub y: R,
    pub valid: bool,
}

impl<R: Scalar> SensorHit<R> {
    pub fn values(&self) -> SensorHit<f64> {
        SensorHit { x: self.x.value(), y: self.y.value(), valid: self.valid }
    }
}

/// Result of tracing one bundle.
#[derive(Debug, Clone)]
pub struct Trace<R> {
    pub hits: Vec<SensorHit<R>>,
    /// cos of the incidence angle for every surface event of rays that
    /// reached the sensor.
    pub incidence_cos: Vec<R>,
    pub field_angle_deg: f64,
    pub wavelength: f64,
}

impl<R: Scalar> Trace<R> {
    pub fn valid_count(&self) -> usize {
        self.hits.iter().filter(|h| h.valid).count()
    }

    pub fn hit_values(&self) -> Vec<SensorHit<f64>> {
        self.hits.iter().map(SensorHit::values).collect()
    }
}

/// Where a single-ray trace should stop.
#[derive(Clone, Copy, PartialEq)]
enum Until {
    Stop,
    LastSurface,
    Sensor,
}

struct RayOutcome<R> {
    ray: Ray<R>,
    hit: Option<Vec3<R>>,
}

fn trace_ray<R: Scalar>(
    system: &LensSystem,
    params: &[SurfaceParams<R>],
    indices: &[(f64, f64)],
    mut ray: Ray<R>,
    clip_stop: bool,
    until: Until,
    events: &mut Vec<R>,
) -> RayOutcome<R> {
    for (element, _) in system.sequence() {
        if !ray.valid {
            break;
        }
        match element {
            Element::Surface(i) => {
                let s = &params[i];
                ray = intersect(&ray, s);
                if !ray.valid {
                    break;
                }
                let Some(normal) = s.normal(ray.origin.x, ray.origin.y) else {
                    ray.valid = false;
                    break;
                };
                events.push(ray.direction.dot(normal).abs());
                let (n1, n2) = indices[i];
                ray = refract(&ray, normal, n1, n2);
                if until == Until::LastSurface && i + 1 == params.len() {
                    return RayOutcome { ray, hit: None };
                }
            }
            Element::Stop => {
                match intersect_plane(&ray, system.stop.vertex_z) {
                    Some(p) => {
                        let (x, y) = (p.x.value(), p.y.value());
                        if clip_stop && x * x + y * y > system.stop.radius * system.stop.radius {
                            ray.valid = false;
                        } else {
                            ray.origin = p;
                        }
                    }
                    None => ray.valid = false,
                }
                if until == Until::Stop {
                    return RayOutcome { hit: ray.valid.then_some(ray.origin), ray };
                }
            }
            Element::Sensor => {
                let hit = intersect_plane(&ray, system.sensor.z);
                if hit.is_none() {
                    ray.valid = false;
                }
                return RayOutcome { ray, hit };
            }
        }
    }
    RayOutcome { ray, hit: None }
}

/// Traces a bundle to the sensor plane.
///
/// `params` are the (possibly differentiable) surface parameters, usually
/// from [`LensSystem::params_f64`] or [`LensSystem::lift_on_tape`].
pub fn trace_to_sensor<R: Scalar>(system: &LensSystem, params: &[SurfaceParams<R>], bundle: &RayBundle) -> Result<Trace<R>> {
    let indices = system.indices_at(bundle.wavelength)?;
    let mut hits = Vec::with_capacity(bundle.rays.len());
    let mut incidence_cos = Vec::with_capacity(bundle.rays.len() * params.len());
    let mut events = Vec::with_capacity(params.len());
    for ray in &bundle.rays {
        events.clear();
        let out = trace_ray(system, params, &indices, ray.lift(), true, Until::Sensor, &mut events);
        match out.hit {
            Some(p) if out.ray.valid => {
                hits.push(SensorHit { x: p.x, y: p.y, valid: true });
                incidence_cos.extend_from_slice(&events);
            }
            _ => hits.push(SensorHit { x: R::constant(0.0), y: R::constant(0.0), valid: false }),
        }
    }
    Ok(Trace { hits, incidence_cos, field_angle_deg: bundle.field_angle_deg, wavelength: bundle.wavelength })
}

/// Sensor position of the ray that crosses the stop centre (detached).
pub fn chief_ray(system: &LensSystem, field_angle_deg: f64, wavelength: f64) -> Result<[f64; 2]> {
    if field_angle_deg == 0.0 {
        return Ok([0.0, 0.0]);
    }
    let fail = |reason: &str| Error::ChiefRay { field_deg: field_angle_deg, reason: reason.to_string() };
    let start = chief_ray_start(system, field_angle_deg, wavelength)?;
    let params = system.params_f64();
    let indices = system.indices_at(wavelength)?;
    let mut scratch = Vec::new();
    let out = trace_ray(system, &params, &indices, start, false, Until::Sensor, &mut scratch);
    match out.hit {
        Some(p) if out.ray.valid => Ok([p.x, p.y]),
        _ => Err(fail("chief ray vignetted before the sensor")),
    }
}

/// Launch ray, on the plane in front of the system, that crosses the stop
/// centre; found by a secant search on the launch height.
pub fn chief_ray_start(system: &LensSystem, field_angle_deg: f64, wavelength: f64) -> Result<Ray<f64>> {
    let fail = |reason: &str| Error::ChiefRay { field_deg: field_angle_deg, reason: reason.to_string() };
    let params = system.params_f64();
    let indices = system.indices_at(wavelength)?;
    let dir = field_direction(field_angle_deg);
    let z_launch = system.front_z() - LAUNCH_OFFSET_MM;
    let launch = |y0: f64| Ray::new(Vec3::new(0.0, y0, z_launch), dir, wavelength);
    let stop_height = |y0: f64| -> Option<f64> {
        let mut scratch = Vec::new();
        let out = trace_ray(system, &params, &indices, launch(y0), false, Until::Stop, &mut scratch);
        out.hit.map(|p| p.y)
    };

    let mut y_a = -dir.y / dir.z * (system.stop.vertex_z - z_launch);
    let mut g_a = stop_height(y_a).ok_or_else(|| fail("initial guess misses the stop plane"))?;
    let mut y_b = y_a + 1e-3;
    let mut g_b = stop_height(y_b).ok_or_else(|| fail("initial guess misses the stop plane"))?;
    let mut converged = g_a.abs() < CHIEF_TOL_MM;
    if converged {
        y_b = y_a;
    }
    let mut iters = 0;
    while !converged {
        if iters >= CHIEF_MAX_ITERS {
            return Err(fail("secant search did not converge"));
        }
        iters += 1;
        if g_b.abs() < CHIEF_TOL_MM {
            converged = true;
            continue;
        }
        let slope = (g_b - g_a) / (y_b - y_a);
        if slope == 0.0 || !slope.is_finite() {
            return Err(fail("flat secant"));
        }
        let y_next = y_b - g_b / slope;
        let g_next = stop_height(y_next).ok_or_else(|| fail("iterate misses the stop plane"))?;
        y_a = y_b;
        g_a = g_b;
        y_b = y_next;
        g_b = g_next;
    }
    Ok(launch(y_b))
}

/// Axial position that minimises the RMS spot of a bundle, computed in
/// closed form from the ray segments after the last surface.
pub fn best_focus_z(system: &LensSystem, bundle: &RayBundle) -> Result<Option<f64>> {
    let params = system.params_f64();
    let indices = system.indices_at(bundle.wavelength)?;
    // each valid ray lands at a + b·z in the transverse plane
    let mut ab = Vec::new();
    for ray in &bundle.rays {
        let mut scratch = Vec::new();
        let out = trace_ray(system, &params, &indices, *ray, true, Until::LastSurface, &mut scratch);
        if !out.ray.valid {
            continue;
        }
        let (o, d) = (out.ray.origin, out.ray.direction);
        let b = (d.x / d.z, d.y / d.z);
        ab.push(((o.x - b.0 * o.z, o.y - b.1 * o.z), b));
    }
    if ab.len() < 2 {
        return Ok(None);
    }
    let n = ab.len() as f64;
    let mean = |f: &dyn Fn(&((f64, f64), (f64, f64))) -> f64| ab.iter().map(f).sum::<f64>() / n;
    let (ax, ay) = (mean(&|r| r.0 .0), mean(&|r| r.0 .1));
    let (bx, by) = (mean(&|r| r.1 .0), mean(&|r| r.1 .1));
    let (mut num, mut den) = (0.0, 0.0);
    for ((a_x, a_y), (b_x, b_y)) in &ab {
        let (dax, day, dbx, dby) = (a_x - ax, a_y - ay, b_x - bx, b_y - by);
        num += dax * dbx + day * dby;
        den += dbx * dbx + dby * dby;
    }
    if den == 0.0 {
        return Ok(None);
    }
    Ok(Some(-num / den))
}

/// Meridional (y–z plane) rays at the given fractions of the entrance
/// aperture radius, for layouts.
pub fn meridional_rays(system: &LensSystem, field_angle_deg: f64, wavelength: f64, fractions: &[f64]) -> Vec<Ray<f64>> {
    let dir = field_direction(field_angle_deg);
    let z_launch = system.front_z() - LAUNCH_OFFSET_MM;
    let (z_aperture, radius) = system.entrance_aperture().unwrap_or((system.stop.vertex_z, 0.0));
    let back = (z_aperture - z_launch) / dir.z;
    fractions
        .iter()
        .map(|&f| Ray::new(Vec3::new(0.0, f * radius, z_aperture) - dir.scale(back), dir, wavelength))
        .collect()
}

/// Polyline of a single ray: launch point, every surface or stop crossing,
/// and the sensor hit. Ends early where the ray is lost.
pub fn trace_path(system: &LensSystem, ray: &Ray<f64>) -> Result<Vec<Vec3<f64>>> {
    let params = system.params_f64();
    let indices = system.indices_at(ray.wavelength)?;
    let mut ray = ray.clone();
    let mut path = vec![ray.origin];
    for (element, _) in system.sequence() {
        match element {
            Element::Surface(i) => {
                ray = intersect(&ray, &params[i]);
                if !ray.valid {
                    break;
                }
                path.push(ray.origin);
                let Some(normal) = params[i].normal(ray.origin.x, ray.origin.y) else { break };
                let (n1, n2) = indices[i];
                ray = refract(&ray, normal, n1, n2);
                if !ray.valid {
                    break;
                }
            }
            Element::Stop => match intersect_plane(&ray, system.stop.vertex_z) {
                Some(p) if p.x * p.x + p.y * p.y <= system.stop.radius * system.stop.radius => {
                    ray.origin = p;
                    path.push(p);
                }
                Some(p) => {
                    path.push(p);
                    break;
                }
                None => break,
            },
            Element::Sensor => {
                if let Some(p) = intersect_plane(&ray, system.sensor.z) {
                    path.push(p);
                }
            }
        }
    }
    Ok(path)
}
