//! Differentiable PSFs by bilinear ray splatting, plus spot statistics.
//!
//! Every valid ray hit `oᵢ` deposits energy on the pixel grid as
//!
//! ```text
//! PSF(o_p) = Σᵢ uᵢ · σ(|(o_p − oᵢ)·ê_x| / L) · σ(|(o_p − oᵢ)·ê_y| / L),
//! σ(x) = 1 − x on [0, 1], 0 elsewhere,
//! ```
//!
//! with `uᵢ = 1`, so each ray lands on its four neighbouring pixel centres
//! with bilinear weights. Cells are row-major: row index follows +y, column
//! index follows +x, and the centre cell sits on the grid anchor.

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::optics::{LensSystem, SurfaceParams, WAVELENGTHS_RGB, WAVELENGTH_G};
use crate::raytrace::{chief_ray, sample_pupil_rays, trace_to_sensor, SensorHit, Trace};

pub const DEFAULT_KERNEL_SIZE: usize = 51;
pub const DEFAULT_PITCH_MM: f64 = 0.0018;

/// `σ(x) = 1 − x` on `[0, 1]`, else 0. The derivative is −1 on the open
/// interval and 0 at both kinks.
pub fn sigma<R: Scalar>(x: R) -> R {
    let v = x.value();
    if v > 0.0 && v < 1.0 {
        -x + 1.0
    } else if v == 0.0 {
        R::constant(1.0)
    } else {
        R::constant(0.0)
    }
}

/// Placement of a PSF grid on the sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Odd edge length in cells.
    pub size: usize,
    /// Cell pitch L, mm.
    pub pitch: f64,
    /// Sensor position of the centre cell (detached), mm.
    pub center: [f64; 2],
}

impl GridSpec {
    pub fn new(size: usize, pitch: f64, center: [f64; 2]) -> Result<Self> {
        if size % 2 == 0 || size == 0 {
            return Err(Error::Shape(format!("PSF size must be odd, got {size}")));
        }
        if !(pitch > 0.0) {
            return Err(Error::Shape(format!("PSF pitch must be > 0, got {pitch}")));
        }
        Ok(GridSpec { size, pitch, center })
    }

    /// Sensor coordinates of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        let h = (self.size / 2) as f64;
        [self.center[0] + (col as f64 - h) * self.pitch, self.center[1] + (row as f64 - h) * self.pitch]
    }
}

#[derive(Debug, Clone)]
pub struct PsfGrid<R> {
    pub spec: GridSpec,
    pub wavelength: f64,
    /// Valid traced rays, including those that fell outside the grid.
    pub valid_count: usize,
    /// Row-major `size × size`.
    pub cells: Vec<R>,
}

impl<R: Scalar> PsfGrid<R> {
    pub fn size(&self) -> usize {
        self.spec.size
    }

    pub fn cell(&self, row: usize, col: usize) -> R {
        self.cells[row * self.spec.size + col]
    }

    pub fn total(&self) -> f64 {
        self.cells.iter().map(|c| c.value()).sum()
    }

    pub fn values(&self) -> PsfGrid<f64> {
        PsfGrid {
            spec: self.spec,
            wavelength: self.wavelength,
            valid_count: self.valid_count,
            cells: self.cells.iter().map(|c| c.value()).collect(),
        }
    }

    /// Central `size × size` window; energy outside it is dropped.
    pub fn center_crop(&self, size: usize) -> Result<PsfGrid<R>> {
        if size % 2 == 0 || size > self.spec.size {
            return Err(Error::Shape(format!("cannot crop {} to {size}", self.spec.size)));
        }
        let off = (self.spec.size - size) / 2;
        let mut cells = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                cells.push(self.cell(r + off, c + off));
            }
        }
        Ok(PsfGrid { spec: GridSpec { size, ..self.spec }, wavelength: self.wavelength, valid_count: self.valid_count, cells })
    }
}

/// Bilinear splatting of valid hits onto the grid; out-of-grid energy is
/// lost but the ray still counts toward `valid_count`.
pub fn splat_psf<R: Scalar>(hits: &[SensorHit<R>], spec: GridSpec, wavelength: f64) -> PsfGrid<R> {
    let n = spec.size;
    let half = (n / 2) as f64;
    let inv_pitch = 1.0 / spec.pitch;
    let mut cells = vec![R::constant(0.0); n * n];
    let mut valid_count = 0;
    // (cell index, continuous coordinate) → neighbour weights (w_lo, w_hi)
    let weights = |u: R| -> (i64, R, R) {
        let lo = u.value().floor();
        let frac = u - lo;
        if frac.value() == 0.0 {
            (lo as i64, R::constant(1.0), R::constant(0.0))
        } else {
            (lo as i64, -frac + 1.0, frac)
        }
    };
    for hit in hits.iter().filter(|h| h.valid) {
        valid_count += 1;
        let u = (hit.x - spec.center[0]) * inv_pitch + half;
        let v = (hit.y - spec.center[1]) * inv_pitch + half;
        let (u_lo, v_lo) = (u.value().floor(), v.value().floor());
        if u_lo < -1.0 || v_lo < -1.0 || u_lo > n as f64 || v_lo > n as f64 {
            continue;
        }
        let (col, wx0, wx1) = weights(u);
        let (row, wy0, wy1) = weights(v);
        for (dr, wy) in [(0, wy0), (1, wy1)] {
            let r = row + dr;
            if r < 0 || r >= n as i64 || wy.value() == 0.0 {
                continue;
            }
            for (dc, wx) in [(0, wx0), (1, wx1)] {
                let c = col + dc;
                if c < 0 || c >= n as i64 || wx.value() == 0.0 {
                    continue;
                }
                let idx = r as usize * n + c as usize;
                cells[idx] = cells[idx] + wx * wy;
            }
        }
    }
    PsfGrid { spec, wavelength, valid_count, cells }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Divide by the number of valid traced rays; vignetting and energy
    /// escaping the window lower the total below 1.
    ValidCount,
    /// Divide by the in-grid sum (display).
    SumToOne,
}

pub fn normalize_psf<R: Scalar>(grid: PsfGrid<R>, mode: Normalization) -> Result<PsfGrid<R>> {
    if grid.valid_count == 0 {
        return Err(Error::DegeneratePsf { field_deg: f64::NAN, wavelength_um: grid.wavelength });
    }
    let denom = match mode {
        Normalization::ValidCount => grid.valid_count as f64,
        Normalization::SumToOne => {
            let total = grid.total();
            if total <= 0.0 {
                return Err(Error::DegeneratePsf { field_deg: f64::NAN, wavelength_um: grid.wavelength });
            }
            total
        }
    };
    let inv = 1.0 / denom;
    let cells = grid.cells.into_iter().map(|c| if c.value() == 0.0 { c } else { c * inv }).collect();
    Ok(PsfGrid { cells, ..grid })
}

/// Sampling and grid layout for per-field PSFs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsfConfig {
    pub kernel_size: usize,
    pub pitch: f64,
    pub rays: usize,
    pub seed: u64,
}

impl Default for PsfConfig {
    fn default() -> Self {
        PsfConfig { kernel_size: DEFAULT_KERNEL_SIZE, pitch: DEFAULT_PITCH_MM, rays: 4096, seed: 0 }
    }
}

/// R, G, B PSFs of one field, plus the traces they were splatted from.
#[derive(Debug, Clone)]
pub struct RgbPsf<R> {
    pub field_angle_deg: f64,
    pub anchor: [f64; 2],
    pub channels: [PsfGrid<R>; 3],
    pub traces: [Trace<R>; 3],
}

/// PSF anchor: the chief-ray hit at the green wavelength, or the centroid
/// of the green hits if the chief ray cannot be traced.
pub fn psf_anchor(system: &LensSystem, field_angle_deg: f64, green: &Trace<f64>) -> Result<[f64; 2]> {
    match chief_ray(system, field_angle_deg, WAVELENGTH_G) {
        Ok(hit) => Ok(hit),
        Err(chief_err) => {
            let valid: Vec<_> = green.hits.iter().filter(|h| h.valid).collect();
            if valid.is_empty() {
                return Err(chief_err);
            }
            let n = valid.len() as f64;
            Ok([valid.iter().map(|h| h.x).sum::<f64>() / n, valid.iter().map(|h| h.y).sum::<f64>() / n])
        }
    }
}

/// Traces and splats the three design wavelengths for one field.
pub fn psf_rgb<R: Scalar>(
    system: &LensSystem,
    params: &[SurfaceParams<R>],
    field_angle_deg: f64,
    config: &PsfConfig,
) -> Result<RgbPsf<R>> {
    let traces = WAVELENGTHS_RGB.map(|wl| {
        let bundle = sample_pupil_rays(system, field_angle_deg, wl, config.rays, config.seed);
        trace_to_sensor(system, params, &bundle)
    });
    let [r, g, b] = traces;
    let traces = [r?, g?, b?];
    let green = Trace {
        hits: traces[1].hit_values(),
        incidence_cos: Vec::new(),
        field_angle_deg,
        wavelength: WAVELENGTH_G,
    };
    let anchor = psf_anchor(system, field_angle_deg, &green)?;
    let spec = GridSpec::new(config.kernel_size, config.pitch, anchor)?;
    let mut grids = Vec::with_capacity(3);
    for t in &traces {
        if t.valid_count() == 0 {
            return Err(Error::DegeneratePsf { field_deg: field_angle_deg, wavelength_um: t.wavelength });
        }
        grids.push(normalize_psf(splat_psf(&t.hits, spec, t.wavelength), Normalization::ValidCount)?);
    }
    let channels: [PsfGrid<R>; 3] = grids.try_into().expect("three channels");
    Ok(RgbPsf { field_angle_deg, anchor, channels, traces })
}

/// RMS radius about the (differentiable) centroid of the valid hits.
pub fn rms_radius<R: Scalar>(hits: &[SensorHit<R>]) -> Result<R> {
    let valid: Vec<&SensorHit<R>> = hits.iter().filter(|h| h.valid).collect();
    if valid.len() < 2 {
        return Err(Error::TooFewHits(valid.len()));
    }
    let w = 1.0 / valid.len() as f64;
    let cx = R::weighted_sum(&valid.iter().map(|h| (h.x, w)).collect::<Vec<_>>());
    let cy = R::weighted_sum(&valid.iter().map(|h| (h.y, w)).collect::<Vec<_>>());
    let sq: Vec<(R, f64)> = valid
        .iter()
        .map(|h| {
            let (dx, dy) = (h.x - cx, h.y - cy);
            (dx * dx + dy * dy, w)
        })
        .collect();
    Ok(R::weighted_sum(&sq).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpotStats {
    pub centroid: [f64; 2],
    pub rms_radius: f64,
    pub median_radius: f64,
    /// Radius enclosing 80% of valid hits.
    pub r80: f64,
    pub valid: usize,
}

impl SpotStats {
    /// median / rms; small values flag a compact core with a long tail.
    pub fn tail_ratio(&self) -> f64 {
        if self.rms_radius == 0.0 {
            1.0
        } else {
            self.median_radius / self.rms_radius
        }
    }
}

pub fn spot_stats(hits: &[SensorHit<f64>]) -> Result<SpotStats> {
    let valid: Vec<&SensorHit<f64>> = hits.iter().filter(|h| h.valid).collect();
    let n = valid.len();
    if n < 2 {
        return Err(Error::TooFewHits(n));
    }
    let rms = rms_radius(hits)?;
    let nf = n as f64;
    let centroid = [valid.iter().map(|h| h.x).sum::<f64>() / nf, valid.iter().map(|h| h.y).sum::<f64>() / nf];
    let mut radii: Vec<f64> = valid.iter().map(|h| (h.x - centroid[0]).hypot(h.y - centroid[1])).collect();
    radii.sort_by(|a, b| a.total_cmp(b));
    let median = if n % 2 == 1 { radii[n / 2] } else { 0.5 * (radii[n / 2 - 1] + radii[n / 2]) };
    let k80 = ((0.8 * nf).ceil() as usize).clamp(1, n) - 1;
    Ok(SpotStats { centroid, rms_radius: rms, median_radius: median, r80: radii[k80], valid: n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Var};

    fn hit(x: f64, y: f64) -> SensorHit<f64> {
        SensorHit { x, y, valid: true }
    }

    fn spec(size: usize) -> GridSpec {
        GridSpec::new(size, 0.002, [0.1, -0.2]).unwrap()
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(sigma(0.0), 1.0);
        assert!((sigma(0.3) - 0.7).abs() < 1e-15);
        assert_eq!(sigma(1.2), 0.0);
        let tape = Tape::new();
        let x = tape.var(0.3);
        let y = sigma(x);
        assert_eq!(tape.backward(y).unwrap().wrt(x), -1.0);
        for kink in [0.0, 1.0] {
            let tape = Tape::new();
            let x = tape.var(kink);
            assert_eq!(tape.backward(sigma(x) + x * 0.0).unwrap().wrt(x), 0.0);
        }
    }

    #[test]
    fn ray_on_center_fills_one_cell() {
        let s = spec(5);
        let [x, y] = s.cell_center(1, 3);
        let g = splat_psf(&[hit(x, y)], s, 0.55);
        assert!((g.cell(1, 3) - 1.0).abs() < 1e-12);
        assert!((g.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ray_on_corner_splits_evenly() {
        let s = GridSpec::new(5, 0.5, [0.0, 0.0]).unwrap();
        let g = splat_psf(&[hit(0.25, 0.25)], s, 0.55);
        for (r, c) in [(2, 2), (2, 3), (3, 2), (3, 3)] {
            assert_eq!(g.cell(r, c), 0.25);
        }
        assert_eq!(g.total(), 1.0);
    }

    #[test]
    fn offset_ray_bilinear_weights() {
        let s = spec(5);
        let [x, y] = s.cell_center(2, 2);
        let g = splat_psf(&[hit(x + 0.2 * s.pitch, y + 0.3 * s.pitch)], s, 0.55);
        let expect = [((2, 2), 0.56), ((2, 3), 0.14), ((3, 2), 0.24), ((3, 3), 0.06)];
        for ((r, c), w) in expect {
            assert!((g.cell(r, c) - w).abs() < 1e-12, "({r},{c}) {}", g.cell(r, c));
        }
        assert!((g.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_energy_accounting() {
        let s = spec(51);
        let inside: Vec<_> = (0..256).map(|i| hit(0.1 + (i % 7) as f64 * 1e-4, -0.2)).collect();
        let g = normalize_psf(splat_psf(&inside, s, 0.55), Normalization::ValidCount).unwrap();
        assert!((g.total() - 1.0).abs() < 1e-9);

        let mut mixed = inside[..192].to_vec();
        mixed.extend((0..64).map(|_| hit(5.0, 5.0)));
        let g = normalize_psf(splat_psf(&mixed, s, 0.55), Normalization::ValidCount).unwrap();
        assert!((g.total() - 0.75).abs() < 1e-9);
        let d = normalize_psf(splat_psf(&mixed, s, 0.55), Normalization::SumToOne).unwrap();
        assert!((d.total() - 1.0).abs() < 1e-9);

        let none = [SensorHit { x: 0.0, y: 0.0, valid: false }];
        assert!(matches!(normalize_psf(splat_psf(&none, s, 0.55), Normalization::ValidCount), Err(Error::DegeneratePsf { .. })));
    }

    #[test]
    fn invalid_rays_contribute_nothing() {
        let s = spec(7);
        let [x, y] = s.cell_center(3, 3);
        let g = splat_psf(&[hit(x, y), SensorHit { x, y, valid: false }], s, 0.55);
        assert_eq!(g.valid_count, 1);
        assert_eq!(g.total(), 1.0);
    }

    #[test]
    fn splat_gradient_matches_finite_difference() {
        let s = spec(7);
        let [x0, y0] = s.cell_center(3, 3);
        let (x0, y0) = (x0 + 0.37 * s.pitch, y0 - 0.21 * s.pitch);
        let cells = [(3, 3), (3, 4), (2, 3), (2, 4)];
        for (r, c) in cells {
            let tape = Tape::new();
            let (x, y) = (tape.var(x0), tape.var(y0));
            let g = splat_psf(&[SensorHit { x, y, valid: true }], s, 0.55);
            let grads = tape.backward(g.cell(r, c)).unwrap();
            let h = 1e-9;
            let f = |dx: f64, dy: f64| splat_psf(&[hit(x0 + dx, y0 + dy)], s, 0.55).cell(r, c);
            let fdx = (f(h, 0.0) - f(-h, 0.0)) / (2.0 * h);
            let fdy = (f(0.0, h) - f(0.0, -h)) / (2.0 * h);
            assert!((grads.wrt(x) - fdx).abs() <= 1e-6 * fdx.abs().max(1e-12), "{} {}", grads.wrt(x), fdx);
            assert!((grads.wrt(y) - fdy).abs() <= 1e-6 * fdy.abs().max(1e-12));
        }
    }

    #[test]
    fn crop_keeps_center() {
        let s = spec(7);
        let [x, y] = s.cell_center(3, 3);
        let g = splat_psf(&[hit(x, y)], s, 0.55);
        let c = g.center_crop(3).unwrap();
        assert_eq!(c.size(), 3);
        assert!((c.cell(1, 1) - 1.0).abs() < 1e-12);
        assert!(g.center_crop(4).is_err());
    }

    #[test]
    fn spot_examples() {
        let hits = [hit(0.0, 0.0), hit(1.0, 0.0), hit(-1.0, 0.0), hit(0.0, 1.0), hit(0.0, -1.0)];
        let s = spot_stats(&hits).unwrap();
        assert_eq!(s.centroid, [0.0, 0.0]);
        assert!((s.rms_radius - 0.8f64.sqrt()).abs() < 1e-12);
        assert!(s.median_radius <= s.r80);

        let same = [hit(0.3, 0.3); 10];
        let s = spot_stats(&same).unwrap();
        assert!(s.rms_radius < 1e-15 && s.median_radius < 1e-15 && s.r80 < 1e-15);

        let mut tail: Vec<_> = (0..99)
            .map(|i| {
                let phi = i as f64 / 99.0 * std::f64::consts::TAU;
                hit(0.001 * phi.cos(), 0.001 * phi.sin())
            })
            .collect();
        tail.push(hit(1.0, 0.0));
        let s = spot_stats(&tail).unwrap();
        assert!(s.tail_ratio() < 0.15, "{s:?}");

        assert!(matches!(spot_stats(&[hit(0.0, 0.0)]), Err(Error::TooFewHits(1))));
    }

    #[test]
    fn rms_gradient_at_coincident_hits_is_finite() {
        let tape = Tape::new();
        let hits: Vec<SensorHit<Var<'_>>> = (0..3).map(|_| SensorHit { x: tape.var(0.5), y: tape.var(0.5), valid: true }).collect();
        let rms = rms_radius(&hits).unwrap();
        let g = tape.backward(rms).unwrap();
        assert!(hits.iter().all(|h| g.wrt(h.x).is_finite()));
    }
}
