//! Materials, even-asphere surfaces and the sequential lens prescription.
//!
//! Conventions: +z runs from object toward sensor, lengths are in mm and
//! wavelengths in µm.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Fraunhofer C line (red channel).
pub const WAVELENGTH_R: f64 = 0.6563;
/// Sodium D line (green channel, anchors the PSF grid).
pub const WAVELENGTH_G: f64 = 0.5893;
/// Fraunhofer F line (blue channel).
pub const WAVELENGTH_B: f64 = 0.4861;
pub const WAVELENGTHS_RGB: [f64; 3] = [WAVELENGTH_R, WAVELENGTH_G, WAVELENGTH_B];

/// Helium d line, the reference for catalogue `n_d` / `V_d` values.
pub const WAVELENGTH_D: f64 = 0.5876;

pub const BAND_UM: (f64, f64) = (0.4, 0.8);

pub const MIN_GAP_MM: f64 = 0.05;

/// Two-term Cauchy dispersion `n(λ) = A + B/λ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Material {
    name: String,
    cauchy_a: f64,
    cauchy_b: f64,
}

impl Material {
    pub fn air() -> Self {
        Material { name: "AIR".into(), cauchy_a: 1.0, cauchy_b: 0.0 }
    }

    /// PMMA-like plastic, n_d = 1.4918, V_d = 57.4.
    pub fn pmma() -> Self {
        Self::from_abbe("PMMA", 1.4918, 57.4).expect("valid catalogue entry")
    }

    /// Polycarbonate-like plastic, n_d = 1.5855, V_d = 29.9.
    pub fn polycarbonate() -> Self {
        Self::from_abbe("PC", 1.5855, 29.9).expect("valid catalogue entry")
    }

    /// Built-in materials addressable by name from lens files.
    pub fn library() -> Vec<Material> {
        vec![Self::air(), Self::pmma(), Self::polycarbonate()]
    }

    pub fn by_name(name: &str) -> Result<Material> {
        let lib = Self::library();
        lib.iter().find(|m| m.name == name).cloned().ok_or_else(|| Error::UnknownMaterial {
            name: name.to_string(),
            available: lib.iter().map(|m| m.name.clone()).collect(),
        })
    }

    /// Cauchy material. `B = 0` gives a non-dispersive medium.
    pub fn new(name: impl Into<String>, cauchy_a: f64, cauchy_b: f64) -> Result<Self> {
        let name = name.into();
        if !(cauchy_a.is_finite() && cauchy_b.is_finite()) || cauchy_b < 0.0 {
            return Err(Error::InvalidMaterial { name, reason: "Cauchy B must be finite and >= 0".into() });
        }
        // n is decreasing in λ, so the minimum over the band is at 0.8 µm
        let n_red_edge = cauchy_a + cauchy_b / (BAND_UM.1 * BAND_UM.1);
        if n_red_edge < 1.0 || (n_red_edge == 1.0 && name != "AIR") {
            return Err(Error::InvalidMaterial { name, reason: format!("index {n_red_edge} <= 1 inside band") });
        }
        Ok(Material { name, cauchy_a, cauchy_b })
    }

    /// Fits Cauchy constants to a catalogue index and Abbe number.
    ///
    /// `B` follows from `n_F − n_C = (n_d − 1)/V_d`, then `A` from `n_d`.
    pub fn from_abbe(name: impl Into<String>, n_d: f64, v_d: f64) -> Result<Self> {
        let inv2 = |l: f64| 1.0 / (l * l);
        let b = (n_d - 1.0) / v_d / (inv2(WAVELENGTH_B) - inv2(WAVELENGTH_R));
        let a = n_d - b * inv2(WAVELENGTH_D);
        Self::new(name, a, b)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn cauchy(&self) -> (f64, f64) {
        (self.cauchy_a, self.cauchy_b)
    }

    pub fn is_air(&self) -> bool {
        self.name == "AIR"
    }

    pub fn refractive_index(&self, wavelength_um: f64) -> Result<f64> {
        if !(BAND_UM.0..=BAND_UM.1).contains(&wavelength_um) {
            return Err(Error::WavelengthOutOfBand { wavelength_um });
        }
        if self.is_air() {
            return Ok(1.0);
        }
        Ok(self.cauchy_a + self.cauchy_b / (wavelength_um * wavelength_um))
    }
}

/// Rotationally symmetric even asphere.
#[derive(Debug, Clone, PartialEq)]
pub struct AsphericSurface {
    /// 1/mm
    pub curvature: f64,
    pub conic: f64,
    /// α₄, α₆, α₈, α₁₀
    pub alpha: [f64; 4],
    pub vertex_z: f64,
    /// Clear radius, mm.
    pub semi_diameter: f64,
    /// Medium between this surface and the next element.
    pub material_after: Material,
}

impl AsphericSurface {
    pub fn spherical(curvature: f64, vertex_z: f64, semi_diameter: f64, material_after: Material) -> Self {
        AsphericSurface { curvature, conic: 0.0, alpha: [0.0; 4], vertex_z, semi_diameter, material_after }
    }

    pub fn params<R: Scalar>(&self) -> SurfaceParams<R> {
        SurfaceParams {
            curvature: R::constant(self.curvature),
            conic: R::constant(self.conic),
            alpha: self.alpha.map(R::constant),
            vertex_z: R::constant(self.vertex_z),
            semi_diameter: self.semi_diameter,
        }
    }

    /// Sag at squared radius `r2`; `None` outside the conic's real domain.
    pub fn sag(&self, r2: f64) -> Option<f64> {
        self.params::<f64>().sag(r2)
    }

    pub fn normal(&self, x: f64, y: f64) -> Option<Vec3<f64>> {
        self.params::<f64>().normal(x, y)
    }
}

/// Differentiable view of one surface's shape parameters.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceParams<R> {
    pub curvature: R,
    pub conic: R,
    pub alpha: [R; 4],
    pub vertex_z: R,
    pub semi_diameter: f64,
}

impl<R: Scalar> SurfaceParams<R> {
    /// sqrt(1 − (1+k)c²r²), `None` when the radicand is negative.
    fn conic_root(&self, r2: R) -> Option<R> {
        let c = self.curvature;
        let radicand = R::constant(1.0) - (self.conic + 1.0) * c * c * r2;
        if radicand.value() < 0.0 {
            None
        } else {
            Some(radicand.sqrt())
        }
    }

    /// `z(r²) = c r² / (1 + √(1 − (1+k)c²r²)) + α₄r⁴ + α₆r⁶ + α₈r⁸ + α₁₀r¹⁰`
    pub fn sag(&self, r2: R) -> Option<R> {
        let root = self.conic_root(r2)?;
        let base = self.curvature * r2 / (root + 1.0);
        let [a4, a6, a8, a10] = self.alpha;
        // Horner in r²: r⁴(α₄ + r²(α₆ + r²(α₈ + r²α₁₀)))
        let poly = r2 * r2 * (a4 + r2 * (a6 + r2 * (a8 + r2 * a10)));
        Some(base + poly)
    }

    /// dz/d(r²) = c / (2√(1 − (1+k)c²r²)) + 2α₄r² + 3α₆r⁴ + 4α₈r⁶ + 5α₁₀r⁸
    pub fn sag_slope(&self, r2: R) -> Option<R> {
        let root = self.conic_root(r2)?;
        if root.value() == 0.0 {
            return None;
        }
        let [a4, a6, a8, a10] = self.alpha;
        let poly = r2 * (a4 * 2.0 + r2 * (a6 * 3.0 + r2 * (a8 * 4.0 + r2 * (a10 * 5.0))));
        Some(self.curvature / (root * 2.0) + poly)
    }

    /// Unit normal of `z − z_v − sag(x² + y²) = 0` with positive z component.
    pub fn normal(&self, x: R, y: R) -> Option<Vec3<R>> {
        let r2 = x * x + y * y;
        let slope = self.sag_slope(r2)?;
        let two_slope = slope * 2.0;
        Some(Vec3::new(-(x * two_slope), -(y * two_slope), R::constant(1.0)).normalized())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApertureStop {
    /// The stop sits immediately before `surfaces[index]`.
    pub index: usize,
    pub vertex_z: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sensor {
    pub z: f64,
    pub diagonal: f64,
    pub pixel_pitch: f64,
    /// (height, width) in pixels
    pub resolution: (usize, usize),
}

impl Sensor {
    /// 4 mm diagonal, 1080×1920; the pitch follows from the diagonal
    /// (≈ 1.82 µm, nominally quoted as 1.8 µm).
    pub fn standard(z: f64) -> Self {
        let resolution = (1080usize, 1920usize);
        let diagonal = 4.0;
        let pixels = ((resolution.0 * resolution.0 + resolution.1 * resolution.1) as f64).sqrt();
        Sensor { z, diagonal, pixel_pitch: diagonal / pixels, resolution }
    }

    pub fn half_diagonal(&self) -> f64 {
        self.diagonal / 2.0
    }

    fn validate(&self) -> Result<()> {
        if !(self.diagonal > 0.0 && self.pixel_pitch > 0.0 && self.z.is_finite()) {
            return Err(Error::Invariant("sensor diagonal, pitch must be > 0".into()));
        }
        let (h, w) = self.resolution;
        let implied = ((h as f64 * self.pixel_pitch).powi(2) + (w as f64 * self.pixel_pitch).powi(2)).sqrt();
        if ((implied / self.diagonal).powi(2) - 1.0).abs() > 1e-3 {
            return Err(Error::Invariant(format!(
                "sensor diagonal {} mm inconsistent with {}x{} pixels of {} mm",
                self.diagonal, h, w, self.pixel_pitch
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamKind {
    Curvature,
    Conic,
    Alpha4,
    Alpha6,
    Alpha8,
    Alpha10,
    Vertex,
}

impl ParamKind {
    pub const SHAPE_AND_POSITION: [ParamKind; 6] = [
        ParamKind::Curvature,
        ParamKind::Alpha4,
        ParamKind::Alpha6,
        ParamKind::Alpha8,
        ParamKind::Alpha10,
        ParamKind::Vertex,
    ];

    /// Polynomial order for α terms.
    pub fn alpha_order(self) -> Option<u32> {
        match self {
            ParamKind::Alpha4 => Some(4),
            ParamKind::Alpha6 => Some(6),
            ParamKind::Alpha8 => Some(8),
            ParamKind::Alpha10 => Some(10),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ParamKind::Curvature => "curvature",
            ParamKind::Conic => "conic",
            ParamKind::Alpha4 => "alpha4",
            ParamKind::Alpha6 => "alpha6",
            ParamKind::Alpha8 => "alpha8",
            ParamKind::Alpha10 => "alpha10",
            ParamKind::Vertex => "vertex_z",
        }
    }
}

/// Handle to one scalar of the prescription.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub surface: usize,
    pub kind: ParamKind,
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "surface[{}].{}", self.surface, self.kind.name())
    }
}

/// Ordered optical prescription: surfaces, one aperture stop, one sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LensSystem {
    pub name: String,
    pub surfaces: Vec<AsphericSurface>,
    pub stop: ApertureStop,
    pub sensor: Sensor,
}

/// One entry of the axial sequence, for ordering checks and layouts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Element {
    Surface(usize),
    Stop,
    Sensor,
}

impl LensSystem {
    pub fn new(name: impl Into<String>, surfaces: Vec<AsphericSurface>, stop: ApertureStop, sensor: Sensor) -> Result<Self> {
        let sys = LensSystem { name: name.into(), surfaces, stop, sensor };
        sys.validate()?;
        Ok(sys)
    }

    /// Stop and sensor only. Treated as an ideal pinhole by pupil sampling.
    pub fn empty(stop_radius: f64, sensor: Sensor) -> Result<Self> {
        Self::new("empty", Vec::new(), ApertureStop { index: 0, vertex_z: 0.0, radius: stop_radius }, sensor)
    }

    pub fn sequence(&self) -> Vec<(Element, f64)> {
        let mut seq = Vec::with_capacity(self.surfaces.len() + 2);
        for (i, s) in self.surfaces.iter().enumerate() {
            if i == self.stop.index {
                seq.push((Element::Stop, self.stop.vertex_z));
            }
            seq.push((Element::Surface(i), s.vertex_z));
        }
        if self.stop.index >= self.surfaces.len() {
            seq.push((Element::Stop, self.stop.vertex_z));
        }
        seq.push((Element::Sensor, self.sensor.z));
        seq
    }

    fn label(e: Element) -> String {
        match e {
            Element::Surface(i) => format!("surface[{i}]"),
            Element::Stop => "stop".into(),
            Element::Sensor => "sensor".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stop.index > self.surfaces.len() {
            return Err(Error::Invariant(format!(
                "stop index {} beyond {} surfaces",
                self.stop.index,
                self.surfaces.len()
            )));
        }
        if !(self.stop.radius > 0.0) {
            return Err(Error::Invariant("stop radius must be > 0".into()));
        }
        self.sensor.validate()?;
        for (i, s) in self.surfaces.iter().enumerate() {
            let values = [s.curvature, s.conic, s.vertex_z, s.semi_diameter, s.alpha[0], s.alpha[1], s.alpha[2], s.alpha[3]];
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invariant(format!("surface[{i}] has non-finite parameters")));
            }
            if !(s.semi_diameter > 0.0) {
                return Err(Error::Invariant(format!("surface[{i}] semi_diameter must be > 0")));
            }
            let reach = (1.0 + s.conic) * s.curvature * s.curvature * s.semi_diameter * s.semi_diameter;
            if reach >= 1.0 {
                return Err(Error::Invariant(format!(
                    "surface[{i}] sag is not real over its clear aperture ((1+k)c^2r^2 = {reach})"
                )));
            }
        }
        if let Some(last) = self.surfaces.last() {
            if !last.material_after.is_air() {
                return Err(Error::Invariant("medium after the last surface must be AIR".into()));
            }
        }
        let seq = self.sequence();
        for pair in seq.windows(2) {
            let ((a, za), (b, zb)) = (pair[0], pair[1]);
            if !(zb - za >= MIN_GAP_MM - 1e-12) {
                return Err(Error::Invariant(format!(
                    "vertex_z must increase by at least {MIN_GAP_MM} mm: {} at {za} then {} at {zb}",
                    Self::label(a),
                    Self::label(b)
                )));
            }
        }
        Ok(())
    }

    /// First aperture in sequence and its (z, radius); `None` when the
    /// system has no refracting surface.
    pub fn entrance_aperture(&self) -> Option<(f64, f64)> {
        if self.surfaces.is_empty() {
            return None;
        }
        if self.stop.index == 0 {
            Some((self.stop.vertex_z, self.stop.radius))
        } else {
            let s = &self.surfaces[0];
            Some((s.vertex_z, s.semi_diameter))
        }
    }

    /// First vertex along the axis (stop or surface).
    pub fn front_z(&self) -> f64 {
        self.sequence()[0].1
    }

    /// Refractive indices (before, after) of each surface.
    pub fn indices_at(&self, wavelength_um: f64) -> Result<Vec<(f64, f64)>> {
        let mut before = 1.0;
        let mut out = Vec::with_capacity(self.surfaces.len());
        for s in &self.surfaces {
            let after = s.material_after.refractive_index(wavelength_um)?;
            out.push((before, after));
            before = after;
        }
        if self.surfaces.is_empty() {
            Material::air().refractive_index(wavelength_um)?;
        }
        Ok(out)
    }

    pub fn param(&self, id: ParamId) -> f64 {
        let s = &self.surfaces[id.surface];
        match id.kind {
            ParamKind::Curvature => s.curvature,
            ParamKind::Conic => s.conic,
            ParamKind::Alpha4 => s.alpha[0],
            ParamKind::Alpha6 => s.alpha[1],
            ParamKind::Alpha8 => s.alpha[2],
            ParamKind::Alpha10 => s.alpha[3],
            ParamKind::Vertex => s.vertex_z,
        }
    }

    pub fn set_param(&mut self, id: ParamId, value: f64) {
        let s = &mut self.surfaces[id.surface];
        match id.kind {
            ParamKind::Curvature => s.curvature = value,
            ParamKind::Conic => s.conic = value,
            ParamKind::Alpha4 => s.alpha[0] = value,
            ParamKind::Alpha6 => s.alpha[1] = value,
            ParamKind::Alpha8 => s.alpha[2] = value,
            ParamKind::Alpha10 => s.alpha[3] = value,
            ParamKind::Vertex => s.vertex_z = value,
        }
    }

    /// Curvature, α₄..α₁₀ and vertex position of every surface; the conic
    /// is appended only on request.
    pub fn optimizable_params(&self, include_conic: bool) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for surface in 0..self.surfaces.len() {
            for kind in ParamKind::SHAPE_AND_POSITION {
                ids.push(ParamId { surface, kind });
            }
            if include_conic {
                ids.push(ParamId { surface, kind: ParamKind::Conic });
            }
        }
        ids
    }

    /// Lifts the prescription into any scalar type through `lift`.
    pub fn lift_with<R: Scalar>(&self, mut lift: impl FnMut(ParamId, f64) -> R) -> Vec<SurfaceParams<R>> {
        self.surfaces
            .iter()
            .enumerate()
            .map(|(surface, s)| {
                let mut get = |kind: ParamKind, v: f64| lift(ParamId { surface, kind }, v);
                SurfaceParams {
                    curvature: get(ParamKind::Curvature, s.curvature),
                    conic: get(ParamKind::Conic, s.conic),
                    alpha: [
                        get(ParamKind::Alpha4, s.alpha[0]),
                        get(ParamKind::Alpha6, s.alpha[1]),
                        get(ParamKind::Alpha8, s.alpha[2]),
                        get(ParamKind::Alpha10, s.alpha[3]),
                    ],
                    vertex_z: get(ParamKind::Vertex, s.vertex_z),
                    semi_diameter: s.semi_diameter,
                }
            })
            .collect()
    }

    pub fn params_f64(&self) -> Vec<SurfaceParams<f64>> {
        self.lift_with(|_, v| v)
    }

    /// Records the listed parameters as tape leaves (others stay constant).
    /// The returned vars are aligned with `ids`.
    pub fn lift_on_tape<'t>(&self, tape: &'t Tape, ids: &[ParamId]) -> (Vec<SurfaceParams<Var<'t>>>, Vec<Var<'t>>) {
        let mut leaves = vec![Var::constant(0.0); ids.len()];
        let params = self.lift_with(|id, v| match ids.iter().position(|&p| p == id) {
            Some(slot) => {
                let var = tape.var(v);
                leaves[slot] = var;
                var
            }
            None => Var::constant(v),
        });
        (params, leaves)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn air_is_exactly_one() {
        for wl in [0.4, 0.55, 0.8] {
            assert_eq!(Material::air().refractive_index(wl).unwrap(), 1.0);
        }
    }

    #[test]
    fn cauchy_fit_reproduces_catalogue_constants() {
        let (a, b) = Material::pmma().cauchy();
        assert!(close(a, 1.4789, 1e-4) && close(b, 0.004484, 1e-6), "{a} {b}");
        let (a, b) = Material::polycarbonate().cauchy();
        assert!(close(a, 1.5558, 1e-4) && close(b, 0.010248, 1e-5), "{a} {b}");
        let n = Material::pmma().refractive_index(0.5876).unwrap();
        assert!(close(n, 1.4918, 1e-3));
    }

    #[test]
    fn normal_dispersion_ordering() {
        for m in [Material::pmma(), Material::polycarbonate()] {
            let nf = m.refractive_index(WAVELENGTH_B).unwrap();
            let nd = m.refractive_index(WAVELENGTH_G).unwrap();
            let nc = m.refractive_index(WAVELENGTH_R).unwrap();
            assert!(nf > nd && nd > nc, "{}", m.name());
            let mut prev = f64::INFINITY;
            for i in 0..=40 {
                let n = m.refractive_index(0.4 + 0.01 * i as f64).unwrap();
                assert!(n > 1.0 && n < prev);
                prev = n;
            }
        }
    }

    #[test]
    fn wavelength_out_of_band() {
        assert!(matches!(Material::pmma().refractive_index(0.39), Err(Error::WavelengthOutOfBand { .. })));
        assert!(matches!(Material::air().refractive_index(0.81), Err(Error::WavelengthOutOfBand { .. })));
    }

    #[test]
    fn unknown_material_lists_library() {
        let err = Material::by_name("BK7").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("BK7") && msg.contains("PMMA") && msg.contains("PC") && msg.contains("AIR"));
    }

    #[test]
    fn sag_examples() {
        let flat = AsphericSurface::spherical(0.0, 0.0, 2.0, Material::air());
        assert_eq!(flat.sag(0.7).unwrap(), 0.0);
        let mut s = AsphericSurface::spherical(0.02, 0.0, 2.0, Material::air());
        assert!(close(s.sag(1.0).unwrap(), 0.0100010, 1e-7));
        s.alpha[0] = 1e-4;
        assert!(close(s.sag(1.0).unwrap(), 0.0101010, 1e-7));
        let steep = AsphericSurface::spherical(2.0, 0.0, 0.4, Material::air());
        assert!(steep.sag(0.3).is_none());
    }

    #[test]
    fn normal_examples() {
        let s = AsphericSurface::spherical(0.02, 0.0, 2.0, Material::air());
        let n = s.normal(0.0, 0.0).unwrap();
        assert_eq!((n.x, n.y, n.z), (0.0, 0.0, 1.0));
        let flat = AsphericSurface::spherical(0.0, 0.0, 2.0, Material::air());
        let n = flat.normal(0.3, -1.1).unwrap();
        assert_eq!((n.x.abs(), n.y.abs(), n.z), (0.0, 0.0, 1.0));
        let n = s.normal(1.0, 0.0).unwrap();
        // sphere: n = (−c·x, −c·y, √(1 − c²r²))
        assert!(close(n.x, -0.02, 1e-9) && n.y == 0.0 && close(n.z, 0.999800, 1e-6), "{n:?}");
    }

    #[test]
    fn normal_is_rotationally_symmetric() {
        let mut s = AsphericSurface::spherical(0.3, 0.0, 1.5, Material::air());
        s.alpha = [0.01, -0.002, 1e-4, -1e-5];
        s.conic = -0.5;
        let r = 0.9f64;
        let axial = s.normal(r, 0.0).unwrap();
        for k in 0..12 {
            let phi = k as f64 * 0.5;
            let n = s.normal(r * phi.cos(), r * phi.sin()).unwrap();
            assert!(close(n.x, axial.x * phi.cos(), 1e-14));
            assert!(close(n.y, axial.x * phi.sin(), 1e-14));
            assert!(close(n.z, axial.z, 1e-14));
        }
    }

    #[test]
    fn sag_parameter_gradients_match_finite_differences() {
        // x = [c, k, a4, a6, a8, a10]
        let base = [0.25, -0.3, 0.01, -0.003, 4e-4, -2e-5];
        fn f<'t>(x: &[Var<'t>]) -> Var<'t> {
            let r2 = 1.3;
            let p = SurfaceParams {
                curvature: x[0],
                conic: x[1],
                alpha: [x[2], x[3], x[4], x[5]],
                vertex_z: Var::constant(0.0),
                semi_diameter: 2.0,
            };
            p.sag(Var::constant(r2)).unwrap()
        }
        let check = gradient_check(f, &base, 1e-7);
        assert!(check.max_rel_error <= 1e-6, "{check:?}");
    }

    fn singlet() -> LensSystem {
        let sensor = Sensor::standard(5.0);
        LensSystem::new(
            "singlet",
            vec![
                AsphericSurface::spherical(0.2, 1.0, 1.5, Material::pmma()),
                AsphericSurface::spherical(-0.1, 2.0, 1.5, Material::air()),
            ],
            ApertureStop { index: 0, vertex_z: 0.0, radius: 0.5 },
            sensor,
        )
        .unwrap()
    }

    #[test]
    fn validation_catches_ordering_and_gaps() {
        let mut sys = singlet();
        sys.surfaces[1].vertex_z = 0.9;
        let msg = sys.validate().unwrap_err().to_string();
        assert!(msg.contains("surface[0]") && msg.contains("surface[1]"), "{msg}");
        let mut sys = singlet();
        sys.surfaces[1].vertex_z = 1.01;
        assert!(sys.validate().is_err());
        let mut sys = singlet();
        sys.surfaces[1].material_after = Material::pmma();
        assert!(sys.validate().is_err());
        let mut sys = singlet();
        sys.surfaces[0].curvature = 1.0;
        assert!(sys.validate().is_err());
    }

    #[test]
    fn standard_sensor_is_consistent() {
        let s = Sensor::standard(3.0);
        assert!(s.validate().is_ok());
        assert!(close(s.pixel_pitch, 0.0018, 2e-5));
        let mut bad = s.clone();
        bad.pixel_pitch = 0.0018;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn param_handles_round_trip() {
        let mut sys = singlet();
        let ids = sys.optimizable_params(false);
        assert_eq!(ids.len(), 12);
        for (i, id) in ids.iter().enumerate() {
            sys.set_param(*id, i as f64 * 0.001);
            assert_eq!(sys.param(*id), i as f64 * 0.001);
        }
        assert_eq!(sys.optimizable_params(true).len(), 14);
        assert_eq!(ParamId { surface: 1, kind: ParamKind::Alpha8 }.to_string(), "surface[1].alpha8");
    }

    #[test]
    fn sequence_places_stop_by_index() {
        let mut sys = singlet();
        assert_eq!(sys.sequence()[0].0, Element::Stop);
        sys.stop = ApertureStop { index: 1, vertex_z: 1.5, radius: 0.5 };
        sys.validate().unwrap();
        let kinds: Vec<Element> = sys.sequence().iter().map(|e| e.0).collect();
        assert_eq!(kinds, vec![Element::Surface(0), Element::Stop, Element::Surface(1), Element::Sensor]);
    }
}
