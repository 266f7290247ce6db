//! Lens prescription files, PSF/spot/layout exporters, and analysis
//! reports.
//!
//! Lens files are JSON (`"version": "difflens-lens/1"`). Numbers are
//! written in shortest round-trip form, so load→save reproduces every
//! value bit for bit. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{convolve_patch, psnr, to_rgb8, ImagePatch, Kernel};
use crate::optics::{ApertureStop, AsphericSurface, LensSystem, Material, Sensor, WAVELENGTHS_RGB, WAVELENGTH_G};
use crate::psf::{psf_rgb, spot_stats, PsfConfig, PsfGrid};
use crate::raytrace::{chief_ray_start, meridional_rays, sample_pupil_rays, trace_path, trace_to_sensor, Ray, Trace};

pub const LENS_FORMAT_VERSION: &str = "difflens-lens/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaterialSpec {
    /// Library material (`AIR`, `PMMA`, `PC`).
    Named(String),
    /// Two-term Cauchy model `n(λ) = a + b/λ²`, λ in µm.
    Cauchy { name: String, cauchy_a: f64, cauchy_b: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceRecord {
    pub curvature: f64,
    pub conic: f64,
    /// α₄, α₆, α₈, α₁₀
    pub alpha: [f64; 4],
    pub vertex_z: f64,
    pub semi_diameter: f64,
    pub material: MaterialSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopRecord {
    /// Number of surfaces in front of the stop.
    pub index: usize,
    pub vertex_z: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorRecord {
    pub z: f64,
    pub diagonal: f64,
    pub pixel_pitch: f64,
    /// (rows, columns)
    pub resolution: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LensFile {
    pub version: String,
    pub name: String,
    pub surfaces: Vec<SurfaceRecord>,
    pub stop: StopRecord,
    pub sensor: SensorRecord,
}

fn material_spec(m: &Material) -> MaterialSpec {
    match Material::by_name(m.name()) {
        Ok(lib) if lib == *m => MaterialSpec::Named(m.name().to_string()),
        _ => {
            let (a, b) = m.cauchy();
            MaterialSpec::Cauchy { name: m.name().to_string(), cauchy_a: a, cauchy_b: b }
        }
    }
}

impl LensFile {
    pub fn from_system(system: &LensSystem) -> Self {
        LensFile {
            version: LENS_FORMAT_VERSION.into(),
            name: system.name.clone(),
            surfaces: system
                .surfaces
                .iter()
                .map(|s| SurfaceRecord {
                    curvature: s.curvature,
                    conic: s.conic,
                    alpha: s.alpha,
                    vertex_z: s.vertex_z,
                    semi_diameter: s.semi_diameter,
                    material: material_spec(&s.material_after),
                })
                .collect(),
            stop: StopRecord { index: system.stop.index, vertex_z: system.stop.vertex_z, radius: system.stop.radius },
            sensor: SensorRecord {
                z: system.sensor.z,
                diagonal: system.sensor.diagonal,
                pixel_pitch: system.sensor.pixel_pitch,
                resolution: [system.sensor.resolution.0, system.sensor.resolution.1],
            },
        }
    }

    /// Builds and validates the system.
    pub fn to_system(&self) -> Result<LensSystem> {
        if self.version != LENS_FORMAT_VERSION {
            return Err(Error::Parse { path: String::new(), msg: format!("unsupported version {:?}, expected {LENS_FORMAT_VERSION:?}", self.version) });
        }
        let mut surfaces = Vec::with_capacity(self.surfaces.len());
        for s in &self.surfaces {
            let material = match &s.material {
                MaterialSpec::Named(name) => Material::by_name(name)?,
                MaterialSpec::Cauchy { name, cauchy_a, cauchy_b } => Material::new(name.clone(), *cauchy_a, *cauchy_b)?,
            };
            surfaces.push(AsphericSurface {
                curvature: s.curvature,
                conic: s.conic,
                alpha: s.alpha,
                vertex_z: s.vertex_z,
                semi_diameter: s.semi_diameter,
                material_after: material,
            });
        }
        let stop = ApertureStop { index: self.stop.index, vertex_z: self.stop.vertex_z, radius: self.stop.radius };
        let sensor = Sensor {
            z: self.sensor.z,
            diagonal: self.sensor.diagonal,
            pixel_pitch: self.sensor.pixel_pitch,
            resolution: (self.sensor.resolution[0], self.sensor.resolution[1]),
        };
        LensSystem::new(self.name.clone(), surfaces, stop, sensor)
    }
}

pub fn lens_to_string(system: &LensSystem) -> String {
    let mut s = serde_json::to_string_pretty(&LensFile::from_system(system)).expect("lens file serialises");
    s.push('\n');
    s
}

pub fn lens_from_str(text: &str, origin: &str) -> Result<LensSystem> {
    let file: LensFile = serde_json::from_str(text).map_err(|e| Error::Parse { path: origin.into(), msg: e.to_string() })?;
    file.to_system().map_err(|e| match e {
        Error::Parse { msg, .. } => Error::Parse { path: origin.into(), msg },
        other => other,
    })
}

pub fn save_lens(system: &LensSystem, path: &Path) -> Result<()> {
    std::fs::write(path, lens_to_string(system)).map_err(|e| Error::io(path, e))
}

pub fn load_lens(path: &Path) -> Result<LensSystem> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    lens_from_str(&text, &path.display().to_string())
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, e.into())
}

/// Sibling path with the extension replaced (`psf.ppm` → `psf.csv`).
pub fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

/// Display image of an RGB PSF: each channel scaled to its own maximum,
/// then gamma 1/2.2.
pub fn psf_display(grids: &[PsfGrid<f64>; 3]) -> ImagePatch {
    let n = grids[0].size();
    let mut img = ImagePatch::zeros(n, n);
    for (c, g) in grids.iter().enumerate() {
        let max = g.cells.iter().cloned().fold(0.0, f64::max);
        for r in 0..n {
            for col in 0..n {
                let v = if max > 0.0 { (g.cell(r, col) / max).powf(1.0 / 2.2) } else { 0.0 };
                let i = img.idx(c, r, col);
                img.pixels[i] = v;
            }
        }
    }
    img
}

/// Writes the display PPM to `path` and the raw cell values to the
/// sibling `.csv` (`row,col,x_mm,y_mm,r,g,b`).
pub fn export_psf(grids: &[PsfGrid<f64>; 3], path: &Path) -> Result<()> {
    crate::imaging::write_ppm(&psf_display(grids), path)?;
    let csv_path = sibling(path, "csv");
    let err = csv_err(&csv_path);
    let mut w = csv::Writer::from_path(&csv_path).map_err(&err)?;
    w.write_record(["row", "col", "x_mm", "y_mm", "r", "g", "b"]).map_err(&err)?;
    let spec = grids[0].spec;
    for r in 0..spec.size {
        for c in 0..spec.size {
            let [x, y] = spec.cell_center(r, c);
            let mut rec = vec![r.to_string(), c.to_string(), x.to_string(), y.to_string()];
            rec.extend(grids.iter().map(|g| g.cell(r, c).to_string()));
            w.write_record(&rec).map_err(&err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))
}

/// One row per traced ray: `x_mm,y_mm,wavelength_um,valid`.
pub fn export_spot(traces: &[Trace<f64>], path: &Path) -> Result<()> {
    let err = csv_err(path);
    let mut w = csv::Writer::from_path(path).map_err(&err)?;
    w.write_record(["x_mm", "y_mm", "wavelength_um", "valid"]).map_err(&err)?;
    for t in traces {
        for h in &t.hits {
            w.write_record([h.x.to_string(), h.y.to_string(), t.wavelength.to_string(), (h.valid as u8).to_string()]).map_err(&err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pupil fractions of the layout rays besides the chief ray.
const LAYOUT_FRACTIONS: [f64; 7] = [-0.98, -0.66, -0.33, 0.0, 0.33, 0.66, 0.98];

/// Meridional cross-section (z to the right, y up) as SVG 1.1.
pub fn layout_svg(system: &LensSystem, max_field_deg: f64) -> Result<String> {
    let z0 = system.front_z() - 0.5;
    let z1 = system.sensor.z + 0.2;
    let ymax = system
        .surfaces
        .iter()
        .map(|s| s.semi_diameter)
        .chain([system.stop.radius * 1.6, system.sensor.half_diagonal()])
        .fold(0.0, f64::max)
        + 0.2;
    let scale = 200.0;
    let (width, height) = ((z1 - z0) * scale, 2.0 * ymax * scale);
    let px = |z: f64, y: f64| ((z - z0) * scale, (ymax - y) * scale);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.1}" height="{height:.1}" viewBox="0 0 {width:.1} {height:.1}">"#
    );
    let _ = writeln!(svg, r##"<title>{}</title>"##, xml_escape(&system.name));
    let (ax0, ay) = px(z0, 0.0);
    let _ = writeln!(svg, r##"<line class="axis" x1="{ax0:.2}" y1="{ay:.2}" x2="{width:.2}" y2="{ay:.2}" stroke="#999" stroke-dasharray="4 4"/>"##);
    for (i, s) in system.surfaces.iter().enumerate() {
        let params = &system.params_f64()[i];
        let mut d = String::new();
        for k in 0..64 {
            let y = -s.semi_diameter + 2.0 * s.semi_diameter * k as f64 / 63.0;
            let z = s.vertex_z + params.sag(y * y).unwrap_or(0.0);
            let (x, yy) = px(z, y);
            let _ = write!(d, "{}{x:.2},{yy:.2} ", if k == 0 { "M" } else { "L" });
        }
        let _ = writeln!(svg, r##"<path class="surface" data-index="{i}" d="{}" fill="none" stroke="#06c" stroke-width="1.5"/>"##, d.trim_end());
    }
    let zs = system.stop.vertex_z;
    let (sx, top) = px(zs, ymax - 0.05);
    let (_, r_hi) = px(zs, system.stop.radius);
    let (_, r_lo) = px(zs, -system.stop.radius);
    let (_, bottom) = px(zs, -(ymax - 0.05));
    let _ = writeln!(
        svg,
        r##"<path class="stop" d="M{sx:.2},{top:.2} L{sx:.2},{r_hi:.2} M{sx:.2},{r_lo:.2} L{sx:.2},{bottom:.2}" stroke="#000" stroke-width="3"/>"##
    );
    let h = system.sensor.half_diagonal();
    let (qx, q0) = px(system.sensor.z, h);
    let (_, q1) = px(system.sensor.z, -h);
    let _ = writeln!(svg, r##"<line class="sensor" x1="{qx:.2}" y1="{q0:.2}" x2="{qx:.2}" y2="{q1:.2}" stroke="#333" stroke-width="3"/>"##);
    if !system.surfaces.is_empty() {
        for (field, colour) in [(0.0, "#c00"), (max_field_deg, "#080")] {
            let mut rays: Vec<Ray<f64>> = Vec::with_capacity(8);
            rays.extend(chief_ray_start(system, field, WAVELENGTH_G).ok());
            rays.extend(meridional_rays(system, field, WAVELENGTH_G, &LAYOUT_FRACTIONS));
            for ray in rays {
                let path = trace_path(system, &ray)?;
                let pts: Vec<String> = path
                    .iter()
                    .map(|p| {
                        let (x, y) = px(p.z, p.y);
                        format!("{x:.2},{y:.2}")
                    })
                    .collect();
                let _ = writeln!(
                    svg,
                    r##"<polyline class="ray" data-field="{field}" points="{}" fill="none" stroke="{colour}" stroke-width="0.6"/>"##,
                    pts.join(" ")
                );
            }
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn export_layout(system: &LensSystem, max_field_deg: f64, path: &Path) -> Result<()> {
    std::fs::write(path, layout_svg(system, max_field_deg)?).map_err(|e| Error::io(path, e))
}

/// Per-field spot statistics, averaged over the three design wavelengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldReport {
    pub field_deg: f64,
    pub rms_radius_mm: f64,
    pub median_radius_mm: f64,
    pub r80_mm: f64,
    /// median / rms
    pub tail_ratio: f64,
    pub valid_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistorySummary {
    pub steps: usize,
    pub skipped: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub min_loss: f64,
    pub smoothed_first: f64,
    pub smoothed_last: f64,
}

impl HistorySummary {
    pub fn from_history(h: &crate::optimize::History, window: usize) -> Option<Self> {
        let losses = h.losses();
        let smooth = h.smoothed(window);
        if losses.is_empty() {
            return None;
        }
        Some(HistorySummary {
            steps: h.len(),
            skipped: h.records.iter().filter(|r| r.skipped).count(),
            first_loss: losses[0],
            last_loss: *losses.last().unwrap(),
            min_loss: losses.iter().cloned().fold(f64::INFINITY, f64::min),
            smoothed_first: smooth[(window.min(smooth.len())).max(1) - 1],
            smoothed_last: *smooth.last().unwrap(),
        })
    }
}

/// Results that must be reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ReportPayload {
    pub lens: String,
    pub rays_per_field: usize,
    pub fields: Vec<FieldReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_rms_radius_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sharp_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_history: Option<HistorySummary>,
    /// Free-form named comparisons (e.g. tail ratios of two designs).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub comparisons: Vec<(String, f64)>,
}

/// Provenance; excluded from determinism checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metadata: ReportMetadata,
    pub payload: ReportPayload,
}

impl Report {
    pub fn new(command: impl Into<String>, seed: u64, payload: ReportPayload) -> Self {
        Report {
            metadata: ReportMetadata { tool: "difflens".into(), version: env!("CARGO_PKG_VERSION").into(), command: command.into(), seed },
            payload,
        }
    }

    /// Canonical bytes of the payload alone.
    pub fn payload_bytes(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(&self.payload).expect("payload serialises")
    }
}

pub fn export_report(report: &Report, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).expect("report serialises");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_report(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.display().to_string(), msg: e.to_string() })
}

/// Traces all three wavelengths of one field (no tape).
pub fn trace_field(system: &LensSystem, field_deg: f64, rays: usize, seed: u64) -> Result<Vec<Trace<f64>>> {
    let params = system.params_f64();
    WAVELENGTHS_RGB
        .iter()
        .map(|&wl| trace_to_sensor(system, &params, &sample_pupil_rays(system, field_deg, wl, rays, seed)))
        .collect()
}

/// Spot statistics of one field, averaged over wavelengths.
pub fn field_spot_report(system: &LensSystem, field_deg: f64, rays: usize, seed: u64) -> Result<FieldReport> {
    let traces = trace_field(system, field_deg, rays, seed)?;
    let mut acc = [0.0; 4];
    let mut valid = 0usize;
    for t in &traces {
        let s = spot_stats(&t.hits).map_err(|_| Error::DegenerateTrace {
            field_deg,
            wavelength_um: t.wavelength,
            valid: t.valid_count(),
        })?;
        acc[0] += s.rms_radius / 3.0;
        acc[1] += s.median_radius / 3.0;
        acc[2] += s.r80 / 3.0;
        valid += s.valid;
    }
    Ok(FieldReport {
        field_deg,
        rms_radius_mm: acc[0],
        median_radius_mm: acc[1],
        r80_mm: acc[2],
        tail_ratio: if acc[0] > 0.0 { acc[1] / acc[0] } else { 1.0 },
        valid_fraction: valid as f64 / (3 * rays) as f64,
        psnr_db: None,
        accuracy: None,
    })
}

/// Spot statistics for every field, plus PSNR of the chart captures when a
/// chart is given.
pub fn analyze(system: &LensSystem, fields: &[f64], rays: usize, seed: u64, chart: Option<(&[ImagePatch], &PsfConfig)>) -> Result<ReportPayload> {
    let params = system.params_f64();
    let mut out = Vec::with_capacity(fields.len());
    for &f in fields {
        let mut rep = field_spot_report(system, f, rays, seed)?;
        if let Some((patches, psf_cfg)) = chart {
            let rgb = psf_rgb(system, &params, f, &PsfConfig { rays, seed, ..*psf_cfg })?;
            let kernel = Kernel::from_psf(&rgb.channels)?;
            let mut total = 0.0;
            for p in patches {
                total += psnr(p, &convolve_patch(p, &kernel)?)?;
            }
            rep.psnr_db = Some(total / patches.len().max(1) as f64);
        }
        out.push(rep);
    }
    let mean = out.iter().map(|r| r.rms_radius_mm).sum::<f64>() / out.len().max(1) as f64;
    Ok(ReportPayload {
        lens: system.name.clone(),
        rays_per_field: rays,
        fields: out,
        mean_rms_radius_mm: Some(mean),
        ..ReportPayload::default()
    })
}

/// Writes `image` (clamped) as PPM; convenience for exported captures.
pub fn export_capture(image: &ImagePatch, path: &Path) -> Result<()> {
    let img = to_rgb8(image);
    img.save_with_format(path, image::ImageFormat::Pnm).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimize::init_paper_geometry;
    use crate::psf::{splat_psf, GridSpec};
    use crate::raytrace::SensorHit;

    #[test]
    fn lens_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut sys = init_paper_geometry(2, 5).unwrap();
        sys.surfaces[1].alpha = [1.0 / 3.0, -2e-7, 0.1 + 0.2, 5e-300];
        let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
        save_lens(&sys, &a).unwrap();
        let back = load_lens(&a).unwrap();
        assert_eq!(back, sys);
        save_lens(&back, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn custom_material_round_trip() {
        let mut sys = init_paper_geometry(1, 0).unwrap();
        sys.surfaces[0].material_after = Material::new("N15", 1.5, 0.0).unwrap();
        let text = lens_to_string(&sys);
        assert!(text.contains("cauchy_a"));
        assert_eq!(lens_from_str(&text, "mem").unwrap(), sys);
    }

    #[test]
    fn strict_schema_and_invariants() {
        let sys = init_paper_geometry(2, 1).unwrap();
        let text = lens_to_string(&sys);
        let extra = text.replacen("\"name\"", "\"colour\": 1,\n  \"name\"", 1);
        match lens_from_str(&extra, "x.json") {
            Err(Error::Parse { msg, path }) => {
                assert!(msg.contains("colour") && msg.contains("line"), "{msg}");
                assert_eq!(path, "x.json");
            }
            other => panic!("{other:?}"),
        }
        let mut bad = LensFile::from_system(&sys);
        bad.surfaces[2].vertex_z = bad.surfaces[1].vertex_z - 0.1;
        match bad.to_system() {
            Err(Error::Invariant(msg)) => assert!(msg.contains("surface[1]") && msg.contains("surface[2]"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let mut unknown = LensFile::from_system(&sys);
        unknown.surfaces[0].material = MaterialSpec::Named("UNOBTAINIUM".into());
        let err = unknown.to_system().unwrap_err().to_string();
        assert!(err.contains("PMMA") && err.contains("PC"), "{err}");
    }

    #[test]
    fn delta_psf_export_has_one_bright_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GridSpec::new(5, 0.01, [0.0, 0.0]).unwrap();
        let g = splat_psf(&[SensorHit { x: 0.0, y: 0.0, valid: true }], spec, 0.55);
        let path = dir.path().join("psf.ppm");
        export_psf(&[g.clone(), g.clone(), g], &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        let bright: Vec<(u32, u32)> = img.enumerate_pixels().filter(|p| p.2 .0 != [0, 0, 0]).map(|p| (p.0, p.1)).collect();
        assert_eq!(bright, vec![(2, 2)]);
        let csv = std::fs::read_to_string(dir.path().join("psf.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 25);
    }

    #[test]
    fn spot_csv_has_one_row_per_ray() {
        let dir = tempfile::tempdir().unwrap();
        let sys = init_paper_geometry(2, 1).unwrap();
        let traces = trace_field(&sys, 20.0, 100, 0).unwrap();
        let path = dir.path().join("spot.csv");
        export_spot(&traces, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1 + 300);
    }

    #[test]
    fn empty_layout_has_stop_and_sensor_only() {
        let sys = LensSystem::empty(0.52, Sensor::standard(3.0)).unwrap();
        let svg = layout_svg(&sys, 30.0).unwrap();
        assert!(svg.contains("class=\"stop\"") && svg.contains("class=\"sensor\""));
        assert!(!svg.contains("class=\"surface\"") && !svg.contains("class=\"ray\""));
        let lens = init_paper_geometry(2, 0).unwrap();
        let svg = layout_svg(&lens, 34.4).unwrap();
        assert_eq!(svg.matches("class=\"surface\"").count(), 4);
        assert_eq!(svg.matches("class=\"ray\"").count(), 16);
    }
}
