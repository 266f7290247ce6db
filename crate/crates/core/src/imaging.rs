//! Simulated captures: per-field PSF convolution of image patches, the
//! convolution adjoint w.r.t. the kernel, PSNR, and PPM image I/O.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::optics::LensSystem;
use crate::psf::{psf_rgb, PsfConfig, PsfGrid};

pub const PSNR_CAP_DB: f64 = 99.0;

/// Three-channel image in channel-major (`[c][y][x]`) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub label: Option<usize>,
}

impl ImagePatch {
    pub fn zeros(height: usize, width: usize) -> Self {
        ImagePatch { height, width, pixels: vec![0.0; 3 * height * width], label: None }
    }

    /// Checked constructor for ingested data: values must lie in `[0, 1]`.
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, label: Option<usize>) -> Result<Self> {
        if pixels.len() != 3 * height * width {
            return Err(Error::Shape(format!("expected {} values for 3x{height}x{width}, got {}", 3 * height * width, pixels.len())));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImagePatch { height, width, pixels, label })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        ImagePatch { height, width, pixels: vec![value; 3 * height * width], label: None }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[self.idx(c, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    pub fn clamped(&self) -> ImagePatch {
        ImagePatch { pixels: self.pixels.iter().map(|v| v.clamp(0.0, 1.0)).collect(), ..self.clone() }
    }

    fn same_shape(&self, o: &ImagePatch) -> Result<()> {
        if (self.height, self.width) != (o.height, o.width) {
            return Err(Error::Shape(format!("{}x{} vs {}x{}", self.height, self.width, o.height, o.width)));
        }
        Ok(())
    }
}

/// Reflect (mirror without edge repeat) an index into `0..n`.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// One square, odd-sized kernel per channel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub channels: [Vec<f64>; 3],
}

impl Kernel {
    pub fn from_psf<R: crate::autodiff::Scalar>(psf: &[PsfGrid<R>; 3]) -> Result<Kernel> {
        let size = psf[0].size();
        if psf.iter().any(|g| g.size() != size) {
            return Err(Error::Shape("PSF channels differ in size".into()));
        }
        Ok(Kernel { size, channels: [0, 1, 2].map(|c| psf[c].values().cells) })
    }

    pub fn delta(size: usize) -> Kernel {
        let mut k = vec![0.0; size * size];
        k[(size / 2) * size + size / 2] = 1.0;
        Kernel { size, channels: [k.clone(), k.clone(), k] }
    }

    /// Normalised isotropic Gaussian, same in every channel, radius ⌈3σ⌉.
    pub fn gaussian(sigma_px: f64) -> Kernel {
        let r = (3.0 * sigma_px).ceil().max(0.0) as usize;
        let size = 2 * r + 1;
        let mut k: Vec<f64> = (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f64 - r as f64, (i % size) as f64 - r as f64);
                (-(x * x + y * y) / (2.0 * sigma_px * sigma_px).max(f64::MIN_POSITIVE)).exp()
            })
            .collect();
        let total: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= total);
        Kernel { size, channels: [k.clone(), k.clone(), k] }
    }

    fn check(&self) -> Result<()> {
        if self.size % 2 == 0 || self.channels.iter().any(|c| c.len() != self.size * self.size) {
            return Err(Error::Shape(format!("kernel must be odd and square, got size {}", self.size)));
        }
        Ok(())
    }
}

/// Channel `c` reflect-padded by `r` on every side, row-major with width
/// `w + 2r`.
fn padded_channel(patch: &ImagePatch, c: usize, r: usize) -> Vec<f64> {
    let (h, w) = (patch.height, patch.width);
    let pw = w + 2 * r;
    let src = patch.channel(c);
    let cols: Vec<usize> = (0..pw).map(|x| reflect_index(x as isize - r as isize, w)).collect();
    let mut out = Vec::with_capacity((h + 2 * r) * pw);
    for y in 0..h + 2 * r {
        let row = &src[reflect_index(y as isize - r as isize, h) * w..][..w];
        out.extend(cols.iter().map(|&x| row[x]));
    }
    out
}

/// Per-channel 2D convolution with reflect padding, same-size output:
/// `out(p) = Σ_q k(q) · in(p − q)` with `q` measured from the kernel centre.
pub fn convolve_patch(patch: &ImagePatch, kernel: &Kernel) -> Result<ImagePatch> {
    kernel.check()?;
    if patch.pixels.len() != 3 * patch.height * patch.width {
        return Err(Error::Shape(format!("patch must have 3 channels of {}x{}", patch.height, patch.width)));
    }
    let (h, w, ks) = (patch.height, patch.width, kernel.size);
    let r = ks / 2;
    let pw = w + 2 * r;
    let mut out = ImagePatch { label: patch.label, ..ImagePatch::zeros(h, w) };
    for c in 0..3 {
        let padded = padded_channel(patch, c, r);
        let k = &kernel.channels[c];
        let dst = &mut out.pixels[c * h * w..(c + 1) * h * w];
        // out[y][x] = Σ k[i][j] · P[y + 2r − i][x + 2r − j]
        for i in 0..ks {
            for j in 0..ks {
                let kv = k[i * ks + j];
                if kv == 0.0 {
                    continue;
                }
                for y in 0..h {
                    let src = &padded[(y + 2 * r - i) * pw + 2 * r - j..][..w];
                    let row = &mut dst[y * w..(y + 1) * w];
                    for (o, s) in row.iter_mut().zip(src) {
                        *o += kv * s;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `dLoss/dkernel` given `dLoss/dcapture`: the cross-correlation of the
/// reflect-padded patch with the capture adjoint.
pub fn backward_to_psf(d_capture: &ImagePatch, patch: &ImagePatch, kernel_size: usize) -> Result<[Vec<f64>; 3]> {
    d_capture.same_shape(patch)?;
    if kernel_size % 2 == 0 {
        return Err(Error::Shape(format!("kernel size must be odd, got {kernel_size}")));
    }
    let (h, w, ks) = (patch.height, patch.width, kernel_size);
    let r = ks / 2;
    let pw = w + 2 * r;
    let mut grads = [vec![0.0; ks * ks], vec![0.0; ks * ks], vec![0.0; ks * ks]];
    for (c, g) in grads.iter_mut().enumerate() {
        let adj = d_capture.channel(c);
        if adj.iter().all(|&a| a == 0.0) {
            continue;
        }
        let padded = padded_channel(patch, c, r);
        for i in 0..ks {
            for j in 0..ks {
                let mut acc = 0.0;
                for y in 0..h {
                    let src = &padded[(y + 2 * r - i) * pw + 2 * r - j..][..w];
                    acc += adj[y * w..(y + 1) * w].iter().zip(src).map(|(a, s)| a * s).sum::<f64>();
                }
                g[i * ks + j] = acc;
            }
        }
    }
    Ok(grads)
}

/// One simulated capture, tagged by the field it was rendered at.
#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub patch_index: usize,
    pub field_index: usize,
    pub field_angle_deg: f64,
    pub image: ImagePatch,
}

/// Per-field PSF kernels, computed once per field.
pub fn field_kernels(system: &LensSystem, field_angles: &[f64], config: &PsfConfig) -> Result<Vec<Kernel>> {
    let params = system.params_f64();
    field_angles
        .par_iter()
        .map(|&angle| {
            let rgb = psf_rgb(system, &params, angle, config).map_err(|e| tag_field(e, angle))?;
            Kernel::from_psf(&rgb.channels)
        })
        .collect()
}

pub(crate) fn tag_field(e: Error, field_deg: f64) -> Error {
    match e {
        Error::DegeneratePsf { wavelength_um, .. } => Error::DegeneratePsf { field_deg, wavelength_um },
        other => other,
    }
}

/// Renders every patch at every field. Output order is field-major:
/// all patches for field 0, then field 1, and so on.
pub fn simulate_capture_batch(
    system: &LensSystem,
    patches: &[ImagePatch],
    field_angles: &[f64],
    config: &PsfConfig,
) -> Result<Vec<Capture>> {
    if field_angles.is_empty() {
        return Err(Error::Usage("at least one field angle is required".into()));
    }
    let kernels = field_kernels(system, field_angles, config)?;
    capture_with_kernels(patches, field_angles, &kernels)
}

pub fn capture_with_kernels(patches: &[ImagePatch], field_angles: &[f64], kernels: &[Kernel]) -> Result<Vec<Capture>> {
    let jobs: Vec<(usize, usize)> = (0..kernels.len()).flat_map(|f| (0..patches.len()).map(move |p| (f, p))).collect();
    jobs.par_iter()
        .map(|&(f, p)| {
            Ok(Capture {
                patch_index: p,
                field_index: f,
                field_angle_deg: field_angles[f],
                image: convolve_patch(&patches[p], &kernels[f])?,
            })
        })
        .collect()
}

pub fn mse(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    a.same_shape(b)?;
    Ok(a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.pixels.len() as f64)
}

/// `10·log10(1/MSE)` for unit peak, capped at 99 dB.
pub fn psnr(reference: &ImagePatch, test: &ImagePatch) -> Result<f64> {
    let m = mse(reference, test)?;
    Ok(if m <= 0.0 { PSNR_CAP_DB } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB) })
}

pub fn read_ppm(path: &Path) -> Result<ImagePatch> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut patch = ImagePatch::zeros(h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            let i = patch.idx(c, y as usize, x as usize);
            patch.pixels[i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(patch)
}

pub fn to_rgb8(patch: &ImagePatch) -> image::RgbImage {
    image::RgbImage::from_fn(patch.width as u32, patch.height as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|c| (patch.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Writes a binary (P6) 8-bit PPM, clamping to `[0, 1]`.
pub fn write_ppm(patch: &ImagePatch, path: &Path) -> Result<()> {
    let img = to_rgb8(patch);
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    image::codecs::pnm::PnmEncoder::new(&mut out)
        .with_subtype(image::codecs::pnm::PnmSubtype::Pixmap(image::codecs::pnm::SampleEncoding::Binary))
        .encode(img.as_raw().as_slice(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
