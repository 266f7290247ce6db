//! Procedural glyph dataset and a small CNN classifier with a hand-written
//! backward pass. The network is the frozen supervisor for task-driven
//! design: it supplies a loss and `dLoss/dinput`.
//!
//! Architecture (input 3×32×32):
//! conv 3→8 (3×3, pad 1) → relu → avgpool 2 → conv 8→16 → relu →
//! avgpool 2 → fc 1024→C → softmax.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{convolve_patch, Capture, ImagePatch, Kernel};
use crate::raytrace::mix_seed;

pub const CLASS_NAMES: [&str; 4] = ["disk", "square", "cross", "stripes"];
pub const NET_MAGIC: &[u8; 6] = b"RLNET1";
const C1: usize = 8;
const C2: usize = 16;
/// Index offset that keeps the validation split disjoint from training.
pub const VAL_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    /// Max centre offset, pixels.
    pub position: f64,
    /// Glyph half-size range, pixels.
    pub scale: (f64, f64),
    /// Max rotation, radians.
    pub rotation: f64,
    /// Background noise amplitude.
    pub noise: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter { position: 3.0, scale: (7.0, 10.0), rotation: std::f64::consts::PI, noise: 0.06 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlyphSpec {
    pub class_count: usize,
    pub image_size: usize,
    pub seed: u64,
    pub jitter: Jitter,
}

impl Default for GlyphSpec {
    fn default() -> Self {
        GlyphSpec { class_count: 4, image_size: 32, seed: 0, jitter: Jitter::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

fn inside(class: usize, u: f64, v: f64, r: f64) -> bool {
    match class {
        0 => u * u + v * v <= r * r,
        1 => u.abs() <= 0.8 * r && v.abs() <= 0.8 * r,
        2 => (u.abs() <= 0.3 * r && v.abs() <= r) || (v.abs() <= 0.3 * r && u.abs() <= r),
        _ => u.abs() <= 0.85 * r && v.abs() <= 0.85 * r && (((u + r) / (0.34 * r)).floor() as i64) % 2 == 0,
    }
}

/// One glyph; a pure function of `(spec.seed, index)`.
pub fn glyph(spec: &GlyphSpec, index: u64) -> ImagePatch {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, index));
    let classes = spec.class_count.clamp(1, CLASS_NAMES.len());
    let label = rng.gen_range(0..classes);
    let n = spec.image_size;
    let j = spec.jitter;
    let centre = (n as f64) / 2.0;
    let cx = centre + rng.gen_range(-j.position..=j.position);
    let cy = centre + rng.gen_range(-j.position..=j.position);
    let r = rng.gen_range(j.scale.0..=j.scale.1);
    let phi = rng.gen_range(-j.rotation..=j.rotation);
    let (sin, cos) = phi.sin_cos();
    let dark_on_light = rng.gen_bool(0.5);
    let mut bg = [0.0; 3];
    let mut fg = [0.0; 3];
    for c in 0..3 {
        let (lo, hi) = (rng.gen_range(0.05..0.35), rng.gen_range(0.65..0.95));
        (bg[c], fg[c]) = if dark_on_light { (hi, lo) } else { (lo, hi) };
    }
    const SS: usize = 4;
    let mut patch = ImagePatch::zeros(n, n);
    patch.label = Some(label);
    for y in 0..n {
        for x in 0..n {
            let mut cover = 0usize;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64 - cx;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64 - cy;
                    let (u, v) = (cos * px + sin * py, -sin * px + cos * py);
                    cover += inside(label, u, v, r) as usize;
                }
            }
            let a = cover as f64 / (SS * SS) as f64;
            for c in 0..3 {
                let noise = j.noise * (rng.gen::<f64>() - 0.5) * 2.0;
                let v = (bg[c] + noise) * (1.0 - a) + fg[c] * a;
                let i = patch.idx(c, y, x);
                patch.pixels[i] = v.clamp(0.0, 1.0);
            }
        }
    }
    patch
}

/// `n` glyphs starting at `start` within the split.
pub fn generate_glyphs_from(spec: &GlyphSpec, start: u64, n: usize, split: Split) -> Vec<ImagePatch> {
    let base = match split {
        Split::Train => 0,
        Split::Val => VAL_OFFSET,
    };
    (0..n as u64).into_par_iter().map(|i| glyph(spec, base + start + i)).collect()
}

pub fn generate_glyphs(spec: &GlyphSpec, n: usize, split: Split) -> Vec<ImagePatch> {
    generate_glyphs_from(spec, 0, n, split)
}

/// Weights in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskNetwork {
    pub classes: usize,
    /// `[8][3][3][3]`
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    /// `[16][8][3][3]`
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    /// `[classes][16·8·8]`, input flattened as `(c, y, x)`.
    pub fc_w: Vec<f64>,
    pub fc_b: Vec<f64>,
}

const SIZE: usize = 32;
const FC_IN: usize = C2 * 8 * 8;

fn conv3x3(input: &[f64], cin: usize, n: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * n * n];
    for o in 0..cout {
        let plane = &mut out[o * n * n..(o + 1) * n * n];
        plane.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..cin {
            let src = &input[i * n * n..(i + 1) * n * n];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = w[((o * cin + i) * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..n {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= n as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * n..sy as usize * n + n];
                        let drow = &mut plane[y * n..y * n + n];
                        let (x0, x1) = (if kx == 0 { 1 } else { 0 }, if kx == 2 { n - 1 } else { n });
                        for x in x0..x1 {
                            drow[x] += wv * srow[x + kx - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (dinput, dw, db) for [`conv3x3`].
fn conv3x3_backward(input: &[f64], cin: usize, n: usize, w: &[f64], cout: usize, dout: &[f64], need_dx: bool) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; if need_dx { cin * n * n } else { 0 }];
    let mut dw = vec![0.0; cout * cin * 9];
    let mut db = vec![0.0; cout];
    for o in 0..cout {
        let dplane = &dout[o * n * n..(o + 1) * n * n];
        db[o] = dplane.iter().sum();
        for i in 0..cin {
            let src = &input[i * n * n..(i + 1) * n * n];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((o * cin + i) * 3 + ky) * 3 + kx;
                    let wv = w[widx];
                    let mut acc = 0.0;
                    for y in 0..n {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= n as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let (x0, x1) = (if kx == 0 { 1 } else { 0 }, if kx == 2 { n - 1 } else { n });
                        for x in x0..x1 {
                            let g = dplane[y * n + x];
                            let sx = x + kx - 1;
                            acc += g * src[sy * n + sx];
                            if need_dx {
                                dx[i * n * n + sy * n + sx] += g * wv;
                            }
                        }
                    }
                    dw[widx] = acc;
                }
            }
        }
    }
    (dx, dw, db)
}

fn avgpool2(input: &[f64], c: usize, n: usize) -> Vec<f64> {
    let m = n / 2;
    let mut out = vec![0.0; c * m * m];
    for ch in 0..c {
        for y in 0..m {
            for x in 0..m {
                let s = |yy: usize, xx: usize| input[ch * n * n + yy * n + xx];
                out[ch * m * m + y * m + x] = 0.25 * (s(2 * y, 2 * x) + s(2 * y, 2 * x + 1) + s(2 * y + 1, 2 * x) + s(2 * y + 1, 2 * x + 1));
            }
        }
    }
    out
}

fn avgpool2_backward(dout: &[f64], c: usize, n: usize) -> Vec<f64> {
    let m = n / 2;
    let mut dx = vec![0.0; c * n * n];
    for ch in 0..c {
        for y in 0..n {
            for x in 0..n {
                dx[ch * n * n + y * n + x] = 0.25 * dout[ch * m * m + (y / 2) * m + x / 2];
            }
        }
    }
    dx
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy `−ln p[label]`.
pub fn loss_ce(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(f64::MIN_POSITIVE).ln()
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    a1: Vec<f64>,
    p1: Vec<f64>,
    a2: Vec<f64>,
    p2: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub flat: Vec<f64>,
}

impl TaskNetwork {
    pub fn zeros(classes: usize) -> Self {
        TaskNetwork {
            classes,
            conv1_w: vec![0.0; C1 * 3 * 9],
            conv1_b: vec![0.0; C1],
            conv2_w: vec![0.0; C2 * C1 * 9],
            conv2_b: vec![0.0; C2],
            fc_w: vec![0.0; classes * FC_IN],
            fc_b: vec![0.0; classes],
        }
    }

    /// He-uniform initialisation.
    pub fn random(classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::zeros(classes);
        let mut fill = |w: &mut Vec<f64>, fan_in: usize| {
            let a = (6.0 / fan_in as f64).sqrt();
            w.iter_mut().for_each(|v| *v = rng.gen_range(-a..a));
        };
        fill(&mut net.conv1_w, 27);
        fill(&mut net.conv2_w, 72);
        fill(&mut net.fc_w, FC_IN);
        net
    }

    pub fn param_count(&self) -> usize {
        self.conv1_w.len() + self.conv1_b.len() + self.conv2_w.len() + self.conv2_b.len() + self.fc_w.len() + self.fc_b.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        [&self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b, &self.fc_w, &self.fc_b]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for part in [&mut self.conv1_w, &mut self.conv1_b, &mut self.conv2_w, &mut self.conv2_b, &mut self.fc_w, &mut self.fc_b] {
            let n = part.len();
            part.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn forward(&self, x: &ImagePatch) -> Result<ForwardCache> {
        if x.height != SIZE || x.width != SIZE || x.pixels.len() != 3 * SIZE * SIZE {
            return Err(Error::Shape(format!("network expects 3x{SIZE}x{SIZE}, got {}x{}", x.height, x.width)));
        }
        let input = x.pixels.clone();
        let a1: Vec<f64> = conv3x3(&input, 3, SIZE, &self.conv1_w, &self.conv1_b, C1).into_iter().map(|v| v.max(0.0)).collect();
        let p1 = avgpool2(&a1, C1, SIZE);
        let a2: Vec<f64> = conv3x3(&p1, C1, SIZE / 2, &self.conv2_w, &self.conv2_b, C2).into_iter().map(|v| v.max(0.0)).collect();
        let p2 = avgpool2(&a2, C2, SIZE / 2);
        let logits: Vec<f64> = (0..self.classes)
            .map(|k| self.fc_b[k] + self.fc_w[k * FC_IN..(k + 1) * FC_IN].iter().zip(&p2).map(|(w, v)| w * v).sum::<f64>())
            .collect();
        let probs = softmax(&logits);
        Ok(ForwardCache { input, a1, p1, a2, p2, logits, probs })
    }

    pub fn predict(&self, x: &ImagePatch) -> Result<usize> {
        let probs = self.forward(x)?.probs;
        Ok(argmax(&probs))
    }

    /// `dLoss/dx` (channel-major, like the input) and, on request, the
    /// weight gradient in flat file order.
    pub fn backward(&self, cache: &ForwardCache, label: usize, want_weights: bool) -> Result<(ImagePatch, Option<NetGrads>)> {
        if label >= self.classes {
            return Err(Error::Usage(format!("label {label} out of range for {} classes", self.classes)));
        }
        let mut dlogits = cache.probs.clone();
        dlogits[label] -= 1.0;
        let mut dp2 = vec![0.0; FC_IN];
        let mut dfc_w = vec![0.0; if want_weights { self.fc_w.len() } else { 0 }];
        for (k, &g) in dlogits.iter().enumerate() {
            let row = &self.fc_w[k * FC_IN..(k + 1) * FC_IN];
            for i in 0..FC_IN {
                dp2[i] += g * row[i];
            }
            if want_weights {
                for i in 0..FC_IN {
                    dfc_w[k * FC_IN + i] = g * cache.p2[i];
                }
            }
        }
        let mut da2 = avgpool2_backward(&dp2, C2, SIZE / 2);
        da2.iter_mut().zip(&cache.a2).for_each(|(g, a)| if *a <= 0.0 { *g = 0.0 });
        let (dp1, dw2, db2) = conv3x3_backward(&cache.p1, C1, SIZE / 2, &self.conv2_w, C2, &da2, true);
        let mut da1 = avgpool2_backward(&dp1, C1, SIZE);
        da1.iter_mut().zip(&cache.a1).for_each(|(g, a)| if *a <= 0.0 { *g = 0.0 });
        let (dx, dw1, db1) = conv3x3_backward(&cache.input, 3, SIZE, &self.conv1_w, C1, &da1, true);
        let dinput = ImagePatch { height: SIZE, width: SIZE, pixels: dx, label: None };
        let grads = want_weights.then(|| NetGrads {
            flat: [dw1, db1, dw2, db2, dfc_w, dlogits].into_iter().flatten().collect(),
        });
        Ok((dinput, grads))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(6 + 8 * self.param_count());
        bytes.extend_from_slice(NET_MAGIC);
        for v in self.to_flat() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// The class count is implied by the payload length.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..6] != NET_MAGIC {
            return Err(Error::NetFormat("missing RLNET1 magic".into()));
        }
        let body = &bytes[6..];
        if body.len() % 8 != 0 {
            return Err(Error::NetFormat(format!("payload of {} bytes is not a whole number of f64", body.len())));
        }
        let n = body.len() / 8;
        let fixed = C1 * 27 + C1 + C2 * C1 * 9 + C2;
        if n <= fixed || (n - fixed) % (FC_IN + 1) != 0 {
            return Err(Error::NetFormat(format!("{n} weights do not match the architecture")));
        }
        let classes = (n - fixed) / (FC_IN + 1);
        let flat: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut net = Self::zeros(classes);
        net.set_flat(&flat);
        Ok(net)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct FlatAdam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl FlatAdam {
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        FlatAdam { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr, weight_decay }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= lr * (self.m[i] / c1 / ((self.v[i] / c2).sqrt() + eps) + self.weight_decay * params[i]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub train_size: usize,
    pub seed: u64,
    /// Warm-up fraction for the optional cosine schedule; `None` = constant lr.
    pub cosine_warmup: Option<f64>,
    /// Half of the training samples are blurred by a Gaussian with σ drawn
    /// from U(0, blur_max_px); 0 trains on sharp glyphs only.
    pub blur_max_px: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 5, lr: 2e-3, batch: 32, train_size: 8000, seed: 0, cosine_warmup: None, blur_max_px: 4.0 }
    }
}

pub fn scheduled_lr(base: f64, step: usize, total: usize, cosine_warmup: Option<f64>) -> f64 {
    match cosine_warmup {
        None => base,
        Some(frac) => {
            let warm = ((frac * total as f64).round() as usize).max(1);
            if step < warm {
                base * (step + 1) as f64 / warm as f64
            } else {
                let p = (step - warm) as f64 / (total - warm).max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

/// Random flips and ±2 px shifts (edge-clamped).
pub fn augment(x: &ImagePatch, rng: &mut ChaCha8Rng) -> ImagePatch {
    let (fx, fy) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
    let (dx, dy) = (rng.gen_range(-2i64..=2), rng.gen_range(-2i64..=2));
    let (h, w) = (x.height as i64, x.width as i64);
    let mut out = ImagePatch { label: x.label, ..ImagePatch::zeros(x.height, x.width) };
    for c in 0..3 {
        for y in 0..h {
            for xx in 0..w {
                let mut sy = (y - dy).clamp(0, h - 1);
                let mut sx = (xx - dx).clamp(0, w - 1);
                if fy {
                    sy = h - 1 - sy;
                }
                if fx {
                    sx = w - 1 - sx;
                }
                let i = out.idx(c, y as usize, xx as usize);
                out.pixels[i] = x.get(c, sy as usize, sx as usize);
            }
        }
    }
    out
}

/// Mean loss and summed gradient over a batch, reduced in input order.
pub fn batch_gradient(net: &TaskNetwork, batch: &[ImagePatch]) -> Result<(f64, Vec<f64>)> {
    let per: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_iter()
        .map(|x| {
            let label = x.label.ok_or_else(|| Error::Usage("unlabelled training patch".into()))?;
            let cache = net.forward(x)?;
            let loss = loss_ce(&cache.probs, label);
            let (_, g) = net.backward(&cache, label, true)?;
            Ok((loss, g.expect("weights requested").flat))
        })
        .collect();
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; net.param_count()];
    for r in per {
        let (l, g) = r?;
        total += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b / n);
    }
    Ok((total / n, grad))
}

/// Trains on `data` (already rendered patches) starting from `net`.
pub fn train_on(net: &mut TaskNetwork, data: &[ImagePatch], cfg: &TrainConfig, mut log: impl FnMut(usize, f64)) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7261_696e));
    let mut adam = FlatAdam::new(net.param_count(), cfg.lr, 0.0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let steps_per_epoch = data.len().div_ceil(cfg.batch.max(1));
    let total = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let x = augment(&data[i], &mut rng);
                batch.push(if cfg.blur_max_px > 0.0 && rng.gen_bool(0.5) {
                    convolve_patch(&x, &Kernel::gaussian(rng.gen_range(0.0..cfg.blur_max_px)))?
                } else {
                    x
                });
            }
            let (loss, grad) = batch_gradient(net, &batch)?;
            epoch_loss += loss * chunk.len() as f64;
            let mut flat = net.to_flat();
            adam.step(&mut flat, &grad, scheduled_lr(cfg.lr, step, total, cfg.cosine_warmup));
            net.set_flat(&flat);
            step += 1;
        }
        log(epoch, epoch_loss / data.len() as f64);
    }
    Ok(())
}

/// Trains a fresh network on sharp glyphs.
pub fn train_classifier(spec: &GlyphSpec, cfg: &TrainConfig, log: impl FnMut(usize, f64)) -> Result<TaskNetwork> {
    let data = generate_glyphs(spec, cfg.train_size, Split::Train);
    let mut net = TaskNetwork::random(spec.class_count, mix_seed(cfg.seed, 0x6e65_74));
    train_on(&mut net, &data, cfg, log)?;
    Ok(net)
}

/// Fraction of patches classified correctly.
pub fn evaluate(net: &TaskNetwork, data: &[ImagePatch]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<Result<bool>> = data
        .par_iter()
        .map(|x| Ok(Some(net.predict(x)?) == x.label))
        .collect();
    let mut correct = 0usize;
    for h in hits {
        correct += h? as usize;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy over every (patch, field) capture.
pub fn evaluate_captures(net: &TaskNetwork, captures: &[Capture]) -> Result<f64> {
    let imgs: Vec<ImagePatch> = captures.iter().map(|c| c.image.clone()).collect();
    evaluate(net, &imgs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> GlyphSpec {
        GlyphSpec { seed, ..GlyphSpec::default() }
    }

    #[test]
    fn glyphs_are_deterministic_and_in_range() {
        let s = small_spec(3);
        let a = generate_glyphs(&s, 20, Split::Train);
        assert_eq!(a, generate_glyphs(&s, 20, Split::Train));
        assert_ne!(a[0], generate_glyphs(&s, 1, Split::Val)[0]);
        assert!(a.iter().all(|p| p.pixels.iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(a.iter().all(|p| p.label.unwrap() < 4));
    }

    #[test]
    fn labels_are_balanced() {
        let s = small_spec(0);
        let mut counts = [0usize; 4];
        for p in generate_glyphs(&s, 10_000, Split::Train) {
            counts[p.label.unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| (c as f64 - 2500.0).abs() <= 125.0), "{counts:?}");
    }

    #[test]
    fn uniform_logits_loss_is_ln4() {
        let net = TaskNetwork::zeros(4);
        let c = net.forward(&ImagePatch::filled(32, 32, 0.5)).unwrap();
        assert!((loss_ce(&c.probs, 2) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(loss_ce(&[0.0, 1.0], 1), 0.0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let net = TaskNetwork::random(4, 9);
        let x = glyph(&small_spec(1), 5);
        let p = net.forward(&x).unwrap().probs;
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_weights_give_zero_input_gradient() {
        let net = TaskNetwork::zeros(4);
        let x = ImagePatch::zeros(32, 32);
        let c = net.forward(&x).unwrap();
        let (dx, _) = net.backward(&c, 1, false).unwrap();
        assert!(dx.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = TaskNetwork::random(4, 11);
        let x = glyph(&small_spec(2), 7);
        let label = x.label.unwrap();
        let c = net.forward(&x).unwrap();
        let (dx, _) = net.backward(&c, label, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let loss = |p: &ImagePatch| loss_ce(&net.forward(p).unwrap().probs, label);
        let mut checked = 0;
        while checked < 20 {
            let i = rng.gen_range(0..x.pixels.len());
            let h = 1e-6;
            let (mut a, mut b) = (x.clone(), x.clone());
            a.pixels[i] += h;
            b.pixels[i] -= h;
            let (fa, fb) = (net.forward(&a).unwrap(), net.forward(&b).unwrap());
            // a relu crossing inside the stencil makes the FD meaningless
            let kink = |p: &ForwardCache| p.a1.iter().chain(&p.a2).map(|v| (*v > 0.0) as u8).collect::<Vec<_>>();
            if kink(&fa) != kink(&c) || kink(&fb) != kink(&c) {
                continue;
            }
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            let g = dx.pixels[i];
            assert!((g - fd).abs() <= 1e-4 * g.abs().max(1e-6), "pixel {i}: {g} vs {fd}");
            checked += 1;
        }
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let net = TaskNetwork::random(4, 12);
        let x = glyph(&small_spec(2), 8);
        let label = x.label.unwrap();
        let (_, g) = net.backward(&net.forward(&x).unwrap(), label, true).unwrap();
        let g = g.unwrap().flat;
        let flat = net.to_flat();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = flat.len();
        let mut picks: Vec<usize> = (0..12).map(|_| rng.gen_range(0..n)).collect();
        picks.extend([0, 220, 230, n - 1, n - 5]);
        for i in picks {
            let h = 1e-6;
            let eval = |d: f64| {
                let mut f = flat.clone();
                f[i] += d;
                let mut m = net.clone();
                m.set_flat(&f);
                loss_ce(&m.forward(&x).unwrap().probs, label)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((g[i] - fd).abs() <= 1e-4 * g[i].abs().max(1e-5), "param {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn overfits_one_sample() {
        let mut net = TaskNetwork::random(4, 13);
        let x = glyph(&small_spec(4), 1);
        let label = x.label.unwrap();
        let mut adam = FlatAdam::new(net.param_count(), 1e-2, 0.0);
        let mut last = f64::MAX;
        for _ in 0..400 {
            let (loss, grad) = batch_gradient(&net, std::slice::from_ref(&x)).unwrap();
            last = loss;
            let mut flat = net.to_flat();
            adam.step(&mut flat, &grad, 1e-2);
            net.set_flat(&flat);
        }
        let (_, grad) = batch_gradient(&net, std::slice::from_ref(&x)).unwrap();
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(last < 1e-6 && norm <= 1e-6, "loss {last} grad norm {norm}");
        let _ = label;
    }

    #[test]
    fn weight_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let net = TaskNetwork::random(3, 1);
        net.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..6], b"RLNET1");
        assert_eq!(bytes.len(), 6 + 8 * net.param_count());
        assert_eq!(TaskNetwork::load(&path).unwrap(), net);
        assert!(TaskNetwork::from_bytes(b"RLNET0").is_err());
        assert!(TaskNetwork::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn cosine_schedule_shape() {
        assert_eq!(scheduled_lr(1.0, 5, 100, None), 1.0);
        assert!(scheduled_lr(1.0, 0, 100, Some(0.1)) < 0.2);
        assert!((scheduled_lr(1.0, 10, 100, Some(0.1)) - 1.0).abs() < 1e-12);
        assert!(scheduled_lr(1.0, 99, 100, Some(0.1)) < 0.01);
    }
}
