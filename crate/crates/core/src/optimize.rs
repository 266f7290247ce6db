//! Design losses, AdamW with per-order learning rates, feasibility
//! projection, and the imaging / task-driven / end-to-end design loops.
//!
//! Each step traces every field on its own tape (fields may run in
//! parallel) and reduces the per-field gradients in field order, so the
//! result does not depend on the thread count.

use std::path::Path;

use rayon::prelude::*;

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::imaging::{backward_to_psf, capture_with_kernels, convolve_patch, field_kernels, tag_field, ImagePatch, Kernel};
use crate::optics::{
    AsphericSurface, ApertureStop, Element, LensSystem, Material, ParamId, ParamKind, Sensor, MIN_GAP_MM, WAVELENGTHS_RGB,
};
use crate::psf::{psf_rgb, rms_radius, PsfConfig};
use crate::raytrace::{mix_seed, sample_pupil_rays, trace_to_sensor, Trace};
use crate::tasknet::{
    evaluate, evaluate_captures, generate_glyphs, generate_glyphs_from, loss_ce, scheduled_lr, FlatAdam, GlyphSpec, Split, TaskNetwork,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Per even order learning-rate factor for α₆, α₈, α₁₀.
pub const ALPHA_LR_DECAY: f64 = 0.02;
pub const PAPER_HALF_FOV_DEG: f64 = 34.4;
pub const PAPER_STOP_RADIUS_MM: f64 = 0.52;
/// f = F/# · 2 · stop radius at F/2.8.
pub const PAPER_FOCAL_MM: f64 = 2.912;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub members: Vec<ParamId>,
    pub lr: f64,
    pub weight_decay: f64,
}

/// Curvature, position and α₄ at `base_lr`; α_k at `base_lr · 0.02^((k−4)/2)`.
pub fn default_param_groups(system: &LensSystem, base_lr: f64, include_conic: bool) -> Vec<ParamGroup> {
    let ids = system.optimizable_params(include_conic);
    let mut groups: Vec<ParamGroup> = Vec::new();
    let mut push = |name: &str, lr: f64, pick: &dyn Fn(ParamKind) -> bool| {
        let members: Vec<ParamId> = ids.iter().copied().filter(|p| pick(p.kind)).collect();
        if !members.is_empty() {
            groups.push(ParamGroup { name: name.into(), members, lr, weight_decay: 0.0 });
        }
    };
    push("curvature_position_a4", base_lr, &|k| matches!(k, ParamKind::Curvature | ParamKind::Vertex | ParamKind::Alpha4));
    for (kind, name) in [(ParamKind::Alpha6, "a6"), (ParamKind::Alpha8, "a8"), (ParamKind::Alpha10, "a10")] {
        let k = kind.alpha_order().unwrap() as i32;
        push(name, base_lr * ALPHA_LR_DECAY.powi((k - 4) / 2), &|p| p == kind);
    }
    push("conic", base_lr, &|k| k == ParamKind::Conic);
    groups
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub handles: Vec<ParamId>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(handles: Vec<ParamId>) -> Self {
        let n = handles.len();
        AdamState { handles, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn for_groups(groups: &[ParamGroup]) -> Self {
        Self::new(groups.iter().flat_map(|g| g.members.iter().copied()).collect())
    }
}

/// One decoupled-weight-decay Adam update followed by [`project`].
/// `grads` must list exactly the handles of `state`; `lr_scale` multiplies
/// every group's rate (schedules).
pub fn adamw_step(system: &mut LensSystem, state: &mut AdamState, groups: &[ParamGroup], grads: &[(ParamId, f64)], lr_scale: f64) -> Result<()> {
    if grads.len() != state.handles.len() {
        return Err(Error::Usage(format!("{} gradients for {} parameters", grads.len(), state.handles.len())));
    }
    let mut lr = vec![f64::NAN; state.handles.len()];
    let mut wd = vec![0.0; state.handles.len()];
    for g in groups {
        for m in &g.members {
            let slot = state.handles.iter().position(|h| h == m).ok_or_else(|| Error::UnknownParameter(m.to_string()))?;
            lr[slot] = g.lr;
            wd[slot] = g.weight_decay;
        }
    }
    if let Some(slot) = lr.iter().position(|v| v.is_nan()) {
        return Err(Error::UnknownParameter(format!("{} has no parameter group", state.handles[slot])));
    }
    let mut ordered = vec![0.0; grads.len()];
    for &(id, g) in grads {
        let slot = state.handles.iter().position(|h| *h == id).ok_or_else(|| Error::UnknownParameter(id.to_string()))?;
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { param: id.to_string(), term: "total".into() });
        }
        ordered[slot] = g;
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (i, &id) in state.handles.iter().enumerate() {
        let g = ordered[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let step_lr = lr[i] * lr_scale;
        let p = system.param(id);
        let update = state.m[i] / c1 / ((state.v[i] / c2).sqrt() + ADAM_EPS);
        system.set_param(id, p - step_lr * (update + wd[i] * p));
    }
    project(system)
}

/// Restores feasibility after an update: keeps each sag real over its clear
/// aperture and pushes movable vertices apart to the minimum axial gap
/// (stop and sensor stay put).
pub fn project(system: &mut LensSystem) -> Result<()> {
    for s in &mut system.surfaces {
        let q = 1.0 + s.conic;
        if q > 0.0 {
            let limit = 0.995 / (s.semi_diameter * q.sqrt());
            s.curvature = s.curvature.clamp(-limit, limit);
        }
    }
    let seq = system.sequence();
    let mut z: Vec<f64> = seq.iter().map(|e| e.1).collect();
    let movable: Vec<bool> = seq.iter().map(|e| matches!(e.0, Element::Surface(_))).collect();
    for k in 1..z.len() {
        if movable[k] {
            z[k] = z[k].max(z[k - 1] + MIN_GAP_MM);
        }
    }
    for k in (0..z.len() - 1).rev() {
        if movable[k] {
            z[k] = z[k].min(z[k + 1] - MIN_GAP_MM);
        }
    }
    for (k, (e, _)) in seq.iter().enumerate() {
        if let Element::Surface(i) = e {
            system.surfaces[*i].vertex_z = z[k];
        }
    }
    resolve_edge_gaps(system);
    system.validate().map_err(|e| Error::Infeasible(e.to_string()))
}

const EDGE_SAMPLES: usize = 24;

/// Sag of a sequence entry at radius r, flat for the stop and sensor.
fn entry_sag(system: &LensSystem, e: &Element, scale: f64, r: f64) -> Option<f64> {
    match e {
        Element::Surface(i) => {
            let mut s = system.surfaces[*i].clone();
            s.curvature *= scale;
            s.alpha.iter_mut().for_each(|a| *a *= scale);
            s.sag(r * r)
        }
        _ => Some(0.0),
    }
}

fn entry_radius(system: &LensSystem, e: &Element) -> f64 {
    match e {
        Element::Surface(i) => system.surfaces[*i].semi_diameter,
        Element::Stop => system.stop.radius,
        _ => f64::INFINITY,
    }
}

/// Smallest gap between two neighbouring entries over their common aperture.
fn edge_gap(system: &LensSystem, a: (&Element, f64), b: (&Element, f64), sa: f64, sb: f64) -> Option<f64> {
    let rmax = entry_radius(system, a.0).min(entry_radius(system, b.0));
    if !rmax.is_finite() {
        return Some(b.1 - a.1);
    }
    let mut least = f64::INFINITY;
    for j in 0..=EDGE_SAMPLES {
        let r = rmax * j as f64 / EDGE_SAMPLES as f64;
        let gap = b.1 + entry_sag(system, b.0, sb, r)? - a.1 - entry_sag(system, a.0, sa, r)?;
        least = least.min(gap);
    }
    Some(least)
}

fn set_z(system: &mut LensSystem, e: &Element, z: f64) {
    if let Element::Surface(i) = e {
        system.surfaces[*i].vertex_z = z;
    }
}

/// Neighbouring surfaces must not cross inside their common aperture. A
/// violating pair is first pulled apart using the slack of its outer
/// neighbours; what remains is removed by scaling the pair's shape
/// (curvature and aspheric terms) toward flat.
fn resolve_edge_gaps(system: &mut LensSystem) {
    let need = MIN_GAP_MM - 1e-12;
    for _ in 0..16 {
        let mut changed = false;
        for k in 0..system.sequence().len() - 1 {
            let seq = system.sequence();
            let at = |k: usize| (&seq[k].0, seq[k].1);
            let deficit = match edge_gap(system, at(k), at(k + 1), 1.0, 1.0) {
                Some(g) if g >= need => continue,
                Some(g) => MIN_GAP_MM - g,
                None => f64::INFINITY,
            };
            let slack = |lo: usize, movable: &Element| -> f64 {
                if !matches!(movable, Element::Surface(_)) || lo + 1 >= seq.len() {
                    return 0.0;
                }
                edge_gap(system, at(lo), at(lo + 1), 1.0, 1.0).map_or(0.0, |g| (g - MIN_GAP_MM).max(0.0))
            };
            let behind = if k == 0 { 0.0 } else { slack(k - 1, &seq[k].0) };
            let ahead = slack(k + 1, &seq[k + 1].0);
            if deficit.is_finite() && behind + ahead > 0.0 {
                let back = (0.5 * deficit).min(ahead);
                let front = (deficit - back).min(behind);
                let back = (deficit - front).min(ahead);
                set_z(system, &seq[k].0, seq[k].1 - front);
                set_z(system, &seq[k + 1].0, seq[k + 1].1 + back);
                changed = true;
                let seq = system.sequence();
                if edge_gap(system, (&seq[k].0, seq[k].1), (&seq[k + 1].0, seq[k + 1].1), 1.0, 1.0).is_some_and(|g| g >= need) {
                    continue;
                }
            }
            let seq = system.sequence();
            let (a, b) = ((&seq[k].0, seq[k].1), (&seq[k + 1].0, seq[k + 1].1));
            let ok = |s: f64| edge_gap(system, a, b, s, s).is_some_and(|g| g >= need);
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if ok(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            for e in [a.0, b.0] {
                if let Element::Surface(i) = e {
                    let s = &mut system.surfaces[*i];
                    s.curvature *= lo;
                    s.alpha.iter_mut().for_each(|x| *x *= lo);
                }
            }
            changed = true;
        }
        if !changed {
            break;
        }
    }
}

/// Mean RMS spot radius over traces.
pub fn spot_loss<R: Scalar>(traces: &[Trace<R>]) -> Result<R> {
    let mut terms = Vec::with_capacity(traces.len());
    for t in traces {
        let rms = rms_radius(&t.hits).map_err(|_| Error::DegenerateTrace {
            field_deg: t.field_angle_deg,
            wavelength_um: t.wavelength,
            valid: t.valid_count(),
        })?;
        terms.push(rms);
    }
    let w = 1.0 / terms.len().max(1) as f64;
    Ok(R::weighted_sum(&terms.iter().map(|&t| (t, w)).collect::<Vec<_>>()))
}

/// Σ relu(cos θ_max − cos θ)² and the number of events summed.
pub fn angle_penalty_sum<R: Scalar>(incidence_cos: &[R], cos_max: f64) -> (R, usize) {
    let terms: Vec<(R, f64)> = incidence_cos
        .iter()
        .filter(|c| c.value() < cos_max)
        .map(|&c| ((-c + cos_max).sq(), 1.0))
        .collect();
    (R::weighted_sum(&terms), incidence_cos.len())
}

/// `λ · mean relu(cos θ_max − cos θ)²` over incidence events.
pub fn angle_penalty<R: Scalar>(incidence_cos: &[R], theta_max_deg: f64, weight: f64) -> R {
    let (sum, n) = angle_penalty_sum(incidence_cos, theta_max_deg.to_radians().cos());
    if n == 0 {
        R::constant(0.0)
    } else {
        sum * (weight / n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Imaging,
    Task,
    E2e,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Freeze {
    Lens,
    Net,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignConfig {
    pub mode: Mode,
    /// Ascending, starting at 0.
    pub field_angles: Vec<f64>,
    pub rays_train: usize,
    pub rays_eval: usize,
    pub iterations: usize,
    pub seed: u64,
    pub angle_penalty_weight: f64,
    pub angle_threshold_deg: f64,
    pub min_gap: f64,
    pub base_lr: f64,
    pub include_conic: bool,
    /// Glyph patches per step; each is rendered at every field.
    pub batch_size: usize,
    pub kernel_size: usize,
    pub psf_pitch: f64,
    pub net_lr: f64,
    /// Cosine schedule warm-up fraction for network updates; off by default.
    pub net_cosine_warmup: Option<f64>,
    /// Evaluate every n steps (0 = never).
    pub eval_every: usize,
    pub eval_size: usize,
    pub max_consecutive_failures: usize,
}

pub fn linspace_fields(half_fov_deg: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..count).map(|i| half_fov_deg * i as f64 / (count - 1) as f64).collect(),
    }
}

/// Toy patch pitch: 20 sensor pixels, so a 31-px kernel spans ±0.56 mm
/// and still holds the blur of a flat from-scratch lens.
pub fn toy_psf_pitch(sensor: &Sensor) -> f64 {
    sensor.pixel_pitch * 20.0
}

impl DesignConfig {
    pub fn new(mode: Mode, iterations: usize, seed: u64) -> Self {
        DesignConfig {
            mode,
            field_angles: linspace_fields(PAPER_HALF_FOV_DEG, 9),
            rays_train: 256,
            rays_eval: 4096,
            iterations,
            seed,
            angle_penalty_weight: 0.1,
            angle_threshold_deg: 60.0,
            min_gap: MIN_GAP_MM,
            // Adam moves a parameter about lr per step; at 1e-4 a curvature
            // travels at most 0.2/mm in 2000 steps, short of focusing from flat
            base_lr: 1e-3,
            include_conic: false,
            batch_size: 4,
            kernel_size: 31,
            psf_pitch: toy_psf_pitch(&Sensor::standard(1.0)),
            net_lr: 1e-4,
            net_cosine_warmup: None,
            eval_every: 0,
            eval_size: 200,
            max_consecutive_failures: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.field_angles.is_empty() || self.field_angles[0] != 0.0 || self.field_angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Usage("field angles must be ascending and start at 0".into()));
        }
        if self.rays_eval < self.rays_train || self.rays_train < 2 {
            return Err(Error::Usage(format!("need 2 <= rays_train ({}) <= rays_eval ({})", self.rays_train, self.rays_eval)));
        }
        if self.min_gap != MIN_GAP_MM {
            return Err(Error::Usage(format!("min_gap is fixed at {MIN_GAP_MM} mm")));
        }
        if self.batch_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Usage("batch_size must be >= 1 and kernel_size odd".into()));
        }
        Ok(())
    }

    pub fn psf_config(&self, rays: usize, seed: u64) -> PsfConfig {
        PsfConfig { kernel_size: self.kernel_size, pitch: self.psf_pitch, rays, seed }
    }

    fn cos_max(&self) -> f64 {
        self.angle_threshold_deg.to_radians().cos()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub main_loss: f64,
    pub angle_penalty: f64,
    pub skipped: bool,
    pub eval: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<StepRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Losses of completed steps.
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().filter(|r| !r.skipped).map(|r| r.loss).collect()
    }

    /// Trailing moving average of the completed-step losses.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let l = self.losses();
        let w = window.max(1);
        (0..l.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                l[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let to_err = |e: csv::Error| Error::io(path, e.into());
        let mut w = csv::Writer::from_path(path).map_err(to_err)?;
        w.write_record(["step", "loss", "main_loss", "angle_penalty", "skipped", "eval"]).map_err(to_err)?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                r.loss.to_string(),
                r.main_loss.to_string(),
                r.angle_penalty.to_string(),
                (r.skipped as u8).to_string(),
                r.eval.map(|e| e.to_string()).unwrap_or_default(),
            ])
            .map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug)]
pub struct DesignOutcome {
    pub system: LensSystem,
    pub history: History,
    /// Set when the run stopped after too many consecutive failed steps.
    pub aborted: Option<Error>,
}

/// Per-field contribution before the cross-field reduction.
struct FieldGrad {
    main: f64,
    main_grad: Vec<f64>,
    pen: f64,
    pen_grad: Vec<f64>,
    pen_count: usize,
    net_grad: Option<Vec<f64>>,
}

fn check_finite(ids: &[ParamId], grad: &[f64], term: &str) -> Result<()> {
    match grad.iter().position(|g| !g.is_finite()) {
        Some(i) => Err(Error::NonFiniteGradient { param: ids[i].to_string(), term: term.into() }),
        None => Ok(()),
    }
}

fn finish_field<'t>(
    tape: &'t Tape,
    leaves: &[Var<'t>],
    main: &[(Var<'t>, f64)],
    main_value: f64,
    traces: &[Trace<Var<'t>>],
    cos_max: f64,
    net_grad: Option<Vec<f64>>,
) -> Result<FieldGrad> {
    let cos: Vec<Var<'t>> = traces.iter().flat_map(|t| t.incidence_cos.iter().copied()).collect();
    let (pen, pen_count) = angle_penalty_sum(&cos, cos_max);
    let lanes = tape.backward_lanes(&[main, &[(pen, 1.0)]])?;
    let main_grad: Vec<f64> = leaves.iter().map(|&v| lanes[0].wrt(v)).collect();
    let pen_grad: Vec<f64> = leaves.iter().map(|&v| lanes[1].wrt(v)).collect();
    Ok(FieldGrad { main: main_value, main_grad, pen: pen.value(), pen_grad, pen_count, net_grad })
}

fn imaging_field(system: &LensSystem, ids: &[ParamId], angle: f64, rays: usize, seed: u64, cos_max: f64) -> Result<FieldGrad> {
    let tape = Tape::new();
    let (params, leaves) = system.lift_on_tape(&tape, ids);
    let mut traces = Vec::with_capacity(3);
    for wl in WAVELENGTHS_RGB {
        let bundle = sample_pupil_rays(system, angle, wl, rays, seed);
        traces.push(trace_to_sensor(system, &params, &bundle)?);
    }
    let loss = spot_loss(&traces)?;
    finish_field(&tape, &leaves, &[(loss, 1.0)], loss.value(), &traces, cos_max, None)
}

#[allow(clippy::too_many_arguments)]
fn task_field(
    system: &LensSystem,
    ids: &[ParamId],
    net: &TaskNetwork,
    patches: &[ImagePatch],
    angle: f64,
    psf: &PsfConfig,
    cos_max: f64,
    want_net: bool,
) -> Result<FieldGrad> {
    let tape = Tape::new();
    let (params, leaves) = system.lift_on_tape(&tape, ids);
    let rgb = psf_rgb(system, &params, angle, psf).map_err(|e| tag_field(e, angle))?;
    let kernel = Kernel::from_psf(&rgb.channels)?;
    let per_patch: Vec<Result<(f64, [Vec<f64>; 3], Option<Vec<f64>>)>> = patches
        .par_iter()
        .map(|p| {
            let label = p.label.ok_or_else(|| Error::Usage("unlabelled patch".into()))?;
            let capture = convolve_patch(p, &kernel)?;
            let cache = net.forward(&capture)?;
            let loss = loss_ce(&cache.probs, label);
            let (dx, ng) = net.backward(&cache, label, want_net)?;
            let dk = backward_to_psf(&dx, p, kernel.size)?;
            Ok((loss, dk, ng.map(|g| g.flat)))
        })
        .collect();
    let ks2 = kernel.size * kernel.size;
    let mut loss = 0.0;
    let mut dk = [vec![0.0; ks2], vec![0.0; ks2], vec![0.0; ks2]];
    let mut net_grad = want_net.then(|| vec![0.0; net.param_count()]);
    for r in per_patch {
        let (l, g, ng) = r?;
        loss += l;
        for c in 0..3 {
            dk[c].iter_mut().zip(&g[c]).for_each(|(a, b)| *a += b);
        }
        if let (Some(acc), Some(ng)) = (net_grad.as_mut(), ng) {
            acc.iter_mut().zip(&ng).for_each(|(a, b)| *a += b);
        }
    }
    let mut seeds = Vec::new();
    for c in 0..3 {
        for (cell, &g) in rgb.channels[c].cells.iter().zip(&dk[c]) {
            if g != 0.0 && !cell.is_constant() {
                seeds.push((*cell, g));
            }
        }
    }
    finish_field(&tape, &leaves, &seeds, loss, &rgb.traces, cos_max, net_grad)
}

fn is_degenerate(e: &Error) -> bool {
    matches!(
        e,
        Error::DegeneratePsf { .. }
            | Error::DegenerateTrace { .. }
            | Error::TooFewHits(_)
            | Error::ChiefRay { .. }
            | Error::NonFiniteGradient { .. }
    )
}

/// Reduced step result.
struct StepGrad {
    loss: f64,
    main: f64,
    pen: f64,
    grad: Vec<f64>,
    net_grad: Option<Vec<f64>>,
}

fn reduce(ids: &[ParamId], fields: Vec<FieldGrad>, main_scale: f64, pen_weight: f64, main_term: &str) -> Result<StepGrad> {
    let n = ids.len();
    let pen_count: usize = fields.iter().map(|f| f.pen_count).sum();
    let pen_scale = if pen_count == 0 { 0.0 } else { pen_weight / pen_count as f64 };
    let (mut main, mut pen) = (0.0, 0.0);
    let mut main_grad = vec![0.0; n];
    let mut pen_grad = vec![0.0; n];
    let mut net_grad: Option<Vec<f64>> = None;
    for f in fields {
        main += f.main * main_scale;
        pen += f.pen * pen_scale;
        for i in 0..n {
            main_grad[i] += f.main_grad[i] * main_scale;
            pen_grad[i] += f.pen_grad[i] * pen_scale;
        }
        if let Some(g) = f.net_grad {
            let acc = net_grad.get_or_insert_with(|| vec![0.0; g.len()]);
            acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b * main_scale);
        }
    }
    check_finite(ids, &main_grad, main_term)?;
    check_finite(ids, &pen_grad, "angle_penalty")?;
    let grad = main_grad.iter().zip(&pen_grad).map(|(a, b)| a + b).collect();
    Ok(StepGrad { loss: main + pen, main, pen, grad, net_grad })
}

fn step_seed(seed: u64, step: usize) -> u64 {
    mix_seed(seed, 0x5354_4550_0000_0000 ^ step as u64)
}

fn imaging_step(system: &LensSystem, ids: &[ParamId], cfg: &DesignConfig, step: usize) -> Result<StepGrad> {
    let seed = step_seed(cfg.seed, step);
    let cos_max = cfg.cos_max();
    let fields: Vec<Result<FieldGrad>> = cfg
        .field_angles
        .par_iter()
        .map(|&a| imaging_field(system, ids, a, cfg.rays_train, seed, cos_max))
        .collect();
    let fields = fields.into_iter().collect::<Result<Vec<_>>>()?;
    reduce(ids, fields, 1.0 / cfg.field_angles.len() as f64, cfg.angle_penalty_weight, "spot")
}

fn task_step(system: &LensSystem, ids: &[ParamId], net: &TaskNetwork, patches: &[ImagePatch], cfg: &DesignConfig, step: usize, want_net: bool) -> Result<StepGrad> {
    let psf = cfg.psf_config(cfg.rays_train, step_seed(cfg.seed, step));
    let cos_max = cfg.cos_max();
    let fields: Vec<Result<FieldGrad>> = cfg
        .field_angles
        .par_iter()
        .map(|&a| task_field(system, ids, net, patches, a, &psf, cos_max, want_net))
        .collect();
    let fields = fields.into_iter().collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / (cfg.field_angles.len() * patches.len()) as f64;
    reduce(ids, fields, scale, cfg.angle_penalty_weight, "task")
}

/// Mean RMS spot radius over fields and the three wavelengths (no tape).
pub fn eval_rms(system: &LensSystem, field_angles: &[f64], rays: usize, seed: u64) -> Result<f64> {
    let params = system.params_f64();
    let per: Vec<Result<f64>> = field_angles
        .par_iter()
        .map(|&a| {
            let traces = WAVELENGTHS_RGB
                .iter()
                .map(|&wl| trace_to_sensor(system, &params, &sample_pupil_rays(system, a, wl, rays, seed)))
                .collect::<Result<Vec<_>>>()?;
            spot_loss(&traces)
        })
        .collect();
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Accuracy of `net` on `n` validation glyphs rendered through `system`
/// at every field (4096-ray PSFs by default config).
pub fn eval_accuracy(system: &LensSystem, net: &TaskNetwork, spec: &GlyphSpec, n: usize, cfg: &DesignConfig) -> Result<f64> {
    let patches = generate_glyphs(spec, n, Split::Val);
    let kernels = field_kernels(system, &cfg.field_angles, &cfg.psf_config(cfg.rays_eval, cfg.seed))?;
    let captures = capture_with_kernels(&patches, &cfg.field_angles, &kernels)?;
    evaluate_captures(net, &captures)
}

/// Shared optimisation loop. `net` is updated only when `train_net` is set.
fn run_loop(
    init: &LensSystem,
    cfg: &DesignConfig,
    lens_frozen: bool,
    mut net: Option<(&mut TaskNetwork, bool, &GlyphSpec)>,
    keep_best: bool,
) -> Result<DesignOutcome> {
    cfg.validate()?;
    let mut system = init.clone();
    let groups = default_param_groups(&system, cfg.base_lr, cfg.include_conic);
    let mut state = AdamState::for_groups(&groups);
    let ids = state.handles.clone();
    let want_net = net.as_ref().map(|n| n.1).unwrap_or(false);
    let mut net_adam = net.as_ref().map(|(n, _, _)| FlatAdam::new(n.param_count(), cfg.net_lr, 0.0));
    let mut history = History::default();
    let mut best: Option<(f64, LensSystem)> = None;
    let mut failures = 0;
    let mut aborted = None;
    let mut fixed_kernels: Option<Vec<Kernel>> = None;
    // lens and optimiser state before the last update, restored when the
    // update lands in a degenerate configuration
    let mut before_update: Option<(LensSystem, AdamState)> = None;
    let mut lr_scale = 1.0;
    for step in 0..cfg.iterations {
        let result = match net.as_mut() {
            None => imaging_step(&system, &ids, cfg, step),
            Some((n, _, spec)) => {
                let patches = generate_glyphs_from(spec, (step * cfg.batch_size) as u64, cfg.batch_size, Split::Train);
                if lens_frozen {
                    net_only_step(&system, n, &patches, cfg, &mut fixed_kernels)
                } else {
                    task_step(&system, &ids, n, &patches, cfg, step, want_net)
                }
            }
        };
        match result {
            Ok(g) => {
                failures = 0;
                if keep_best && best.as_ref().map(|b| g.loss < b.0).unwrap_or(true) {
                    best = Some((g.loss, system.clone()));
                }
                if !lens_frozen {
                    let grads: Vec<(ParamId, f64)> = ids.iter().copied().zip(g.grad.iter().copied()).collect();
                    before_update = Some((system.clone(), state.clone()));
                    adamw_step(&mut system, &mut state, &groups, &grads, lr_scale)?;
                    lr_scale = (lr_scale * LR_RECOVERY).min(1.0);
                }
                if let (Some((n, true, _)), Some(adam), Some(ng)) = (net.as_mut(), net_adam.as_mut(), g.net_grad.as_ref()) {
                    let mut flat = n.to_flat();
                    let lr = scheduled_lr(cfg.net_lr, step, cfg.iterations, cfg.net_cosine_warmup);
                    adam.step(&mut flat, ng, lr);
                    n.set_flat(&flat);
                }
                let eval = if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
                    match net.as_ref() {
                        None => eval_rms(&system, &cfg.field_angles, cfg.rays_eval, cfg.seed).ok(),
                        Some((n, _, spec)) => eval_accuracy(&system, n, spec, cfg.eval_size, cfg).ok(),
                    }
                } else {
                    None
                };
                log::debug!("step {step} loss {:.6e} main {:.6e} penalty {:.3e}", g.loss, g.main, g.pen);
                history.records.push(StepRecord { step, loss: g.loss, main_loss: g.main, angle_penalty: g.pen, skipped: false, eval });
            }
            Err(e) if is_degenerate(&e) => {
                failures += 1;
                log::warn!("step {step} skipped: {e}");
                if let Some((sys, st)) = before_update.take() {
                    system = sys;
                    state = st;
                    lr_scale *= 0.5;
                }
                history.records.push(StepRecord { step, loss: f64::NAN, main_loss: f64::NAN, angle_penalty: f64::NAN, skipped: true, eval: None });
                if failures >= cfg.max_consecutive_failures {
                    aborted = Some(Error::DesignAborted { step, failures, last: e.to_string() });
                    break;
                }
            }
            Err(e) => return Err(e),
        }
    }
    let system = match (keep_best, best) {
        (true, Some((_, s))) => s,
        _ => system,
    };
    Ok(DesignOutcome { system, history, aborted })
}

/// Per-step growth of the update scale back towards 1 after a backtrack.
const LR_RECOVERY: f64 = 1.05;

/// Network update on captures through a fixed lens (kernels are traced
/// once at `rays_eval`).
fn net_only_step(system: &LensSystem, net: &TaskNetwork, patches: &[ImagePatch], cfg: &DesignConfig, cache: &mut Option<Vec<Kernel>>) -> Result<StepGrad> {
    if cache.is_none() {
        *cache = Some(field_kernels(system, &cfg.field_angles, &cfg.psf_config(cfg.rays_eval, cfg.seed))?);
    }
    let kernels = cache.as_ref().unwrap();
    let captures = capture_with_kernels(patches, &cfg.field_angles, kernels)?;
    let images: Vec<ImagePatch> = captures.into_iter().map(|c| c.image).collect();
    let (loss, grad) = crate::tasknet::batch_gradient(net, &images)?;
    Ok(StepGrad { loss, main: loss, pen: 0.0, grad: Vec::new(), net_grad: Some(grad) })
}

/// Classical design: minimise the mean RMS spot (plus angle penalty).
/// Returns the best-by-loss system.
pub fn design_imaging(init: &LensSystem, cfg: &DesignConfig) -> Result<DesignOutcome> {
    run_loop(init, cfg, false, None, true)
}

/// Task-driven design against a frozen network. The network is only read;
/// its weights are checked bit-identical on return.
pub fn design_task(init: &LensSystem, net: &TaskNetwork, spec: &GlyphSpec, cfg: &DesignConfig) -> Result<DesignOutcome> {
    let before: Vec<u64> = net.to_flat().iter().map(|v| v.to_bits()).collect();
    let mut frozen = net.clone();
    let out = run_loop(init, cfg, false, Some((&mut frozen, false, spec)), false)?;
    let after: Vec<u64> = net.to_flat().iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after, "frozen network changed during task design");
    assert_eq!(frozen, *net, "frozen network changed during task design");
    Ok(out)
}

/// End-to-end fine-tuning with optional freezing.
pub fn finetune_e2e(init: &LensSystem, net: &TaskNetwork, spec: &GlyphSpec, cfg: &DesignConfig, freeze: Freeze) -> Result<(DesignOutcome, TaskNetwork)> {
    match freeze {
        Freeze::Net => Ok((design_task(init, net, spec, cfg)?, net.clone())),
        Freeze::Lens => {
            let mut tuned = net.clone();
            let out = run_loop(init, cfg, true, Some((&mut tuned, true, spec)), false)?;
            Ok((out, tuned))
        }
        Freeze::None => {
            let mut tuned = net.clone();
            let out = run_loop(init, cfg, false, Some((&mut tuned, true, spec)), false)?;
            Ok((out, tuned))
        }
    }
}

/// Sharp-image accuracy on the validation split (no lens).
pub fn sharp_accuracy(net: &TaskNetwork, spec: &GlyphSpec, n: usize) -> Result<f64> {
    evaluate(net, &generate_glyphs(spec, n, Split::Val))
}

/// Random starting point: `2·elements` aspheric surfaces behind a stop at
/// z = 0, glass thickness 0.6 mm, equal air gaps, sensor at 1.3·f.
/// Clear apertures follow the half field of view implied by `sensor`.
pub fn init_from_scratch(elements: usize, focal_target: f64, stop_radius: f64, sensor: &Sensor, seed: u64) -> Result<LensSystem> {
    use rand::{Rng, SeedableRng};
    if !(1..=4).contains(&elements) {
        return Err(Error::Usage(format!("element count must be 1..=4, got {elements}")));
    }
    if !(focal_target > 0.0 && stop_radius > 0.0) {
        return Err(Error::Usage("focal target and stop radius must be > 0".into()));
    }
    const GLASS: f64 = 0.6;
    let track = 1.3 * focal_target;
    let air = (track - GLASS * elements as f64) / (elements + 1) as f64;
    if air < MIN_GAP_MM {
        return Err(Error::Infeasible(format!(
            "track {track:.3} mm cannot hold {elements} elements of {GLASS} mm with {MIN_GAP_MM} mm gaps"
        )));
    }
    let tan_fov = sensor.half_diagonal() / focal_target;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x696e_6974));
    let mut surfaces = Vec::with_capacity(2 * elements);
    let mut z = 0.0;
    for e in 0..elements {
        let glass = if e % 2 == 0 { Material::pmma() } else { Material::polycarbonate() };
        for (side, material) in [(0, glass), (1, Material::air())] {
            z += if side == 0 { air } else { GLASS };
            let semi = stop_radius + z * tan_fov + 0.05;
            surfaces.push(AsphericSurface::spherical(rng.gen_range(-0.02..0.02), z, semi, material));
        }
    }
    let sensor = Sensor { z: track, ..sensor.clone() };
    LensSystem::new(
        format!("scratch-{elements}e-seed{seed}"),
        surfaces,
        ApertureStop { index: 0, vertex_z: 0.0, radius: stop_radius },
        sensor,
    )
}

/// From-scratch system with the default geometry (F/2.8, 4 mm diagonal).
pub fn init_paper_geometry(elements: usize, seed: u64) -> Result<LensSystem> {
    init_from_scratch(elements, PAPER_FOCAL_MM, PAPER_STOP_RADIUS_MM, &Sensor::standard(1.3 * PAPER_FOCAL_MM), seed)
}
