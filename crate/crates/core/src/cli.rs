//! Command-line front end. Every subcommand writes its results through the
//! `io` formats; stdout carries only the resolved config and written paths.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::imaging::{read_ppm, simulate_capture_batch, write_ppm, Capture};
use crate::io::{self, HistorySummary, Report, ReportPayload};
use crate::optics::LensSystem;
use crate::optimize::{self, DesignConfig, Freeze, Mode};
use crate::psf::{psf_rgb, PsfConfig};
use crate::tasknet::{self, generate_glyphs, GlyphSpec, Split, TaskNetwork, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Parser, Serialize)]
#[command(name = "difflens", version, about = "Differentiable lens design toolkit")]
pub struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads, 0 = one per core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Spot statistics, PSFs and chart PSNR per field.
    Analyze(AnalyzeArgs),
    /// RGB PSF of one field as PPM plus CSV.
    Psf(PsfArgs),
    /// Simulated capture of an image at one field.
    Render(RenderArgs),
    /// Classical spot-size design from scratch.
    DesignImaging(DesignImagingArgs),
    /// Train the glyph classifier on sharp images.
    TrainNet(TrainNetArgs),
    /// Task-driven design against a frozen classifier.
    DesignTask(DesignTaskArgs),
    /// Joint lens/network fine-tuning.
    Finetune(FinetuneArgs),
    /// Classifier accuracy on simulated captures at every field.
    Eval(EvalArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub lens: PathBuf,
    #[arg(long, default_value_t = 9)]
    pub fields: usize,
    #[arg(long, default_value_t = optimize::PAPER_HALF_FOV_DEG)]
    pub fov: f64,
    #[arg(long, default_value_t = 4096)]
    pub rays: usize,
    /// Test chart (PPM); glyphs are used when absent.
    #[arg(long)]
    pub chart: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub chart_glyphs: usize,
    /// Directory for per-field PSF, spot and layout exports.
    #[arg(long)]
    pub export_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PsfArgs {
    #[arg(long)]
    pub lens: PathBuf,
    /// Field angle in degrees.
    #[arg(long, default_value_t = 0.0)]
    pub fov: f64,
    #[arg(long, default_value_t = 4096)]
    pub rays: usize,
    #[arg(long, default_value_t = crate::psf::DEFAULT_KERNEL_SIZE)]
    pub kernel: usize,
    /// PSF cell pitch in mm; defaults to the sensor pixel pitch.
    #[arg(long)]
    pub pitch: Option<f64>,
    /// Also write the sensor hits as CSV.
    #[arg(long)]
    pub spot: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RenderArgs {
    #[arg(long)]
    pub lens: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub fov: f64,
    #[arg(long, default_value_t = 4096)]
    pub rays: usize,
    #[arg(long, default_value_t = crate::psf::DEFAULT_KERNEL_SIZE)]
    pub kernel: usize,
    #[arg(long)]
    pub pitch: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DesignArgs {
    #[arg(long, default_value_t = 2)]
    pub elements: usize,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    /// Start from this lens instead of a random one.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Learning rate of curvature, position and a4.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub rays_train: Option<usize>,
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Summary report of the designed lens.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DesignImagingArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub design: DesignArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainNetArgs {
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    pub n_val: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DesignTaskArgs {
    #[arg(long)]
    pub net: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub design: DesignArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FreezeArg {
    Lens,
    Net,
    None,
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub lens: PathBuf,
    #[arg(long)]
    pub net: PathBuf,
    #[arg(long, value_enum, default_value_t = FreezeArg::None)]
    pub freeze: FreezeArg,
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub net_lr: Option<f64>,
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub out_lens: Option<PathBuf>,
    #[arg(long)]
    pub out_net: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub lens: PathBuf,
    #[arg(long)]
    pub net: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 4096)]
    pub rays: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 2 on usage errors, 1 on runtime failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}

/// One-line machine-readable error.
pub fn error_line(e: &Error) -> String {
    format!("error: kind={} msg={}", e.kind(), e.to_string().replace('\n', " "))
}

pub fn execute(cli: &Cli) -> Result<()> {
    if !cli.quiet {
        let cfg = serde_json::to_string(cli).map_err(|e| Error::Usage(e.to_string()))?;
        println!("config: {cfg}");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli))
}

fn dispatch(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    let say = |path: &Path| {
        if !cli.quiet {
            println!("wrote {}", path.display());
        }
    };
    match &cli.command {
        Command::Analyze(a) => analyze(a, seed, &say),
        Command::Psf(a) => psf(a, seed, &say),
        Command::Render(a) => render(a, seed, &say),
        Command::DesignImaging(a) => design(&a.design, None, seed, "design-imaging", &say),
        Command::TrainNet(a) => train_net(a, seed, &say),
        Command::DesignTask(a) => {
            let net = TaskNetwork::load(&a.net)?;
            design(&a.design, Some(&net), seed, "design-task", &say)
        }
        Command::Finetune(a) => finetune(a, seed, &say),
        Command::Eval(a) => eval(a, seed, &say),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{what} file {} does not exist", path.display())))
    }
}

fn load_lens(path: &Path) -> Result<LensSystem> {
    require_file(path, "lens")?;
    io::load_lens(path)
}

fn load_net(path: &Path) -> Result<TaskNetwork> {
    require_file(path, "network")?;
    TaskNetwork::load(path)
}

fn glyph_spec(seed: u64) -> GlyphSpec {
    GlyphSpec { seed, ..GlyphSpec::default() }
}

fn psf_config(system: &LensSystem, kernel: usize, pitch: Option<f64>, rays: usize, seed: u64) -> PsfConfig {
    PsfConfig { kernel_size: kernel, pitch: pitch.unwrap_or(system.sensor.pixel_pitch), rays, seed }
}

/// Toy design config keyed to the lens sensor.
fn design_config(mode: Mode, iters: usize, seed: u64, system: &LensSystem) -> DesignConfig {
    DesignConfig { psf_pitch: optimize::toy_psf_pitch(&system.sensor), ..DesignConfig::new(mode, iters, seed) }
}

fn analyze(a: &AnalyzeArgs, seed: u64, say: &dyn Fn(&Path)) -> Result<()> {
    if a.fields == 0 || a.rays < 2 {
        return Err(Error::Usage("--fields must be >= 1 and --rays >= 2".into()));
    }
    let system = load_lens(&a.lens)?;
    let fields = optimize::linspace_fields(a.fov, a.fields);
    let chart = match &a.chart {
        Some(p) => {
            require_file(p, "chart")?;
            vec![read_ppm(p)?]
        }
        None => generate_glyphs(&glyph_spec(seed), a.chart_glyphs, Split::Val),
    };
    let cfg = design_config(Mode::Imaging, 0, seed, &system).psf_config(a.rays, seed);
    let payload = io::analyze(&system, &fields, a.rays, seed, Some((&chart, &cfg)))?;
    if let Some(dir) = &a.export_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let params = system.params_f64();
        for (i, &f) in fields.iter().enumerate() {
            let rgb = psf_rgb(&system, &params, f, &cfg)?;
            let p = dir.join(format!("psf_field{i}.ppm"));
            io::export_psf(&rgb.channels, &p)?;
            say(&p);
            let p = dir.join(format!("spot_field{i}.csv"));
            io::export_spot(&io::trace_field(&system, f, a.rays, seed)?, &p)?;
            say(&p);
        }
        let p = dir.join("layout.svg");
        io::export_layout(&system, a.fov, &p)?;
        say(&p);
    }
    io::export_report(&Report::new("analyze", seed, payload), &a.out)?;
    say(&a.out);
    Ok(())
}

fn psf(a: &PsfArgs, seed: u64, say: &dyn Fn(&Path)) -> Result<()> {
    let system = load_lens(&a.lens)?;
    let cfg = psf_config(&system, a.kernel, a.pitch, a.rays, seed);
    let rgb = psf_rgb(&system, &system.params_f64(), a.fov, &cfg)?;
    io::export_psf(&rgb.channels, &a.out)?;
    say(&a.out);
    if let Some(p) = &a.spot {
        io::export_spot(&rgb.traces, p)?;
        say(p);
    }
    Ok(())
}

fn render(a: &RenderArgs, seed: u64, say: &dyn Fn(&Path)) -> Result<()> {
    let system = load_lens(&a.lens)?;
    require_file(&a.image, "image")?;
    let image = read_ppm(&a.image)?;
    let cfg = psf_config(&system, a.kernel, a.pitch, a.rays, seed);
    let captures = simulate_capture_batch(&system, std::slice::from_ref(&image), &[a.fov], &cfg)?;
    write_ppm(&captures[0].image, &a.out)?;
    say(&a.out);
    Ok(())
}

fn design(a: &DesignArgs, net: Option<&TaskNetwork>, seed: u64, command: &str, say: &dyn Fn(&Path)) -> Result<()> {
    let init = match &a.init {
        Some(p) => load_lens(p)?,
        None => optimize::init_paper_geometry(a.elements, seed)?,
    };
    let mode = if net.is_some() { Mode::Task } else { Mode::Imaging };
    let mut cfg = design_config(mode, a.iters, seed, &init);
    if let Some(lr) = a.lr {
        cfg.base_lr = lr;
    }
    if let Some(r) = a.rays_train {
        cfg.rays_train = r;
    }
    let spec = glyph_spec(seed);
    let out = match net {
        None => optimize::design_imaging(&init, &cfg)?,
        Some(n) => optimize::design_task(&init, n, &spec, &cfg)?,
    };
    if let Some(p) = &a.history {
        out.history.write_csv(p)?;
        say(p);
    }
    io::save_lens(&out.system, &a.out)?;
    say(&a.out);
    if let Some(p) = &a.report {
        let mut payload = io::analyze(&out.system, &cfg.field_angles, cfg.rays_eval, seed, None)?;
        payload.loss_history = HistorySummary::from_history(&out.history, SMOOTHING_WINDOW);
        if let Some(n) = net {
            payload.accuracy = Some(optimize::eval_accuracy(&out.system, n, &spec, cfg.eval_size, &cfg)?);
        }
        io::export_report(&Report::new(command, seed, payload), p)?;
        say(p);
    }
    out.aborted.map_or(Ok(()), Err)
}

/// Window of the moving average reported for loss histories.
const SMOOTHING_WINDOW: usize = 50;

fn train_net(a: &TrainNetArgs, seed: u64, say: &dyn Fn(&Path)) -> Result<()> {
    let mut cfg = TrainConfig { epochs: a.epochs, seed, ..TrainConfig::default() };
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(n) = a.train_size {
        cfg.train_size = n;
    }
    let spec = glyph_spec(seed);
    let net = tasknet::train_classifier(&spec, &cfg, |epoch, loss| log::info!("epoch {epoch} loss {loss:.5}"))?;
    net.save(&a.out)?;
    say(&a.out);
    if let Some(p) = &a.report {
        let payload = ReportPayload { sharp_accuracy: Some(optimize::sharp_accuracy(&net, &spec, a.n_val)?), ..ReportPayload::default() };
        io::export_report(&Report::new("train-net", seed, payload), p)?;
        say(p);
    }
    Ok(())
}

fn finetune(a: &FinetuneArgs, seed: u64, say: &dyn Fn(&Path)) -> Result<()> {
    if a.out_lens.is_none() && a.out_net.is_none() {
        return Err(Error::Usage("finetune needs --out-lens and/or --out-net".into()));
    }
    let system = load_lens(&a.lens)?;
    let net = load_net(&a.net)?;
    let mut cfg = design_config(Mode::E2e, a.iters, seed, &system);
    if let Some(lr) = a.lr {
        cfg.base_lr = lr;
    }
    if let Some(lr) = a.net_lr {
        cfg.net_lr = lr;
    }
    let freeze = match a.freeze {
        FreezeArg::Lens => Freeze::Lens,
        FreezeArg::Net => Freeze::Net,
        FreezeArg::None => Freeze::None,
    };
    let (out, tuned) = optimize::finetune_e2e(&system, &net, &glyph_spec(seed), &cfg, freeze)?;
    if let Some(p) = &a.out_net {
        tuned.save(p)?;
        say(p);
    }
    if let Some(p) = &a.history {
        out.history.write_csv(p)?;
        say(p);
    }
    if let Some(p) = &a.out_lens {
        io::save_lens(&out.system, p)?;
        say(p);
    }
    out.aborted.map_or(Ok(()), Err)
}

/// Per-field and overall accuracy of `net` behind `system`.
pub fn eval_payload(system: &LensSystem, net: &TaskNetwork, spec: &GlyphSpec, n: usize, rays: usize, seed: u64) -> Result<ReportPayload> {
    let mut cfg = design_config(Mode::Task, 0, seed, system);
    cfg.rays_eval = rays;
    let patches = generate_glyphs(spec, n, Split::Val);
    let kernels = crate::imaging::field_kernels(system, &cfg.field_angles, &cfg.psf_config(rays, seed))?;
    let captures = crate::imaging::capture_with_kernels(&patches, &cfg.field_angles, &kernels)?;
    let mut payload = io::analyze(system, &cfg.field_angles, rays, seed, None)?;
    for (i, rep) in payload.fields.iter_mut().enumerate() {
        let at: Vec<Capture> = captures.iter().filter(|c| c.field_index == i).cloned().collect();
        rep.accuracy = Some(tasknet::evaluate_captures(net, &at)?);
    }
    payload.accuracy = Some(tasknet::evaluate_captures(net, &captures)?);
    payload.sharp_accuracy = Some(optimize::sharp_accuracy(net, spec, n)?);
    Ok(payload)
}

fn eval(a: &EvalArgs, seed: u64, say: &dyn Fn(&Path)) -> Result<()> {
    if a.n == 0 {
        return Err(Error::Usage("--n must be >= 1".into()));
    }
    let system = load_lens(&a.lens)?;
    let net = load_net(&a.net)?;
    let payload = eval_payload(&system, &net, &glyph_spec(seed), a.n, a.rays, seed)?;
    io::export_report(&Report::new("eval", seed, payload), &a.out)?;
    say(&a.out);
    Ok(())
}
