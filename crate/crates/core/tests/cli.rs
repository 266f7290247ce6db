use std::path::Path;
use std::process::Command;

use difflens::cli::run;
use difflens::io::{load_report, lens_to_string, save_lens};
use difflens::optics::{LensSystem, Sensor};
use difflens::optimize::init_paper_geometry;
use difflens::tasknet::TaskNetwork;

fn go(args: &[&str]) -> i32 {
    let mut full = vec!["difflens", "--quiet", "--threads", "1"];
    full.extend_from_slice(args);
    run(full)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_2_and_one_line() {
    let bin = env!("CARGO_BIN_EXE_difflens");
    let out = Command::new(bin).args(["psf", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(bin).args(["psf", "--lens", "/nonexistent/lens.json", "--out", "/tmp/x.ppm"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: kind=usage msg="), "{err}");

    let out = Command::new(bin).args(["--help"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let lens = dir.path().join("bad.json");
    std::fs::write(&lens, "{\"version\": \"difflens-lens/1\"}").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_difflens"))
        .args(["psf", "--lens", s(&lens), "--out", s(&dir.path().join("p.ppm"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: kind=parse"), "{err}");
}

#[test]
fn resolved_config_is_printed_unless_quiet() {
    let dir = tempfile::tempdir().unwrap();
    let lens = dir.path().join("l.json");
    save_lens(&init_paper_geometry(2, 0).unwrap(), &lens).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_difflens"))
        .args(["--seed", "3", "psf", "--lens", s(&lens), "--rays", "64", "--out", s(&dir.path().join("p.ppm"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let first = text.lines().next().unwrap();
    assert!(first.starts_with("config: {") && first.contains("\"seed\":3") && first.contains("\"rays\":64"), "{first}");
}

#[test]
fn design_with_zero_iterations_returns_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lens.json");
    let hist = dir.path().join("h.csv");
    assert_eq!(go(&["--seed", "5", "design-imaging", "--elements", "2", "--iters", "0", "--out", s(&out), "--history", s(&hist)]), 0);
    let written = std::fs::read_to_string(&out).unwrap();
    assert_eq!(written, lens_to_string(&init_paper_geometry(2, 5).unwrap()));
    assert_eq!(std::fs::read_to_string(&hist).unwrap().lines().count(), 1);
}

#[test]
fn eval_through_the_empty_system_equals_sharp_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let lens = dir.path().join("empty.json");
    let net = dir.path().join("net.bin");
    let report = dir.path().join("r.json");
    save_lens(&LensSystem::empty(0.52, Sensor::standard(3.79)).unwrap(), &lens).unwrap();
    TaskNetwork::random(4, 1).save(&net).unwrap();
    assert_eq!(go(&["eval", "--lens", s(&lens), "--net", s(&net), "--n", "40", "--rays", "64", "--out", s(&report)]), 0);
    let p = load_report(&report).unwrap().payload;
    assert_eq!(p.accuracy, p.sharp_accuracy);
    assert_eq!(p.fields.len(), 9);
    assert!(p.fields.iter().all(|f| f.accuracy == p.sharp_accuracy));
}

#[test]
fn psf_render_and_analyze_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let lens = d.join("l.json");
    save_lens(&init_paper_geometry(2, 0).unwrap(), &lens).unwrap();
    let psf = d.join("psf.ppm");
    let spot = d.join("spot.csv");
    assert_eq!(go(&["psf", "--lens", s(&lens), "--fov", "20", "--rays", "256", "--kernel", "21", "--pitch", "0.01", "--out", s(&psf), "--spot", s(&spot)]), 0);
    assert!(psf.is_file() && d.join("psf.csv").is_file());
    assert_eq!(std::fs::read_to_string(&spot).unwrap().lines().count(), 1 + 3 * 256);

    let chart = d.join("chart.ppm");
    let glyph = difflens::tasknet::glyph(&Default::default(), 0);
    difflens::imaging::write_ppm(&glyph, &chart).unwrap();
    let sim = d.join("sim.ppm");
    assert_eq!(go(&["render", "--lens", s(&lens), "--image", s(&chart), "--fov", "10", "--rays", "256", "--kernel", "15", "--pitch", "0.01", "--out", s(&sim)]), 0);
    let img = difflens::imaging::read_ppm(&sim).unwrap();
    assert_eq!((img.height, img.width), (32, 32));

    let report = d.join("report.json");
    let exports = d.join("exports");
    assert_eq!(go(&["analyze", "--lens", s(&lens), "--fields", "3", "--rays", "128", "--chart-glyphs", "2", "--export-dir", s(&exports), "--out", s(&report)]), 0);
    let p = load_report(&report).unwrap().payload;
    assert_eq!(p.fields.len(), 3);
    assert!(p.fields.iter().all(|f| f.psnr_db.is_some()));
    assert!(exports.join("layout.svg").is_file() && exports.join("psf_field2.ppm").is_file());
}

#[test]
fn finetune_requires_an_output() {
    let dir = tempfile::tempdir().unwrap();
    let lens = dir.path().join("l.json");
    let net = dir.path().join("n.bin");
    save_lens(&init_paper_geometry(2, 0).unwrap(), &lens).unwrap();
    TaskNetwork::random(4, 0).save(&net).unwrap();
    assert_eq!(go(&["finetune", "--lens", s(&lens), "--net", s(&net), "--freeze", "net"]), 2);
}
