//! End-to-end runs of the `heatfield` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use heatfield::image_io::save_image;
use heatfield::{load_field, load_grid, ImageBuffer};

fn heatfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heatfield"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_png(dir: &Path, name: &str, w: usize, h: usize, f: impl Fn(usize, usize, usize) -> f64) -> PathBuf {
    let data = (0..h)
        .flat_map(|r| (0..w).flat_map(move |c| (0..3).map(move |ch| (r, c, ch))))
        .map(|(r, c, ch)| f(r, c, ch))
        .collect();
    let path = dir.join(name);
    save_image(&ImageBuffer::new(w, h, 3, data).unwrap(), &path).unwrap();
    path
}

fn smooth(r: usize, c: usize, ch: usize) -> f64 {
    0.5 + 0.3 * ((r as f64 * 0.7 + ch as f64).sin() * (c as f64 * 0.4).cos())
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = heatfield(&["fit", s(&dir.path().join("absent.png"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    assert_eq!(code(&heatfield(&["resample", "absent.nhf"])), 2);
    assert_eq!(code(&heatfield(&["no-such-command"])), 2);
    assert_eq!(code(&heatfield(&["--help"])), 0);
}

#[test]
fn one_pixel_fit_keeps_the_pixel_and_verifies_trivially() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_png(dir.path(), "dot.png", 1, 1, |_, _, ch| [0.2, 0.6, 1.0][ch]);
    let field = dir.path().join("dot.nhf");
    let out = heatfield(&["fit", s(&input), "-o", s(&field), "--steps", "50"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let file = load_field(&field).unwrap();
    let expected = [51.0 / 255.0, 153.0 / 255.0, 1.0];
    for (b, e) in file.field.params().bias.iter().zip(expected) {
        assert!((b - e).abs() < 1e-6);
    }
    assert!(file.field.params().amplitudes.iter().all(|&a| a == 0.0));

    let ok = heatfield(&["verify-aa", s(&field)]);
    assert_eq!(code(&ok), 0);
    // a constant field blurs to itself up to kernel-normalization rounding
    let stdout = String::from_utf8_lossy(&ok.stdout);
    let err: f64 = stdout.split("max_abs_err=").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
    assert!(err < 1e-12, "{stdout}");
    assert_eq!(code(&heatfield(&["verify-aa", s(&field), "--delta-t", "0"])), 2);
    assert_eq!(code(&heatfield(&["verify-aa", s(&field), "--delta-t", "-1"])), 2);
}

#[test]
fn runs_are_reproducible_and_documented() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_png(dir.path(), "img.png", 12, 10, smooth);
    let (a, b) = (dir.path().join("a.nhf"), dir.path().join("b.nhf"));
    for (out, threads) in [(&a, "1"), (&b, "3")] {
        let run = heatfield(&[
            "--seed", "9", "--threads", threads, "fit", s(&input), "-o", s(out), "--steps", "60", "--components", "32",
        ]);
        assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(a.with_extension("csv")).unwrap(),
        std::fs::read(b.with_extension("csv")).unwrap()
    );

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("a.nhf.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "fit");
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["flags"]["steps"], 60);
    assert_eq!(manifest["flags"]["kappa_mode"], "self-consistent");
    let hash = manifest["inputs"][s(&input)].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
}

#[test]
fn config_file_supplies_defaults_that_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_png(dir.path(), "img.png", 8, 8, smooth);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# shared settings\nsteps=20\ncomponents=16\ntv-weight=0\n").unwrap();
    let field = dir.path().join("f.nhf");
    let run = heatfield(&["--config", s(&cfg), "fit", s(&input), "-o", s(&field), "--components", "8"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(load_field(&field).unwrap().field.bank().len(), 8);
    let csv = std::fs::read_to_string(field.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);

    std::fs::write(&cfg, "not-a-flag=1\n").unwrap();
    assert_eq!(code(&heatfield(&["--config", s(&cfg), "fit", s(&input)])), 2);
    assert_eq!(code(&heatfield(&["--config", "absent.cfg", "fit", s(&input)])), 2);
}

#[test]
fn resample_and_verify_a_small_fit() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_png(dir.path(), "img.png", 16, 16, smooth);
    let field = dir.path().join("f.nhf");
    let fit = heatfield(&["fit", s(&input), "-o", s(&field), "--steps", "200", "--components", "64"]);
    assert_eq!(code(&fit), 0);

    let by_scale = dir.path().join("s.ppm");
    let by_time = dir.path().join("t.ppm");
    assert_eq!(code(&heatfield(&["resample", s(&field), "--scale", "2", "-o", s(&by_scale)])), 0);
    assert_eq!(code(&heatfield(&["resample", s(&field), "--time", "4", "-o", s(&by_time)])), 0);
    assert_eq!(std::fs::read(&by_scale).unwrap(), std::fs::read(&by_time).unwrap());
    assert!(std::fs::read(&by_scale).unwrap().starts_with(b"P6\n8 8 255\n"));
    assert!(dir.path().join("s.ppm.manifest.json").is_file());

    let up = dir.path().join("up.png");
    assert_eq!(code(&heatfield(&["resample", s(&field), "--scale", "0.5", "-o", s(&up)])), 0);
    assert_eq!(image_size(&up), (32, 32));
    assert_eq!(code(&heatfield(&["resample", s(&field), "--scale", "2", "--time", "4", "-o", s(&up)])), 2);
    assert_eq!(code(&heatfield(&["resample", s(&field), "--scale", "0", "-o", s(&up)])), 2);

    let map = dir.path().join("err.png");
    let pass = heatfield(&["verify-aa", s(&field), "--error-map", s(&map)]);
    assert_eq!(code(&pass), 0, "{}", String::from_utf8_lossy(&pass.stdout));
    assert_eq!(image_size(&map), (16, 16));
    // the oracle's discretization floor sits far above 1e-12
    assert_eq!(code(&heatfield(&["verify-aa", s(&field), "--threshold", "1e-12"])), 1);

    let grad = dir.path().join("grad.png");
    assert_eq!(code(&heatfield(&["gradmap", s(&field), "-o", s(&grad), "--width", "24", "--height", "24"])), 0);
    assert_eq!(image_size(&grad), (24, 24));
    let spectrum = dir.path().join("spec.png");
    assert_eq!(code(&heatfield(&["spectrum", s(&input), "-o", s(&spectrum)])), 0);
    assert_eq!(image_size(&spectrum), (16, 16));
    assert_eq!(code(&heatfield(&["verify-heat", s(&field), "--samples", "500"])), 0);
}

#[test]
fn spectrum_of_a_constant_image_is_a_dc_peak() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_png(dir.path(), "flat.png", 8, 8, |_, _, _| 0.4);
    let out = dir.path().join("spec.png");
    assert_eq!(code(&heatfield(&["spectrum", s(&input), "-o", s(&out)])), 0);
    let img = heatfield::image_io::load_image(&out).unwrap();
    for r in 0..8 {
        for c in 0..8 {
            let v = img.pixel(r, c)[0];
            if (r, c) == (4, 4) {
                assert_eq!(v, 1.0);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }
}

#[test]
fn local_grid_fit_and_upsampling() {
    let dir = tempfile::tempdir().unwrap();
    let lr = write_png(dir.path(), "lr.png", 4, 3, smooth);
    let hr = write_png(dir.path(), "hr.png", 8, 6, smooth);
    let bad = write_png(dir.path(), "bad.png", 9, 6, smooth);
    let grid = dir.path().join("g.nhg");
    let target = format!("2:{}", s(&hr));
    let run = heatfield(&["fit-local", s(&lr), "--target", &target, "-o", s(&grid), "--steps", "30", "--components", "8"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let file = load_grid(&grid).unwrap();
    let lr_pixels = heatfield::image_io::load_image(&lr).unwrap();
    assert_eq!(file.grid.bias(), lr_pixels.data());

    let up = dir.path().join("up.png");
    assert_eq!(code(&heatfield(&["resample", s(&grid), "--scale", "0.25", "-o", s(&up)])), 0);
    assert_eq!(image_size(&up), (16, 12));
    assert_eq!(code(&heatfield(&["resample", s(&grid), "--scale", "2", "-o", s(&up)])), 2);

    let mismatch = format!("2:{}", s(&bad));
    assert_eq!(code(&heatfield(&["fit-local", s(&lr), "--target", &mismatch, "--steps", "5"])), 2);
    assert_eq!(code(&heatfield(&["fit-local", s(&lr)])), 2);
}

fn image_size(path: &Path) -> (usize, usize) {
    let img = heatfield::image_io::load_image(path).unwrap();
    (img.width(), img.height())
}
