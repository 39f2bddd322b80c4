use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use umbra::checkpoint;
use umbra::image::{save_mask, save_rgb};
use umbra::report::parse_report;
use umbra_core::net::{Model, ModelConfig};
use umbra_core::train::cosine_lr;
use umbra_core::{MaskImage, ParamStore, Tensor};

fn umbra(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_umbra")).current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[3, 32, 32], |i| ((i * 53 + 11) % 256) as f64 / 255.0);
        save_rgb(&dir.path().join("img.ppm"), &img).unwrap();
        save_mask(&dir.path().join("mask.pgm"), &MaskImage::rectangle(32, 32, 8, 24, 8, 24)).unwrap();
        save_mask(&dir.path().join("clear.pgm"), &MaskImage::zeros(32, 32)).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        umbra(self.dir.path(), args)
    }

    fn read(&self, name: &str) -> Vec<u8> {
        fs::read(self.path(name)).unwrap()
    }
}

#[test]
fn scan_viz_writes_the_golden_path() {
    let f = Fixture::new();
    let o = f.run(&["scan-viz", "--mask", "mask.pgm", "--patch-size", "8", "--out", "viz"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(f.read("viz.path"), include_bytes!("data/centered_32x32_s8.path"));
    assert!(f.read("viz.ppm").starts_with(b"P6\n64 64\n255\n"));
    assert!(o.stdout.is_empty());
    assert!(String::from_utf8_lossy(&o.stderr).contains("config: channels=8"));
}

#[test]
fn scan_viz_on_a_clear_mask_dumps_horizontal_order() {
    let f = Fixture::new();
    assert_eq!(code(&f.run(&["scan-viz", "--mask", "clear.pgm", "--out", "z"])), 0);
    let mut want = String::from("4 4 8 horizontal\n");
    for i in 0..16 {
        want.push_str(&format!("{} {}\n", i / 4, i % 4));
    }
    assert_eq!(String::from_utf8(f.read("z.path")).unwrap(), want);
}

#[test]
fn scan_viz_input_errors_exit_2() {
    let f = Fixture::new();
    let o = f.run(&["scan-viz", "--mask", "missing.pgm", "--out", "z"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.pgm"));
    assert_eq!(code(&f.run(&["scan-viz", "--mask", "mask.pgm", "--patch-size", "5", "--out", "z"])), 2);
    assert_eq!(code(&f.run(&["scan-viz", "--mask", "img.ppm", "--out", "z"])), 2);
    assert_eq!(code(&f.run(&["scan-viz", "--mask", "mask.pgm"])), 2);
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let f = Fixture::new();
    for run in ["1", "2"] {
        let o = f.run(&["--seed", "5", "forward", "--image", "img.ppm", "--mask", "mask.pgm", "--out", &format!("f{run}.ppm")]);
        assert_eq!(code(&o), 0);
        let o = f.run(&["--seed", "5", "scan-viz", "--mask", "mask.pgm", "--format", "png", "--out", &format!("v{run}")]);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(f.read("f1.ppm"), f.read("f2.ppm"));
    assert_eq!(f.read("v1.png"), f.read("v2.png"));
    assert_eq!(f.read("v1.path"), f.read("v2.path"));
}

#[test]
fn forward_with_a_zero_residual_checkpoint_returns_the_input() {
    let f = Fixture::new();
    let mut store = ParamStore::new();
    let model = Model::new(ModelConfig { seed: 3, ..Default::default() }, &mut store).unwrap();
    model.zero_decoder(&mut store);
    fs::write(f.path("zero.ckpt"), checkpoint::encode(&model.config, &store)).unwrap();
    let before = f.read("img.ppm");
    let o = f.run(&["forward", "--image", "img.ppm", "--mask", "mask.pgm", "--checkpoint", "zero.ckpt", "--out", "o.ppm"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(f.read("o.ppm"), before);
    assert_eq!(f.read("img.ppm"), before);

    let o = f.run(&["forward", "--image", "img.ppm", "--mask", "mask.pgm", "--checkpoint", "zero.ckpt", "--out", "o.png"]);
    assert_eq!(code(&o), 0);
    assert!(f.read("o.png").starts_with(b"\x89PNG"));
}

#[test]
fn forward_input_errors_exit_2() {
    let f = Fixture::new();
    let base = ["forward", "--image", "img.ppm", "--out", "o.ppm"];
    assert_eq!(code(&f.run(&base)), 2);
    assert_eq!(code(&f.run(&[&base[..], &["--mask", "nope.pgm"]].concat())), 2);
    assert_eq!(code(&f.run(&[&base[..], &["--mask", "mask.pgm", "--set", "unet_depth=6"]].concat())), 2);

    let mut store = ParamStore::new();
    let model = Model::new(ModelConfig::default(), &mut store).unwrap();
    fs::write(f.path("m.ckpt"), checkpoint::encode(&model.config, &store)).unwrap();
    let with_ckpt = [&base[..], &["--mask", "mask.pgm", "--checkpoint", "m.ckpt"]].concat();
    assert_eq!(code(&f.run(&with_ckpt)), 0);
    assert_eq!(code(&f.run(&[&with_ckpt[..], &["-D", "channels=4"]].concat())), 2);
    fs::write(f.path("bad.ckpt"), b"umbra-checkpoint 1\nend\n").unwrap();
    assert_eq!(code(&f.run(&[&base[..], &["--mask", "mask.pgm", "--checkpoint", "bad.ckpt"]].concat())), 2);
}

#[test]
fn train_toy_with_zero_steps_writes_the_initialization() {
    let f = Fixture::new();
    let o = f.run(&["--seed", "4", "-D", "channels=2", "train-toy", "--synth", "2", "--size", "16", "--steps", "0", "--out", "t.ckpt"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut store = ParamStore::new();
    let model = Model::new(ModelConfig { channels: 2, seed: 4, ..Default::default() }, &mut store).unwrap();
    assert_eq!(f.read("t.ckpt"), checkpoint::encode(&model.config, &store));
    assert_eq!(f.read("t.ckpt.csv"), b"step,loss,lr\n");
}

#[test]
fn train_toy_log_follows_the_schedule() {
    let f = Fixture::new();
    let args = ["-D", "channels=2", "-D", "unet_depth=1", "train-toy", "--synth", "2", "--size", "16"];
    let o = f.run(&[&args[..], &["--steps", "6", "--lr", "1e-3", "--out", "t.ckpt", "--log", "loss.csv"]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = String::from_utf8(f.read("loss.csv")).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows[0], "step,loss,lr");
    assert_eq!(rows.len(), 7);
    for (i, row) in rows[1..].iter().enumerate() {
        let v: Vec<&str> = row.split(',').collect();
        assert_eq!(v[0].parse::<usize>().unwrap(), i);
        assert!(v[1].parse::<f64>().unwrap() > 0.0);
        assert_eq!(v[2].parse::<f64>().unwrap(), cosine_lr(i, 6, 1e-3, 1e-6));
    }
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("initial_loss=") && stdout.contains("final_loss="));
    assert_eq!(code(&f.run(&["train-toy", "--out", "t.ckpt"])), 2);
}

#[test]
fn train_toy_reads_a_data_directory() {
    let f = Fixture::new();
    for sub in ["input", "mask", "target"] {
        fs::create_dir(f.path(sub)).unwrap();
    }
    let img = Tensor::from_fn(&[3, 16, 16], |i| (i % 7) as f64 / 7.0);
    save_rgb(&f.path("input/a.ppm"), &img.map(|v| v * 0.5)).unwrap();
    save_rgb(&f.path("target/a.png"), &img).unwrap();
    save_mask(&f.path("mask/a.pgm"), &MaskImage::zeros(16, 16).clone()).unwrap();
    let o = f.run(&["-D", "channels=2", "train-toy", "--data", ".", "--steps", "2", "--out", "d.ckpt"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    fs::remove_file(f.path("target/a.png")).unwrap();
    assert_eq!(code(&f.run(&["train-toy", "--data", ".", "--steps", "2", "--out", "d.ckpt"])), 2);
}

#[test]
fn eval_reports_and_rejects_mismatches() {
    let f = Fixture::new();
    let o = f.run(&["eval", "--pred", "img.ppm", "--gt", "img.ppm", "--mask", "mask.pgm"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("S 100.0000 1.0000 0.0000\nNS 100.0000 1.0000 0.0000\nALL 100.0000 1.0000 0.0000\n"));

    // damage only the shadow square
    let mut img = Tensor::from_fn(&[3, 32, 32], |i| ((i * 53 + 11) % 256) as f64 / 255.0);
    for c in 0..3 {
        for y in 8..24 {
            for x in 8..24 {
                let v = img.at(&[c, y, x]);
                img.set(&[c, y, x], v * 0.5);
            }
        }
    }
    save_rgb(&f.path("dark.ppm"), &img).unwrap();
    let o = f.run(&["eval", "--pred", "dark.ppm", "--gt", "img.ppm", "--mask", "mask.pgm", "--out", "r.txt"]);
    assert_eq!(code(&o), 0);
    let r = parse_report(&String::from_utf8(f.read("r.txt")).unwrap()).unwrap();
    assert_eq!(r.non_shadow.unwrap().psnr, 100.0);
    let s = r.shadow.unwrap().psnr;
    assert!(s.is_finite() && s < 100.0);

    let o = f.run(&["eval", "--pred", "dark.ppm", "--gt", "img.ppm", "--mask", "clear.pgm"]);
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("S undefined undefined undefined\n"));

    save_rgb(&f.path("small.ppm"), &Tensor::zeros(&[3, 16, 16])).unwrap();
    let o = f.run(&["eval", "--pred", "small.ppm", "--gt", "img.ppm", "--mask", "mask.pgm"]);
    assert_eq!(code(&o), 2);
    assert!(o.stdout.is_empty());
    let o = f.run(&["eval", "--pred", "small.ppm", "--gt", "img.ppm", "--mask", "mask.pgm", "--resize256"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn config_file_and_flag_precedence() {
    let f = Fixture::new();
    fs::write(f.path("m.cfg"), "# test\nchannels=3\nseed=1\nthreshold=0.25\n").unwrap();
    let o = f.run(&["--config", "m.cfg", "-D", "seed=2", "--seed", "9", "scan-viz", "--mask", "mask.pgm", "--out", "z"]);
    assert_eq!(code(&o), 0);
    let log = String::from_utf8(o.stderr).unwrap();
    assert!(log.contains("channels=3 "), "{log}");
    assert!(log.contains("seed=9 "), "{log}");
    assert!(log.contains("threshold=0.25"), "{log}");

    fs::write(f.path("bad.cfg"), "channels=3\nwidth=4\n").unwrap();
    let o = f.run(&["--config", "bad.cfg", "scan-viz", "--mask", "mask.pgm", "--out", "z"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8(o.stderr).unwrap().contains("width"));
}

#[test]
fn check_prints_one_line_per_outcome() {
    let f = Fixture::new();
    let o = f.run(&["check", "interleave"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.starts_with("interleave PASS max_error="), "{out}");
    assert_eq!(code(&f.run(&["check", "bogus"])), 2);
}
