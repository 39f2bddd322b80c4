//! The `umbra` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, LevelFilter};

use umbra_core::mask::partition_patches;
use umbra_core::metrics::evaluate;
use umbra_core::net::{Model, ModelConfig};
use umbra_core::scan::mas_order;
use umbra_core::synth::shadow_pairs;
use umbra_core::train::{batch_loss, toy_train_step, Sample, TrainState};
use umbra_core::verify::{run_suite, SUITES};
use umbra_core::ParamStore;

use crate::error::{Error, Result};
use crate::{checkpoint, config, image, pathfile, report, viz};

/// Exit status when a verification check fails.
pub const EXIT_CHECK_FAILED: u8 = 1;
/// Exit status for unreadable, malformed or inconsistent input.
pub const EXIT_INPUT: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "umbra", version, about = "Mask-aware state-space scanning for shadow removal")]
pub struct Cli {
    /// Model config file with one key=value per line.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for initialization, synthetic data and check suites.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path (a prefix for scan-viz).
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Model config override; repeatable, applied after the config file.
    #[arg(long = "set", short = 'D', global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// More log output on stderr (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImageFormat {
    Ppm,
    Png,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the mask-aware scan path of a mask and a picture of it.
    ScanViz {
        #[arg(long)]
        mask: PathBuf,
        /// Patch size s (overrides patch_size from the config).
        #[arg(long)]
        patch_size: Option<usize>,
        /// Shadow threshold τ (overrides threshold from the config).
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_enum, default_value = "ppm")]
        format: ImageFormat,
    },
    /// Run a verification suite; exits 1 if any check fails.
    Check {
        #[arg(value_parser = suite_names())]
        suite: String,
    },
    /// Run the network on one image.
    Forward {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Trained weights; without one the model is freshly initialized
        /// from the config and seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Full-batch training on a few pairs; writes a checkpoint and a loss log.
    TrainToy {
        /// Directory with input/, mask/ and target/ holding same-named files.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Generate this many synthetic pairs instead.
        #[arg(long)]
        synth: Option<usize>,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Side of the synthetic images.
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Peak learning rate of the cosine schedule.
        #[arg(long)]
        lr: Option<f64>,
        /// step,loss,lr log; defaults to the checkpoint path plus ".csv".
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// PSNR, SSIM and LAB RMSE over shadow, non-shadow and whole image.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Resize everything to 256×256 first (also allows differing sizes).
        #[arg(long)]
        resize256: bool,
    },
}

fn suite_names() -> clap::builder::PossibleValuesParser {
    let mut names: Vec<&'static str> = SUITES.to_vec();
    names.push("all");
    clap::builder::PossibleValuesParser::new(names)
}

/// Config assembled as defaults < file < `--set` < `--seed`, plus the keys
/// the user set explicitly.
pub fn resolve_config(cli: &Cli) -> Result<(ModelConfig, Vec<String>)> {
    let mut cfg = ModelConfig::default();
    let mut explicit = Vec::new();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (k, v) in config::parse_file(&text).map_err(|m| Error::format(path, m))? {
            config::apply(&mut cfg, &k, &v).map_err(|m| Error::format(path, m))?;
            explicit.push(k);
        }
    }
    for kv in &cli.set {
        let (k, v) = config::split_assignment(kv).map_err(Error::Usage)?;
        config::apply(&mut cfg, k, v).map_err(Error::Usage)?;
        explicit.push(k.to_string());
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        explicit.push("seed".into());
    }
    Ok((cfg, explicit))
}

fn log_config(cfg: &ModelConfig) {
    let line: Vec<String> = config::entries(cfg).into_iter().map(|(k, v)| format!("{k}={v}")).collect();
    info!("config: {}", line.join(" "));
}

fn required_out(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| Error::Usage("--out is required for this command".into()))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => LevelFilter::Error,
        (false, 0) => LevelFilter::Info,
        (false, _) => LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .target(env_logger::Target::Stderr)
        .try_init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}

pub fn run(cli: &Cli) -> Result<u8> {
    let (mut cfg, explicit) = resolve_config(cli)?;
    match &cli.command {
        Command::ScanViz { mask, patch_size, threshold, format } => {
            if let Some(s) = patch_size {
                cfg.patch_size = *s;
            }
            if let Some(t) = threshold {
                cfg.threshold = *t;
            }
            cfg.validate()?;
            log_config(&cfg);
            scan_viz(mask, &cfg, *format, required_out(cli)?)
        }
        Command::Check { suite } => {
            log_config(&cfg);
            check(suite, cfg.seed)
        }
        Command::Forward { image, mask, checkpoint } => {
            forward(image, mask, checkpoint.as_deref(), cfg, &explicit, required_out(cli)?)
        }
        Command::TrainToy { data, synth, steps, size, lr, log } => {
            cfg.validate()?;
            log_config(&cfg);
            let out = required_out(cli)?;
            let log = log.clone().unwrap_or_else(|| {
                let mut p = out.as_os_str().to_owned();
                p.push(".csv");
                PathBuf::from(p)
            });
            let opts = TrainOptions { data: data.as_deref(), synth: *synth, steps: *steps, size: *size, lr: *lr };
            train_toy(&cfg, &opts, out, &log)
        }
        Command::Eval { pred, gt, mask, resize256 } => eval(pred, gt, mask, *resize256, cli.out.as_deref()),
    }
}

fn scan_viz(mask_path: &Path, cfg: &ModelConfig, format: ImageFormat, prefix: &Path) -> Result<u8> {
    let mask = image::load_mask(mask_path)?;
    let grid = partition_patches(&mask, cfg.patch_size, cfg.threshold)?;
    let path = mas_order(&grid)?;
    let with_ext = |ext: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    let dump = with_ext(".path");
    write_file(&dump, pathfile::format_path(&path, cfg.patch_size).as_bytes())?;
    let pic = with_ext(match format {
        ImageFormat::Ppm => ".ppm",
        ImageFormat::Png => ".png",
    });
    let r = viz::render(&path, &grid);
    image::save_raster(&pic, r.width, r.height, 3, &r.pixels)?;
    info!(
        "{} path over {}×{} patches, {} shadow; wrote {} and {}",
        path.kind().as_str(),
        path.rows(),
        path.cols(),
        grid.shadow_count(),
        dump.display(),
        pic.display()
    );
    Ok(0)
}

fn check(suite: &str, seed: u64) -> Result<u8> {
    let outcomes = run_suite(suite, seed)?;
    let mut stdout = std::io::stdout().lock();
    let mut failed = 0;
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        failed += usize::from(!o.passed);
        writeln!(stdout, "{} {status} max_error={:.3e} threshold={:.1e} {}", o.name, o.max_error, o.threshold, o.detail)
            .map_err(|e| Error::io(Path::new("<stdout>"), e))?;
    }
    if failed > 0 {
        log::error!("{failed} of {} checks failed", outcomes.len());
        return Ok(EXIT_CHECK_FAILED);
    }
    Ok(0)
}

fn forward(
    image_path: &Path,
    mask_path: &Path,
    ckpt: Option<&Path>,
    cfg: ModelConfig,
    explicit: &[String],
    out: &Path,
) -> Result<u8> {
    let img = image::load_rgb(image_path)?;
    let mask = image::load_mask(mask_path)?;
    let (model, store) = match ckpt {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let (model, store) = checkpoint::decode(&bytes).map_err(|m| Error::format(path, m))?;
            let stored = config::entries(&model.config);
            for (k, v) in config::entries(&cfg) {
                if k == "seed" || !explicit.iter().any(|e| e == k) {
                    continue;
                }
                let theirs = &stored.iter().find(|(sk, _)| *sk == k).expect("same key set").1;
                if *theirs != v {
                    return Err(Error::Usage(format!(
                        "{} was written with {k}={theirs} but the config asks for {k}={v}",
                        path.display()
                    )));
                }
            }
            (model, store)
        }
        None => {
            let mut store = ParamStore::new();
            let model = Model::new(cfg, &mut store)?;
            (model, store)
        }
    };
    log_config(&model.config);
    if img.shape()[1..] != [mask.height(), mask.width()] {
        return Err(Error::Usage(format!(
            "image is {}×{} but the mask is {}×{}",
            img.shape()[1],
            img.shape()[2],
            mask.height(),
            mask.width()
        )));
    }
    model.config.check_input(mask.height(), mask.width())?;
    let pred = model.predict(&store, &img, &mask)?;
    image::save_rgb(out, &pred)?;
    info!("wrote {}", out.display());
    Ok(0)
}

pub struct TrainOptions<'a> {
    pub data: Option<&'a Path>,
    pub synth: Option<usize>,
    pub steps: usize,
    pub size: usize,
    pub lr: Option<f64>,
}

fn find_with_stem(dir: &Path, stem: &str, exts: &[&str]) -> Result<PathBuf> {
    exts.iter()
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Usage(format!("no {stem}.{{{}}} in {}", exts.join(","), dir.display())))
}

fn load_dir(model: &Model, dir: &Path) -> Result<Vec<Sample>> {
    let inputs = dir.join("input");
    let mut names: Vec<PathBuf> = fs::read_dir(&inputs)
        .map_err(|e| Error::io(&inputs, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut out = Vec::new();
    for input in names {
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let mask = find_with_stem(&dir.join("mask"), &stem, &["pgm", "png"])?;
        let target = find_with_stem(&dir.join("target"), &stem, &["ppm", "png"])?;
        out.push(Sample::new(
            model,
            image::load_rgb(&input)?,
            image::load_mask(&mask)?,
            image::load_rgb(&target)?,
        )?);
    }
    if out.is_empty() {
        return Err(Error::Usage(format!("{} holds no training pairs", inputs.display())));
    }
    Ok(out)
}

fn train_toy(cfg: &ModelConfig, opts: &TrainOptions, out: &Path, log_path: &Path) -> Result<u8> {
    let mut store = ParamStore::new();
    let model = Model::new(cfg.clone(), &mut store)?;
    let batch = match (opts.data, opts.synth) {
        (Some(_), Some(_)) => return Err(Error::Usage("give either --data or --synth, not both".into())),
        (None, None) => return Err(Error::Usage("no training data: pass --data DIR or --synth N".into())),
        (Some(dir), None) => load_dir(&model, dir)?,
        (None, Some(0)) => return Err(Error::Usage("--synth needs at least one pair".into())),
        (None, Some(n)) => shadow_pairs(cfg.seed, n, opts.size, opts.size)
            .iter()
            .map(|p| Sample::from_pair(&model, p))
            .collect::<umbra_core::Result<_>>()?,
    };
    info!("{} parameters, {} training pairs, {} steps", store.numel(), batch.len(), opts.steps);
    let mut state = TrainState::new(store, opts.steps);
    if let Some(lr) = opts.lr {
        state.lr_max = lr;
    }
    let mut log = String::from("step,loss,lr\n");
    let initial = batch_loss(&model, &state.params, &batch)?;
    for step in 0..opts.steps {
        let lr = state.lr();
        let loss = toy_train_step(&model, &mut state, &batch)?;
        writeln!(log, "{step},{loss},{lr}").unwrap();
        if step % 20 == 0 || step + 1 == opts.steps {
            info!("step {step} loss {loss:.6} lr {lr:.3e}");
        }
    }
    let last = batch_loss(&model, &state.params, &batch)?;
    write_file(out, &checkpoint::encode(&model.config, &state.params))?;
    write_file(log_path, log.as_bytes())?;
    println!("initial_loss={initial}\nfinal_loss={last}\nsteps={}", opts.steps);
    info!("wrote {} and {}", out.display(), log_path.display());
    Ok(0)
}

fn eval(pred: &Path, gt: &Path, mask: &Path, resize: bool, out: Option<&Path>) -> Result<u8> {
    let (p, g, m) = (image::load_rgb(pred)?, image::load_rgb(gt)?, image::load_mask(mask)?);
    if !resize && (p.shape() != g.shape() || p.shape()[1..] != [m.height(), m.width()]) {
        return Err(Error::Usage(format!(
            "shape mismatch: pred {:?}, gt {:?}, mask {}×{} (use --resize256 to compare anyway)",
            p.shape(),
            g.shape(),
            m.height(),
            m.width()
        )));
    }
    let text = report::format_report(&evaluate(&p, &g, &m, resize)?);
    match out {
        Some(path) => {
            write_file(path, text.as_bytes())?;
            info!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(0)
}
