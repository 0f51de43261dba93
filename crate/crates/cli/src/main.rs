mod settings;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rdanet::checkpoint::Checkpoint;
use rdanet::data::{add_awgn, load_image, save_image, Image, TrainingStream};
use rdanet::gradcheck;
use rdanet::metrics::evaluate_dir;
use rdanet::{ConvAlgo, LossMode, Model, Trainer};

use settings::Settings;

/// Two-stage residual dense attention denoiser.
#[derive(Parser, Debug)]
#[command(name = "rdanet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a directory of clean images with synthetic noise.
    Train(TrainArgs),
    /// Denoise one image with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Add Gaussian noise to an image.
    AddNoise(AddNoiseArgs),
    /// Score denoised images against same-named references.
    Eval(EvalArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck,
    /// Print a checkpoint's configuration and parameter count.
    Info(InfoArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of clean training images.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path, rewritten periodically and at the end.
    #[arg(long)]
    out: PathBuf,
    /// `key = value` settings file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train on luminance (default).
    #[arg(long, conflicts_with = "color")]
    gray: bool,
    /// Train on RGB.
    #[arg(long)]
    color: bool,
    /// Lowest noise level, 0-255 scale [default: 0].
    #[arg(long)]
    sigma_min: Option<f64>,
    /// Highest noise level, 0-255 scale [default: 50].
    #[arg(long)]
    sigma_max: Option<f64>,
    /// Number of updates [default: 500000].
    #[arg(long)]
    iters: Option<u64>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// mse or charbonnier [default: mse].
    #[arg(long)]
    loss: Option<LossMode>,
    /// Patches per batch [default: 4].
    #[arg(long)]
    batch: Option<usize>,
    /// Patch side length [default: 128].
    #[arg(long)]
    patch: Option<usize>,
    /// Initial learning rate [default: 1e-4].
    #[arg(long)]
    lr: Option<f64>,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Training log, one `iteration,loss,lr` line per record [default: <out>.log].
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the first-stage estimate next to the output as `<stem>_stage1.<ext>`.
    #[arg(long)]
    save_stage1: bool,
}

#[derive(Args, Debug)]
struct AddNoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Standard deviation on the 0-255 scale.
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    denoised: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Where to write the CSV report; printed to stdout as well.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InfoArgs {
    /// Without a checkpoint, describes a freshly built model of the given
    /// settings file (or the defaults).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, conflicts_with = "ckpt")]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "ckpt")]
    color: bool,
}

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Marks a failure as numeric rather than a usage or I/O problem.
#[derive(Debug)]
struct NumericFailure(String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<NumericFailure>().is_some() {
            return EXIT_NUMERIC;
        }
        if let Some(e) = cause.downcast_ref::<rdanet::Error>() {
            use rdanet::Error as E;
            return match e {
                E::NonFiniteLoss { .. } => EXIT_NUMERIC,
                E::MissingFile(_)
                | E::UnsupportedFormat(_)
                | E::CorruptImage { .. }
                | E::EmptyDataset(_)
                | E::UnpairedFile(_)
                | E::BadMagic
                | E::VersionMismatch { .. }
                | E::Truncated
                | E::MalformedCheckpoint(_)
                | E::Io { .. } => EXIT_IO,
                E::Shape(_) | E::Config(_) | E::Detached | E::NonScalarLoss(_) => EXIT_USAGE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Denoise(a) => denoise(a),
        Command::AddNoise(a) => add_noise(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck => run_gradcheck(),
        Command::Info(a) => info(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn train_settings(a: &TrainArgs) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &a.config {
        s.apply_file(path)?;
    }
    if a.gray {
        s.grayscale = true;
    }
    if a.color {
        s.grayscale = false;
    }
    if let Some(v) = a.sigma_min {
        s.sigma_min = v;
    }
    if let Some(v) = a.sigma_max {
        s.sigma_max = v;
    }
    if let Some(v) = a.iters {
        s.iterations = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.loss {
        s.loss = v;
    }
    if let Some(v) = a.batch {
        s.batch = v;
    }
    if let Some(v) = a.patch {
        s.patch = v;
    }
    if let Some(v) = a.lr {
        s.lr = v;
    }
    Ok(s)
}

fn train(a: TrainArgs) -> Result<()> {
    let s = train_settings(&a)?;
    let mut config = s.train_config();
    config.checkpoint_path = Some(a.out.clone());
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            log::info!("resuming from iteration {}", ck.iteration);
            Trainer::resume(ck, config)?
        }
        None => {
            let model = Model::<f32>::build(&s.model_config(), s.seed)?;
            Trainer::new(model, config)?
        }
    };
    let stream = TrainingStream::open(&a.data, s.stream_config(), trainer.config.seed)?;
    if stream.channels() != trainer.model.config().image_channels {
        bail!(rdanet::Error::Config(format!(
            "model has {} image channels but the data has {}",
            trainer.model.config().image_channels,
            stream.channels()
        )));
    }
    log::info!(
        "training {} parameters for {} iterations",
        trainer.model.param_count(),
        trainer.config.iterations
    );
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log");
        PathBuf::from(p)
    });
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| rdanet::Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
    let mut write_error = None;
    trainer.run(&stream, &mut |record| {
        log::info!("it {} loss {:.6e} lr {:.3e}", record.iteration, record.loss, record.lr);
        if let Err(e) = writeln!(log_file, "{}", record.to_line()) {
            write_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_error {
        bail!(rdanet::Error::Io { path: log_path, source: e });
    }
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn stage1_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}_stage1.{}", ext.to_string_lossy()),
        None => format!("{stem}_stage1"),
    };
    out.with_file_name(name)
}

fn denoise(a: DenoiseArgs) -> Result<()> {
    let model = Checkpoint::load(&a.ckpt)
        .with_context(|| format!("loading {}", a.ckpt.display()))?
        .into_model()?;
    let img = load_image(&a.input)?;
    let want = model.config().image_channels;
    if img.channels != want {
        bail!(rdanet::Error::Shape(format!(
            "the model expects {want}-channel images but {} has {}",
            a.input.display(),
            img.channels
        )));
    }
    let (x1, x2) = model.infer(&img.to_tensor())?;
    save_image(&Image::from_tensor(&x2, 0)?, &a.out)?;
    if a.save_stage1 {
        save_image(&Image::from_tensor(&x1, 0)?, stage1_path(&a.out))?;
    }
    Ok(())
}

fn add_noise(a: AddNoiseArgs) -> Result<()> {
    let img = load_image(&a.input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let noisy = add_awgn(&img, a.sigma, &mut rng)?;
    save_image(&noisy, &a.out)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let report = evaluate_dir(&a.denoised, &a.reference)?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(path) = &a.report {
        std::fs::write(path, &csv).map_err(|e| rdanet::Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn run_gradcheck() -> Result<()> {
    let mut failures = 0;
    for (label, algo) in [
        ("direct", ConvAlgo::Direct),
        ("im2col", ConvAlgo::Im2col),
        ("tap-gemm", ConvAlgo::TapGemm),
    ] {
        for r in gradcheck::run_suite(algo)? {
            let ok = r.passed(gradcheck::TOLERANCE);
            failures += usize::from(!ok);
            println!(
                "{:<6} {:<40} {:>10.3e}  {}",
                label,
                r.name,
                r.max_rel_error,
                if ok { "ok" } else { "FAIL" }
            );
        }
    }
    if failures > 0 {
        bail!(NumericFailure(format!(
            "{failures} gradient checks exceed relative error {:e}",
            gradcheck::TOLERANCE
        )));
    }
    Ok(())
}

fn info(a: InfoArgs) -> Result<()> {
    let (config, params, iteration) = match &a.ckpt {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let count = ck.param_count();
            (ck.config, count, Some(ck.iteration))
        }
        None => {
            let mut s = Settings::default();
            if let Some(path) = &a.config {
                s.apply_file(path)?;
            }
            if a.color {
                s.grayscale = false;
            }
            let config = s.model_config();
            let count = Model::<f32>::build(&config, 0)?.param_count();
            (config, count, None)
        }
    };
    println!("modules = {}", config.modules);
    println!("sampling_depth = {}", config.sampling_depth);
    println!("base_width = {}", config.base_width);
    println!("image_channels = {}", config.image_channels);
    println!("growth = {}", config.growth);
    let dil: Vec<String> = config.dilations.iter().map(ToString::to_string).collect();
    println!("dilations = {}", dil.join(","));
    println!("attention_ratio = {}", config.attention_ratio);
    println!("channel_policy = {}", config.channel_policy.as_str());
    println!("param_count = {params}");
    if let Some(it) = iteration {
        println!("iteration = {it}");
    }
    Ok(())
}
