//! `gradaudit`: command line front end for the gradient-inversion audit.
//!
//! Every subcommand is driven by one JSON experiment config plus explicit
//! seeds, and all output files are written atomically, so reruns with the
//! same inputs produce byte-identical artifacts. Exit codes: 0 success,
//! 1 validation failure (bad flags, bad config, bad input files),
//! 2 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use gradaudit_core::adversary::{self, AttackContext};
use gradaudit_core::client;
use gradaudit_core::config::ExperimentConfig;
use gradaudit_core::container::write_bytes_atomic;
use gradaudit_core::error::{Error, Result};
use gradaudit_core::generator::Generator;
use gradaudit_core::imageio;
use gradaudit_core::metrics;
use gradaudit_core::optim;
use gradaudit_core::rng::RandomSource;
use gradaudit_core::selftest;

#[derive(Parser)]
#[command(
    name = "gradaudit",
    version,
    about = "Gradient-inversion privacy audit: defended shares, latent-space attacks, metrics"
)]
struct Cli {
    /// Worker threads for parallel objective evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the config-driven subcommands.
#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's run seed (and with it the attack seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config's output-dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::from_file(&self.config)?;
        if let Some(seed) = self.seed {
            config.override_seed(seed);
        }
        Ok(config)
    }

    fn out_dir(&self, config: &ExperimentConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(&config.output_dir))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Produce the defended gradient share for the configured target.
    Client {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Reconstruct the target image from a gradient share.
    Attack {
        /// Gradient share file produced by `client`.
        share: PathBuf,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Compare two images; with a config, also in representation space.
    Eval {
        image_a: PathBuf,
        image_b: PathBuf,
        /// Experiment config; enables the representation-space metric.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for metrics.json; stdout only when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Walk the attack objective between two latent vectors.
    Landscape {
        /// Gradient share the objective matches against.
        share: PathBuf,
        /// JSON array: first latent endpoint.
        latent_a: PathBuf,
        /// JSON array: second latent endpoint.
        latent_b: PathBuf,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Render an image from the generator.
    Gen {
        /// JSON array latent; drawn from the run seed when absent.
        #[arg(long)]
        latent: Option<PathBuf>,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Finite-difference and property verification battery.
    Selftest {
        /// Battery seed.
        #[arg(long, default_value_t = 41)]
        seed: u64,
    },
}

/// Routes the core library's numeric warnings (covariance repairs,
/// surrogate jitter) to stderr.
struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= log::Level::Warn
    }

    fn log(&self, record: &log::Record) {
        if self.enabled(record.metadata()) {
            eprintln!("{}: {}", record.level().as_str().to_lowercase(), record.args());
        }
    }

    fn flush(&self) {}
}

static LOGGER: StderrLogger = StderrLogger;

fn main() {
    if log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(log::LevelFilter::Warn);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not flag errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error [threads]: {e}");
            std::process::exit(2);
        }
    }
    match run(cli.command) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            std::process::exit(if e.is_validation() { 1 } else { 2 });
        }
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Client { args } => cmd_client(&args),
        Command::Attack { share, args } => cmd_attack(&share, &args),
        Command::Eval { image_a, image_b, config, out } => {
            cmd_eval(&image_a, &image_b, config.as_deref(), out.as_deref())
        }
        Command::Landscape { share, latent_a, latent_b, args } => {
            cmd_landscape(&share, &latent_a, &latent_b, &args)
        }
        Command::Gen { latent, args } => cmd_gen(latent.as_deref(), &args),
        Command::Selftest { seed } => cmd_selftest(seed),
    }
}

/// Extension by channel count: PGM for grayscale, PPM for color.
fn image_file(dir: &Path, stem: &str, shape: &[usize]) -> PathBuf {
    let ext = if shape.first() == Some(&3) { "ppm" } else { "pgm" };
    dir.join(format!("{stem}.{ext}"))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes_atomic(path, text.as_bytes())
}

fn read_latent(path: &Path, generator: &Generator) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let z: Vec<f64> = serde_json::from_str(&text)?;
    if z.len() != generator.latent_dim() {
        return Err(Error::ShapeMismatch(format!(
            "latent file {} has {} entries, generator expects {}",
            path.display(),
            z.len(),
            generator.latent_dim()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("latent file {}", path.display())));
    }
    Ok(z)
}

fn cmd_client(args: &RunArgs) -> Result<i32> {
    let config = args.load()?;
    let net = config.build_model()?;
    let generator = config.build_generator(&net)?;
    let (image, class) = config.load_target(&generator)?;
    let share = client::produce_share(&net, &image, class, &config.defense)?;

    let dir = args.out_dir(&config);
    std::fs::create_dir_all(&dir)?;
    let share_path = dir.join("share.gglg");
    client::write_share(&share_path, &share)?;
    let image_path = image_file(&dir, "target", image.shape());
    imageio::write_image(&image_path, &image)?;

    println!("model: {}", share.model_id);
    println!("class: {class}");
    println!("defense steps: {}", config.defense.steps.len());
    println!("share: {}", share_path.display());
    println!("target image: {}", image_path.display());
    Ok(0)
}

fn cmd_attack(share_path: &Path, args: &RunArgs) -> Result<i32> {
    let config = args.load()?;
    let net = config.build_model()?;
    let generator = config.build_generator(&net)?;
    let share = client::read_share(share_path)?;
    // Ground truth is only for scoring; the attack itself never sees it.
    let truth = match &config.target {
        Some(_) => Some(config.load_target(&generator)?.0),
        None => None,
    };
    let report = adversary::attack(&share, &generator, &net, &config.attack, truth.as_ref())?;

    let dir = args.out_dir(&config);
    std::fs::create_dir_all(&dir)?;
    let report_path = dir.join("report.json");
    write_json(&report_path, &report)?;
    let image_path = image_file(&dir, "reconstruction", report.reconstruction.shape());
    imageio::write_image(&image_path, &report.reconstruction)?;
    let trace_path = dir.join("trace.csv");
    write_bytes_atomic(&trace_path, optim::trace_csv(&report.history).as_bytes())?;

    println!("inferred label: {}", report.inferred_label);
    println!(
        "objective: {:.6e} (match {:.6e}, regularizer {:.6e})",
        report.objective_value, report.match_term, report.regularizer_term
    );
    println!("evaluations: {}", report.evaluations);
    if let Some(m) = &report.metrics {
        println!(
            "vs ground truth: mse {:.6e}, psnr {:.2} dB, representation mse {:.6e}",
            m.mse_image, m.psnr_db, m.mse_representation
        );
    }
    println!("time: {:.1}s", report.duration_seconds);
    println!("report: {}", report_path.display());
    println!("reconstruction: {}", image_path.display());
    println!("trace: {}", trace_path.display());
    Ok(0)
}

#[derive(serde::Serialize)]
struct EvalReport {
    mse_image: f64,
    psnr_db: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mse_representation: Option<f64>,
}

fn cmd_eval(
    image_a: &Path,
    image_b: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
) -> Result<i32> {
    let a = imageio::read_image(image_a)?;
    let b = imageio::read_image(image_b)?;
    let mse_image = metrics::mse_image(&a, &b)?;
    let psnr_db = metrics::psnr(&a, &b)?;
    let mse_representation = match config {
        Some(path) => {
            let net = ExperimentConfig::from_file(path)?.build_model()?;
            Some(metrics::mse_representation(&net, &a, &b)?)
        }
        None => None,
    };
    let report = EvalReport { mse_image, psnr_db, mse_representation };

    println!("mse: {mse_image:.6e}");
    println!("psnr: {psnr_db:.2} dB");
    if let Some(r) = mse_representation {
        println!("representation mse: {r:.6e}");
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("metrics.json");
        write_json(&path, &report)?;
        println!("metrics: {}", path.display());
    }
    Ok(0)
}

fn cmd_landscape(
    share_path: &Path,
    latent_a: &Path,
    latent_b: &Path,
    args: &RunArgs,
) -> Result<i32> {
    let config = args.load()?;
    let net = config.build_model()?;
    let generator = config.build_generator(&net)?;
    let share = client::read_share(share_path)?;
    let z1 = read_latent(latent_a, &generator)?;
    let z2 = read_latent(latent_b, &generator)?;

    let label = adversary::infer_label(&share)?;
    let transform = adversary::estimate_transform(&share);
    let ctx = AttackContext {
        share: &share,
        net: &net,
        generator: &generator,
        label,
        transform: &transform,
        config: &config.attack,
    };
    // Undefined points (degenerate latents, cosine of a zero gradient)
    // become NaN samples rather than aborting the walk.
    let f = |z: &[f64]| adversary::objective(z, &ctx).unwrap_or(f64::NAN);
    let truth = match &config.target {
        Some(_) => Some(config.load_target(&generator)?.0),
        None => None,
    };
    let aux_fn = |z: &[f64]| -> f64 {
        let target = truth.as_ref().expect("aux column only runs with a target");
        generator
            .generate(z)
            .and_then(|img| metrics::mse_image(&img, target))
            .unwrap_or(f64::NAN)
    };
    let aux: Option<&dyn Fn(&[f64]) -> f64> =
        truth.as_ref().map(|_| &aux_fn as &dyn Fn(&[f64]) -> f64);

    let ls = &config.landscape;
    let samples = match ls.beta_points {
        None => metrics::landscape_1d(&f, aux, &z1, &z2, ls.points, ls.alpha_range)?,
        Some(beta_points) => {
            let mut rng = RandomSource::new(ls.direction_seed);
            let eta: Vec<f64> = (0..z1.len()).map(|_| rng.next_gaussian()).collect();
            metrics::landscape_2d(
                &f,
                aux,
                &z1,
                &z2,
                &eta,
                ls.points,
                beta_points,
                ls.alpha_range,
                ls.beta_range,
            )?
        }
    };

    let dir = args.out_dir(&config);
    std::fs::create_dir_all(&dir)?;
    let csv_path = dir.join("landscape.csv");
    write_bytes_atomic(&csv_path, metrics::landscape_csv(&samples)?.as_bytes())?;
    println!("samples: {}", samples.len());
    println!("landscape: {}", csv_path.display());
    Ok(0)
}

fn cmd_gen(latent: Option<&Path>, args: &RunArgs) -> Result<i32> {
    let config = args.load()?;
    let net = config.build_model()?;
    let generator = config.build_generator(&net)?;
    let z = match latent {
        Some(path) => read_latent(path, &generator)?,
        None => config.in_range_latent(config.seed, generator.latent_dim()),
    };
    let image = generator.generate(&z)?;

    let dir = args.out_dir(&config);
    std::fs::create_dir_all(&dir)?;
    let image_path = image_file(&dir, "generated", image.shape());
    imageio::write_image(&image_path, &image)?;
    let latent_path = dir.join("latent.json");
    write_json(&latent_path, &z)?;
    println!("image: {}", image_path.display());
    println!("latent: {}", latent_path.display());
    Ok(0)
}

fn cmd_selftest(seed: u64) -> Result<i32> {
    let report = selftest::run(seed);
    for check in &report.checks {
        if check.ok {
            println!(
                "PASS {} ({} comparisons, worst {:.3} of tolerance)",
                check.name, check.checked, check.worst
            );
        } else {
            println!("FAIL {}: {}", check.name, check.detail);
        }
    }
    let failed = report.checks.iter().filter(|c| !c.ok).count();
    if failed == 0 {
        println!("selftest passed: {} checks", report.checks.len());
        Ok(0)
    } else {
        println!("selftest FAILED: {failed} of {} checks", report.checks.len());
        Ok(2)
    }
}
