//! Experiment configuration: one strict JSON document drives every
//! subcommand, so a run is fully described by the config plus the seeds.
//!
//! Parsing is strict by hand rather than through derive: unknown keys are
//! collected and reported with their full dotted paths, and every range
//! violation names the offending field the same way ("defense.noise.sigma
//! must be ≥ 0"). Defense steps are addressed by kind, not list index,
//! because each kind carries distinct fields.

use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::adversary::{AttackConfig, DetectionMode, MatchLoss, OptimizerChoice, Regularizer};
use crate::container::{self, ContainerKind};
use crate::defense::{DefenseConfig, DefenseStep};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorKind};
use crate::imageio;
use crate::metrics::DEFAULT_ALPHA_RANGE;
use crate::nn::Network;
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// Where the model weights come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Preset {
        name: String,
        image_shape: Vec<usize>,
        class_count: usize,
        seed: u64,
    },
    Weights { path: PathBuf },
}

/// Where the generator comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorSpec {
    Procedural {
        kind: GeneratorKind,
        latent_dim: usize,
        seed: u64,
    },
    Weights { path: PathBuf },
}

/// The client's training example: an image file, or an image the generator
/// itself produces from a seeded latent so the target is in range by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSpec {
    Image { path: PathBuf, class: usize },
    InRange { latent_seed: u64, class: usize },
}

impl TargetSpec {
    pub fn class(&self) -> usize {
        match self {
            TargetSpec::Image { class, .. } | TargetSpec::InRange { class, .. } => *class,
        }
    }
}

/// Grid settings for the interpolation walks.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeConfig {
    /// Points along the interpolation axis.
    pub points: usize,
    pub alpha_range: (f64, f64),
    /// A second, random-direction axis when set; a plain line otherwise.
    pub beta_points: Option<usize>,
    pub beta_range: (f64, f64),
    /// Seed for the random direction of the second axis.
    pub direction_seed: u64,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig {
            points: 41,
            alpha_range: DEFAULT_ALPHA_RANGE,
            beta_points: None,
            beta_range: (-1.0, 1.0),
            direction_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Run seed; also the attack seed unless the attack section sets its own.
    pub seed: u64,
    pub output_dir: String,
    pub model: ModelSpec,
    pub generator: GeneratorSpec,
    pub target: Option<TargetSpec>,
    pub defense: DefenseConfig,
    pub attack: AttackConfig,
    pub landscape: LandscapeConfig,
    /// Directory relative paths resolve against: the config file's parent.
    pub base_dir: PathBuf,
}

/// Field-path error: the message already names the field so the rendered
/// error reads as one sentence.
fn bad(path: &str, constraint: &str) -> Error {
    Error::Config {
        path: path.to_string(),
        message: format!("{path} {constraint}"),
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| bad(path, "must be a JSON object"))
}

/// Rejects keys outside the schema, listing every offender by full path.
fn check_keys(map: &Map<String, Value>, prefix: &str, allowed: &[&str]) -> Result<()> {
    let mut unknown: Vec<String> = map
        .keys()
        .filter(|k| !allowed.contains(&k.as_str()))
        .map(|k| join(prefix, k))
        .collect();
    if unknown.is_empty() {
        return Ok(());
    }
    unknown.sort();
    Err(Error::Config {
        path: unknown[0].clone(),
        message: format!("unknown keys: {}", unknown.join(", ")),
    })
}

fn get_u64(map: &Map<String, Value>, prefix: &str, key: &str) -> Result<Option<u64>> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_u64()
            .map(Some)
            .ok_or_else(|| bad(&join(prefix, key), "must be a non-negative integer")),
    }
}

fn get_usize(map: &Map<String, Value>, prefix: &str, key: &str) -> Result<Option<usize>> {
    Ok(get_u64(map, prefix, key)?.map(|v| v as usize))
}

fn get_f64(map: &Map<String, Value>, prefix: &str, key: &str) -> Result<Option<f64>> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => match v.as_f64() {
            Some(x) if x.is_finite() => Ok(Some(x)),
            _ => Err(bad(&join(prefix, key), "must be a finite number")),
        },
    }
}

fn get_str<'a>(map: &'a Map<String, Value>, prefix: &str, key: &str) -> Result<Option<&'a str>> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_str()
            .map(Some)
            .ok_or_else(|| bad(&join(prefix, key), "must be a string")),
    }
}

fn require<T>(value: Option<T>, path: &str) -> Result<T> {
    value.ok_or_else(|| bad(path, "is required"))
}

fn get_range(map: &Map<String, Value>, prefix: &str, key: &str) -> Result<Option<(f64, f64)>> {
    let path = join(prefix, key);
    match map.get(key) {
        None => Ok(None),
        Some(Value::Array(items)) if items.len() == 2 => {
            let lo = items[0].as_f64();
            let hi = items[1].as_f64();
            match (lo, hi) {
                (Some(lo), Some(hi)) if lo.is_finite() && hi.is_finite() && lo < hi => {
                    Ok(Some((lo, hi)))
                }
                _ => Err(bad(&path, "must be [lo, hi] with finite lo < hi")),
            }
        }
        Some(_) => Err(bad(&path, "must be [lo, hi] with finite lo < hi")),
    }
}

fn parse_model(v: &Value) -> Result<ModelSpec> {
    let map = as_object(v, "model")?;
    match (map.contains_key("preset"), map.contains_key("weights")) {
        (true, false) => {
            check_keys(map, "model", &["preset", "image-shape", "class-count", "seed"])?;
            let name = get_str(map, "model", "preset")?.unwrap().to_string();
            if name != "mlp-small" && name != "cnn-small" {
                return Err(bad("model.preset", "must be one of mlp-small, cnn-small"));
            }
            let shape_path = "model.image-shape";
            let shape_err = || bad(shape_path, "must be a non-empty array of positive integers");
            let image_shape = match map.get("image-shape") {
                Some(Value::Array(items)) if !items.is_empty() => items
                    .iter()
                    .map(|d| match d.as_u64() {
                        Some(n) if n >= 1 => Ok(n as usize),
                        _ => Err(shape_err()),
                    })
                    .collect::<Result<Vec<usize>>>()?,
                Some(_) => return Err(shape_err()),
                None => return Err(bad(shape_path, "is required")),
            };
            let class_count = require(get_usize(map, "model", "class-count")?, "model.class-count")?;
            if class_count < 2 {
                return Err(bad("model.class-count", "must be ≥ 2"));
            }
            let seed = get_u64(map, "model", "seed")?.unwrap_or(0);
            Ok(ModelSpec::Preset { name, image_shape, class_count, seed })
        }
        (false, true) => {
            check_keys(map, "model", &["weights"])?;
            let path = get_str(map, "model", "weights")?.unwrap();
            if path.is_empty() {
                return Err(bad("model.weights", "must be a non-empty path"));
            }
            Ok(ModelSpec::Weights { path: PathBuf::from(path) })
        }
        _ => Err(bad("model", "must set exactly one of preset or weights")),
    }
}

fn parse_generator(v: &Value) -> Result<GeneratorSpec> {
    let map = as_object(v, "generator")?;
    match (map.contains_key("kind"), map.contains_key("weights")) {
        (true, false) => {
            check_keys(map, "generator", &["kind", "latent-dim", "seed"])?;
            let kind = match get_str(map, "generator", "kind")?.unwrap() {
                "linear" => GeneratorKind::Linear,
                "deconv" => GeneratorKind::Deconv,
                _ => return Err(bad("generator.kind", "must be one of linear, deconv")),
            };
            let latent_dim =
                require(get_usize(map, "generator", "latent-dim")?, "generator.latent-dim")?;
            if latent_dim == 0 {
                return Err(bad("generator.latent-dim", "must be ≥ 1"));
            }
            let seed = get_u64(map, "generator", "seed")?.unwrap_or(0);
            Ok(GeneratorSpec::Procedural { kind, latent_dim, seed })
        }
        (false, true) => {
            check_keys(map, "generator", &["weights"])?;
            let path = get_str(map, "generator", "weights")?.unwrap();
            if path.is_empty() {
                return Err(bad("generator.weights", "must be a non-empty path"));
            }
            Ok(GeneratorSpec::Weights { path: PathBuf::from(path) })
        }
        _ => Err(bad("generator", "must set exactly one of kind or weights")),
    }
}

fn parse_target(v: &Value) -> Result<TargetSpec> {
    let map = as_object(v, "target")?;
    let class = require(get_usize(map, "target", "class")?, "target.class")?;
    match (map.contains_key("image"), map.contains_key("in-range-seed")) {
        (true, false) => {
            check_keys(map, "target", &["image", "class"])?;
            let path = get_str(map, "target", "image")?.unwrap();
            if path.is_empty() {
                return Err(bad("target.image", "must be a non-empty path"));
            }
            Ok(TargetSpec::Image { path: PathBuf::from(path), class })
        }
        (false, true) => {
            check_keys(map, "target", &["in-range-seed", "class"])?;
            let latent_seed = get_u64(map, "target", "in-range-seed")?.unwrap();
            Ok(TargetSpec::InRange { latent_seed, class })
        }
        _ => Err(bad("target", "must set exactly one of image or in-range-seed")),
    }
}

fn parse_defense(v: &Value) -> Result<DefenseConfig> {
    let map = as_object(v, "defense")?;
    check_keys(map, "defense", &["steps", "noise-seed"])?;
    let noise_seed = get_u64(map, "defense", "noise-seed")?.unwrap_or(0);
    let mut steps = Vec::new();
    if let Some(v) = map.get("steps") {
        let items = v
            .as_array()
            .ok_or_else(|| bad("defense.steps", "must be an array of step objects"))?;
        for (i, item) in items.iter().enumerate() {
            let indexed = format!("defense.steps[{i}]");
            let step = as_object(item, &indexed)?;
            let kind = require(get_str(step, &indexed, "kind")?, &join(&indexed, "kind"))?;
            // Field errors address steps by kind; each kind's fields are
            // distinct, so the path stays unambiguous.
            match kind {
                "clip" => {
                    check_keys(step, "defense.clip", &["kind", "bound"])?;
                    let bound = require(get_f64(step, "defense.clip", "bound")?, "defense.clip.bound")?;
                    if bound <= 0.0 {
                        return Err(bad("defense.clip.bound", "must be > 0"));
                    }
                    steps.push(DefenseStep::Clip { bound });
                }
                "noise" => {
                    check_keys(step, "defense.noise", &["kind", "sigma"])?;
                    let sigma =
                        require(get_f64(step, "defense.noise", "sigma")?, "defense.noise.sigma")?;
                    if sigma < 0.0 {
                        return Err(bad("defense.noise.sigma", "must be ≥ 0"));
                    }
                    steps.push(DefenseStep::Noise { sigma });
                }
                "sparsify" => {
                    check_keys(step, "defense.sparsify", &["kind", "rate"])?;
                    let rate = require(
                        get_f64(step, "defense.sparsify", "rate")?,
                        "defense.sparsify.rate",
                    )?;
                    if !(rate > 0.0 && rate < 1.0) {
                        return Err(bad("defense.sparsify.rate", "must be in (0, 1)"));
                    }
                    steps.push(DefenseStep::Sparsify { rate });
                }
                "soteria" => {
                    check_keys(step, "defense.soteria", &["kind", "rate", "layer"])?;
                    let rate = require(
                        get_f64(step, "defense.soteria", "rate")?,
                        "defense.soteria.rate",
                    )?;
                    if !(rate > 0.0 && rate < 1.0) {
                        return Err(bad("defense.soteria.rate", "must be in (0, 1)"));
                    }
                    let layer = require(
                        get_str(step, "defense.soteria", "layer")?,
                        "defense.soteria.layer",
                    )?;
                    if layer.is_empty() {
                        return Err(bad("defense.soteria.layer", "must be a non-empty string"));
                    }
                    steps.push(DefenseStep::Soteria { rate, layer: layer.to_string() });
                }
                _ => {
                    return Err(bad(
                        &join(&indexed, "kind"),
                        "must be one of clip, noise, sparsify, soteria",
                    ))
                }
            }
        }
    }
    let soteria_count = steps
        .iter()
        .filter(|s| matches!(s, DefenseStep::Soteria { .. }))
        .count();
    if soteria_count > 1 {
        return Err(Error::Config {
            path: "defense.steps".to_string(),
            message: "at most one soteria step".to_string(),
        });
    }
    Ok(DefenseConfig { steps, noise_seed })
}

fn parse_detection(map: &Map<String, Value>, key: &str) -> Result<DetectionMode> {
    match get_str(map, "attack", key)? {
        None | Some("auto") => Ok(DetectionMode::Auto),
        Some("force") => Ok(DetectionMode::Force),
        Some("off") => Ok(DetectionMode::Off),
        Some(_) => Err(bad(&join("attack", key), "must be one of auto, force, off")),
    }
}

fn parse_optimizer(v: &Value) -> Result<OptimizerChoice> {
    let map = as_object(v, "attack.optimizer")?;
    let prefix = "attack.optimizer";
    let kind = require(get_str(map, prefix, "kind")?, "attack.optimizer.kind")?;
    match kind {
        "cmaes" => {
            check_keys(map, prefix, &["kind", "population", "max-generations", "initial-step"])?;
            let population = get_usize(map, prefix, "population")?.unwrap_or(50);
            if population < 4 {
                return Err(bad("attack.optimizer.population", "must be ≥ 4"));
            }
            let max_generations = get_usize(map, prefix, "max-generations")?.unwrap_or(300);
            if max_generations == 0 {
                return Err(bad("attack.optimizer.max-generations", "must be ≥ 1"));
            }
            let initial_step = get_f64(map, prefix, "initial-step")?.unwrap_or(0.5);
            if initial_step <= 0.0 {
                return Err(bad("attack.optimizer.initial-step", "must be > 0"));
            }
            Ok(OptimizerChoice::Cmaes { population, max_generations, initial_step })
        }
        "turbo" => {
            check_keys(map, prefix, &["kind", "n-init", "batch", "max-evaluations"])?;
            let n_init = get_usize(map, prefix, "n-init")?.unwrap_or(20);
            if n_init < 2 {
                return Err(bad("attack.optimizer.n-init", "must be ≥ 2"));
            }
            let batch = get_usize(map, prefix, "batch")?.unwrap_or(5);
            if batch == 0 {
                return Err(bad("attack.optimizer.batch", "must be ≥ 1"));
            }
            let max_evaluations = get_usize(map, prefix, "max-evaluations")?.unwrap_or(500);
            if max_evaluations <= n_init {
                return Err(bad("attack.optimizer.max-evaluations", "must exceed n-init"));
            }
            Ok(OptimizerChoice::Turbo { n_init, batch, max_evaluations })
        }
        "fd-adam" => {
            check_keys(map, prefix, &["kind", "steps", "learning-rate", "fd-step"])?;
            let steps = get_usize(map, prefix, "steps")?.unwrap_or(300);
            if steps == 0 {
                return Err(bad("attack.optimizer.steps", "must be ≥ 1"));
            }
            let learning_rate = get_f64(map, prefix, "learning-rate")?.unwrap_or(0.1);
            if learning_rate <= 0.0 {
                return Err(bad("attack.optimizer.learning-rate", "must be > 0"));
            }
            let fd_step = get_f64(map, prefix, "fd-step")?.unwrap_or(1e-4);
            if fd_step <= 0.0 {
                return Err(bad("attack.optimizer.fd-step", "must be > 0"));
            }
            Ok(OptimizerChoice::FdAdam { steps, learning_rate, fd_step })
        }
        _ => Err(bad("attack.optimizer.kind", "must be one of cmaes, turbo, fd-adam")),
    }
}

fn parse_attack(v: &Value, run_seed: u64) -> Result<AttackConfig> {
    let map = as_object(v, "attack")?;
    check_keys(
        map,
        "attack",
        &[
            "loss",
            "regularizer",
            "lambda",
            "latent-bound",
            "optimizer",
            "clip-detection",
            "sparsify-detection",
            "soteria-detection",
            "seed",
        ],
    )?;
    let mut config = AttackConfig::new(run_seed);
    config.loss = match get_str(map, "attack", "loss")? {
        None | Some("squared-l2") => MatchLoss::SquaredL2,
        Some("cosine-distance") => MatchLoss::CosineDistance,
        Some(_) => return Err(bad("attack.loss", "must be one of squared-l2, cosine-distance")),
    };
    config.regularizer = match get_str(map, "attack", "regularizer")? {
        None | Some("kl-divergence") => Regularizer::KlDivergence,
        Some("squared-norm-gap") => Regularizer::SquaredNormGap,
        Some(_) => {
            return Err(bad(
                "attack.regularizer",
                "must be one of kl-divergence, squared-norm-gap",
            ))
        }
    };
    if let Some(lambda) = get_f64(map, "attack", "lambda")? {
        if lambda < 0.0 {
            return Err(bad("attack.lambda", "must be ≥ 0"));
        }
        config.lambda = lambda;
    }
    if let Some(bound) = get_f64(map, "attack", "latent-bound")? {
        if bound <= 0.0 {
            return Err(bad("attack.latent-bound", "must be > 0"));
        }
        config.latent_bound = bound;
    }
    if let Some(v) = map.get("optimizer") {
        config.optimizer = parse_optimizer(v)?;
    }
    config.clip_detection = parse_detection(map, "clip-detection")?;
    config.sparsify_detection = parse_detection(map, "sparsify-detection")?;
    config.soteria_detection = parse_detection(map, "soteria-detection")?;
    if let Some(seed) = get_u64(map, "attack", "seed")? {
        config.seed = seed;
    }
    Ok(config)
}

fn parse_landscape(v: &Value) -> Result<LandscapeConfig> {
    let map = as_object(v, "landscape")?;
    check_keys(
        map,
        "landscape",
        &["points", "alpha-range", "beta-points", "beta-range", "direction-seed"],
    )?;
    let mut config = LandscapeConfig::default();
    if let Some(points) = get_usize(map, "landscape", "points")? {
        if points < 2 {
            return Err(bad("landscape.points", "must be ≥ 2"));
        }
        config.points = points;
    }
    if let Some(range) = get_range(map, "landscape", "alpha-range")? {
        config.alpha_range = range;
    }
    if let Some(points) = get_usize(map, "landscape", "beta-points")? {
        if points < 2 {
            return Err(bad("landscape.beta-points", "must be ≥ 2"));
        }
        config.beta_points = Some(points);
    }
    if let Some(range) = get_range(map, "landscape", "beta-range")? {
        config.beta_range = range;
    }
    config.direction_seed = get_u64(map, "landscape", "direction-seed")?.unwrap_or(0);
    Ok(config)
}

impl ExperimentConfig {
    /// Parses and validates a config document. Relative paths resolve
    /// against the working directory; `from_file` swaps in the file's
    /// parent instead.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let root: Value = serde_json::from_str(text)?;
        let map = as_object(&root, "config root")?;
        check_keys(
            map,
            "",
            &["seed", "output-dir", "model", "generator", "target", "defense", "attack", "landscape"],
        )?;
        let seed = get_u64(map, "", "seed")?.unwrap_or(0);
        let output_dir = get_str(map, "", "output-dir")?.unwrap_or("out").to_string();
        let model = parse_model(require(map.get("model"), "model")?)?;
        let generator = parse_generator(require(map.get("generator"), "generator")?)?;
        let target = map.get("target").map(parse_target).transpose()?;
        let defense = match map.get("defense") {
            Some(v) => parse_defense(v)?,
            None => DefenseConfig::none(),
        };
        let attack = match map.get("attack") {
            Some(v) => parse_attack(v, seed)?,
            None => AttackConfig::new(seed),
        };
        let landscape = match map.get("landscape") {
            Some(v) => parse_landscape(v)?,
            None => LandscapeConfig::default(),
        };
        Ok(ExperimentConfig {
            seed,
            output_dir,
            model,
            generator,
            target,
            defense,
            attack,
            landscape,
            base_dir: PathBuf::from("."),
        })
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut config = ExperimentConfig::parse(&text)?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                config.base_dir = parent.to_path_buf();
            }
        }
        Ok(config)
    }

    /// Replaces the run seed, rethreading it into the attack seed. An
    /// explicit `attack.seed` in the file is overridden too: the flag is
    /// the outermost authority.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.attack.seed = seed;
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn build_model(&self) -> Result<Network> {
        match &self.model {
            ModelSpec::Preset { name, image_shape, class_count, seed } => {
                Network::preset(name, image_shape, *class_count, *seed)
            }
            ModelSpec::Weights { path } => {
                let tensors = container::read_file(&self.resolve(path), ContainerKind::Weights)?;
                Network::from_tensors(&tensors)
            }
        }
    }

    /// Builds the generator; a procedural one takes its output shape from
    /// the model, a loaded one must already match it.
    pub fn build_generator(&self, net: &Network) -> Result<Generator> {
        let generator = match &self.generator {
            GeneratorSpec::Procedural { kind, latent_dim, seed } => {
                Generator::random(*kind, *latent_dim, net.input_shape(), *seed)?
            }
            GeneratorSpec::Weights { path } => Generator::load(&self.resolve(path))?,
        };
        if generator.output_shape() != net.input_shape() {
            return Err(Error::ShapeMismatch(format!(
                "generator produces {:?}, model expects {:?}",
                generator.output_shape(),
                net.input_shape()
            )));
        }
        Ok(generator)
    }

    /// Latent behind an in-range target: seeded standard normal draws,
    /// clamped slightly inside the search box so the optimum is interior.
    pub fn in_range_latent(&self, latent_seed: u64, dim: usize) -> Vec<f64> {
        let mut rng = RandomSource::new(latent_seed);
        let edge = 0.95 * self.attack.latent_bound;
        (0..dim).map(|_| rng.next_gaussian().clamp(-edge, edge)).collect()
    }

    /// Materializes the target image and its class.
    pub fn load_target(&self, generator: &Generator) -> Result<(Tensor, usize)> {
        let target = self.target.as_ref().ok_or_else(|| {
            bad("target", "is required for this subcommand")
        })?;
        match target {
            TargetSpec::Image { path, class } => {
                Ok((imageio::read_image(&self.resolve(path))?, *class))
            }
            TargetSpec::InRange { latent_seed, class } => {
                let z = self.in_range_latent(*latent_seed, generator.latent_dim());
                Ok((generator.generate(&z)?, *class))
            }
        }
    }
}
