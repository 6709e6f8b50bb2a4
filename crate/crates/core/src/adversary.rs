//! Server-side reconstruction: label inference, transform estimation, the
//! matching objective and the end-to-end attack loop.
//!
//! The attacker holds a defended gradient share, the model weights it was
//! computed against and a generator over candidate images. Reconstruction
//! searches the generator's latent space for the point whose induced
//! gradient, pushed through an estimate of the client's lossy transform,
//! best matches the share:
//!
//! ```text
//! minimize  D(y, T_hat(grad(G(z)))) + lambda * R(z)
//! ```
//!
//! The label enters as a constant: for a single example with non-negative
//! representation (ReLU or Sigmoid feeding the head), the true class is the
//! only row of the final Dense weight gradient with a negative sum, which
//! survives scaling and magnitude-based sparsification.
//!
//! Transform estimation reads everything from the observed share: per
//! tensor the L2 norm doubles as a clipping bound, the zero fraction as a
//! sparsification rate, and the nonzero pattern as a pruning mask. Each
//! mechanism has a detection rule and an override (`auto` / `force` /
//! `off`), because blindly clipping an unclipped share distorts the
//! objective. Additive noise is deliberately not modeled: it is zero-mean
//! and carries no recoverable structure.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::client::SharedGradients;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::metrics;
use crate::nn::{GradientVector, Network};
use crate::optim::{self, Termination, TraceEntry};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// Relative spread of weight-tensor norms below which clipping is assumed
/// active (every clipped tensor lands exactly on the bound).
const CLIP_NORM_SPREAD: f64 = 1e-6;
/// Zero fraction of the head bias gradient above which sparsification is
/// assumed. Softmax minus one-hot has no exact zeros, so any hit here was
/// zeroed deliberately; dead hidden units cannot contaminate this tensor.
const SPARSIFY_HEAD_BIAS_MIN: f64 = 0.05;
/// Finite stand-in objective value for candidates whose evaluation
/// degenerates (constant latent, all-zero gradient).
const CANDIDATE_PENALTY: f64 = 1e30;

/// Gradient-matching distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchLoss {
    /// Squared L2 distance between the flattened gradients.
    SquaredL2,
    /// One minus the cosine similarity; invariant to positive scaling.
    CosineDistance,
}

/// Latent regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularizer {
    /// KL divergence of the latent's own component distribution (population
    /// mean and variance) from the standard normal.
    KlDivergence,
    /// `(|z|^2 - k)^2`: pulls the squared norm toward its expected value.
    SquaredNormGap,
}

/// Per-mechanism estimation switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionMode {
    /// Apply the mechanism when its detection rule fires.
    Auto,
    /// Always apply it.
    Force,
    /// Never apply it.
    Off,
}

/// Search strategy plus its budget knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerChoice {
    Cmaes {
        population: usize,
        max_generations: usize,
        initial_step: f64,
    },
    Turbo {
        n_init: usize,
        batch: usize,
        max_evaluations: usize,
    },
    FdAdam {
        steps: usize,
        learning_rate: f64,
        fd_step: f64,
    },
}

impl OptimizerChoice {
    pub fn default_cmaes() -> Self {
        OptimizerChoice::Cmaes {
            population: 50,
            max_generations: 300,
            initial_step: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub loss: MatchLoss,
    pub regularizer: Regularizer,
    /// Regularizer weight.
    pub lambda: f64,
    /// Half width of the latent search box.
    pub latent_bound: f64,
    pub optimizer: OptimizerChoice,
    pub clip_detection: DetectionMode,
    pub sparsify_detection: DetectionMode,
    pub soteria_detection: DetectionMode,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(seed: u64) -> Self {
        AttackConfig {
            loss: MatchLoss::SquaredL2,
            regularizer: Regularizer::KlDivergence,
            lambda: 0.1,
            latent_bound: 2.0,
            optimizer: OptimizerChoice::default_cmaes(),
            clip_detection: DetectionMode::Auto,
            sparsify_detection: DetectionMode::Auto,
            soteria_detection: DetectionMode::Auto,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "regularizer weight must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.latent_bound.is_finite() && self.latent_bound > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "latent bound must be positive and finite, got {}",
                self.latent_bound
            )));
        }
        Ok(())
    }
}

/// What estimation measured for one shared tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEstimate {
    pub layer: String,
    pub param: String,
    /// Observed L2 norm; the clipping bound estimate.
    pub observed_norm: f64,
    /// Fraction of exactly zero entries; the sparsity estimate.
    pub zero_fraction: f64,
}

/// Everything the adversary inferred about the client's transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatedTransform {
    /// Aligned with the share's tensor order.
    pub tensors: Vec<TensorEstimate>,
    pub clip_detected: bool,
    pub sparsify_detected: bool,
    pub soteria_detected: bool,
    /// Layer whose weight gradient showed fully pruned columns.
    pub soteria_layer: Option<String>,
    /// `{0,1}` masks aligned with `tensors`; `None` entries pass through.
    pub masks: Vec<Option<Tensor>>,
}

/// Reads the label from the head weight gradient: the only row whose sum
/// is negative belongs to the true class.
pub fn infer_label(share: &SharedGradients) -> Result<usize> {
    let head = share
        .grads
        .entries()
        .iter()
        .rev()
        .find(|e| e.param == "weight")
        .ok_or(Error::EmptyInput)?;
    let shape = head.tensor.shape();
    if shape.len() != 2 || shape[0] != share.class_count {
        return Err(Error::ShapeMismatch(format!(
            "head weight gradient is {:?}, expected {} rows",
            shape, share.class_count
        )));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let data = head.tensor.data();
    let mut best_row = 0usize;
    let mut best_sum = f64::INFINITY;
    for i in 0..rows {
        let sum: f64 = data[i * cols..(i + 1) * cols].iter().sum();
        if sum < best_sum {
            best_sum = sum;
            best_row = i;
        }
    }
    if best_sum < 0.0 {
        Ok(best_row)
    } else {
        Err(Error::LabelNotIdentifiable)
    }
}

/// Measures norms, zero fractions and nonzero masks from the observed
/// share and runs the per-mechanism detection rules. Always succeeds: the
/// estimates exist whether or not the client defended anything.
pub fn estimate_transform(share: &SharedGradients) -> EstimatedTransform {
    let entries = share.grads.entries();
    let tensors: Vec<TensorEstimate> = entries
        .iter()
        .map(|e| TensorEstimate {
            layer: e.layer.clone(),
            param: e.param.clone(),
            observed_norm: e.tensor.l2_norm().unwrap_or(0.0),
            zero_fraction: e.tensor.zero_fraction(),
        })
        .collect();

    // Clipping pins every weight tensor's norm to the same bound.
    let weight_norms: Vec<f64> = tensors
        .iter()
        .filter(|t| t.param == "weight")
        .map(|t| t.observed_norm)
        .collect();
    let clip_detected = weight_norms.len() >= 2 && {
        let max = weight_norms.iter().cloned().fold(f64::MIN, f64::max);
        let min = weight_norms.iter().cloned().fold(f64::MAX, f64::min);
        max > 0.0 && (max - min) <= CLIP_NORM_SPREAD * max
    };

    // The head bias gradient (softmax minus one-hot) has no natural zeros.
    let sparsify_detected = entries
        .iter()
        .rev()
        .find(|e| e.param == "bias")
        .map(|e| e.tensor.zero_fraction() >= SPARSIFY_HEAD_BIAS_MIN)
        .unwrap_or(false);

    // Representation pruning empties whole input columns of one Dense
    // weight gradient and nothing else, so its zeros are structural:
    // every zero sits in a fully zero column or a fully zero row (dead
    // hidden units zero rows on their own). Magnitude sparsification
    // scatters zeros instead, which keeps it from tripping this rule
    // even when a small column happens to empty out. The head is
    // excluded because it is never the defended layer.
    let head_weight_index = entries.iter().rposition(|e| e.param == "weight");
    let mut soteria_layer = None;
    for (idx, e) in entries.iter().enumerate() {
        if Some(idx) == head_weight_index || e.param != "weight" {
            continue;
        }
        let shape = e.tensor.shape();
        if shape.len() != 2 {
            continue;
        }
        let (rows, cols) = (shape[0], shape[1]);
        if rows == 0 || cols == 0 {
            continue;
        }
        let data = e.tensor.data();
        let zero_col: Vec<bool> = (0..cols)
            .map(|j| (0..rows).all(|i| data[i * cols + j] == 0.0))
            .collect();
        let zero_row: Vec<bool> = (0..rows)
            .map(|i| data[i * cols..(i + 1) * cols].iter().all(|v| *v == 0.0))
            .collect();
        let zero_cols = zero_col.iter().filter(|z| **z).count();
        let structural = (0..rows * cols)
            .all(|p| data[p] != 0.0 || zero_row[p / cols] || zero_col[p % cols]);
        if zero_cols > 0 && zero_cols < cols && structural {
            soteria_layer = Some(e.layer.clone());
            break;
        }
    }
    let soteria_detected = soteria_layer.is_some();

    let masks: Vec<Option<Tensor>> = entries
        .iter()
        .map(|e| {
            let masked_by_soteria =
                soteria_detected && e.param == "weight" && Some(&e.layer) == soteria_layer.as_ref();
            if sparsify_detected || masked_by_soteria {
                Some(nonzero_mask(&e.tensor))
            } else {
                None
            }
        })
        .collect();

    EstimatedTransform {
        tensors,
        clip_detected,
        sparsify_detected,
        soteria_detected,
        soteria_layer,
        masks,
    }
}

fn nonzero_mask(t: &Tensor) -> Tensor {
    t.map(|v| if v == 0.0 { 0.0 } else { 1.0 })
        .expect("indicator values are finite")
}

fn check_same_structure(a: &GradientVector, b: &GradientVector) -> Result<()> {
    if a.entries().len() != b.entries().len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient vectors have {} and {} tensors",
            a.entries().len(),
            b.entries().len()
        )));
    }
    for (ea, eb) in a.entries().iter().zip(b.entries()) {
        if ea.layer != eb.layer || ea.param != eb.param || ea.tensor.shape() != eb.tensor.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient entry {}.{} does not match {}.{}",
                ea.layer, ea.param, eb.layer, eb.param
            )));
        }
    }
    Ok(())
}

/// Squared L2 distance between two structurally equal gradient vectors.
pub fn loss_l2(a: &GradientVector, b: &GradientVector) -> Result<f64> {
    check_same_structure(a, b)?;
    let mut sum = 0.0;
    for (ea, eb) in a.entries().iter().zip(b.entries()) {
        for (x, y) in ea.tensor.data().iter().zip(eb.tensor.data()) {
            sum += (x - y) * (x - y);
        }
    }
    Ok(sum)
}

/// Cosine distance `1 - <a, b> / (|a| |b|)` over the flattened gradients.
pub fn loss_cosine(a: &GradientVector, b: &GradientVector) -> Result<f64> {
    check_same_structure(a, b)?;
    cosine_flat(&a.flatten(), &b.flatten())
}

fn l2_flat(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cosine_flat(a: &[f64], b: &[f64]) -> Result<f64> {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedCosine);
    }
    Ok(1.0 - dot / (na.sqrt() * nb.sqrt()))
}

/// KL divergence of the latent's component distribution from the standard
/// normal, using the population moments of the single vector.
pub fn reg_kl(z: &[f64]) -> Result<f64> {
    let k = z.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "moment regularizer needs at least 2 components, got {k}"
        )));
    }
    let kf = k as f64;
    let mean = z.iter().sum::<f64>() / kf;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / kf;
    if var == 0.0 {
        return Err(Error::DegenerateLatent);
    }
    Ok(-(kf / 2.0) * (1.0 + var.ln() - mean * mean - var))
}

/// `(|z|^2 - k)^2`: zero exactly on the sphere of expected squared norm.
pub fn reg_norm(z: &[f64]) -> f64 {
    let k = z.len() as f64;
    let sq: f64 = z.iter().map(|v| v * v).sum();
    (sq - k) * (sq - k)
}

/// Read-only inputs of one objective evaluation.
pub struct AttackContext<'a> {
    pub share: &'a SharedGradients,
    pub net: &'a Network,
    pub generator: &'a Generator,
    pub label: usize,
    pub transform: &'a EstimatedTransform,
    pub config: &'a AttackConfig,
}

/// The matching term and the weighted regularizer, separately.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParts {
    pub match_term: f64,
    /// Already multiplied by lambda.
    pub regularizer_term: f64,
}

impl ObjectiveParts {
    pub fn total(&self) -> f64 {
        self.match_term + self.regularizer_term
    }
}

/// Evaluates the attack objective at one latent point. Pure: bit-identical
/// on repeated calls.
pub fn objective(z: &[f64], ctx: &AttackContext) -> Result<f64> {
    Ok(Evaluator::new(ctx)?.parts(z)?.total())
}

/// Precomputed evaluation state shared by every candidate.
struct Evaluator<'a> {
    net: &'a Network,
    generator: &'a Generator,
    label: usize,
    target: Vec<f64>,
    /// Per-tensor `(start, end)` spans into the flattened gradient.
    segments: Vec<(usize, usize)>,
    /// Flat `{0,1}` mask, present when masking is active.
    mask: Option<Vec<f64>>,
    /// Per-segment clipping bounds, present when clipping is active.
    clip: Option<Vec<f64>>,
    loss: MatchLoss,
    regularizer: Regularizer,
    lambda: f64,
}

impl<'a> Evaluator<'a> {
    fn new(ctx: &AttackContext<'a>) -> Result<Evaluator<'a>> {
        ctx.config.validate()?;
        if ctx.generator.output_shape() != ctx.share.image_shape {
            return Err(Error::ShapeMismatch(format!(
                "generator emits {:?}, share was computed on {:?}",
                ctx.generator.output_shape(),
                ctx.share.image_shape
            )));
        }
        let expected = ctx.net.gradient_entry_names();
        let entries = ctx.share.grads.entries();
        if expected.len() != entries.len()
            || expected
                .iter()
                .zip(entries)
                .any(|((layer, param, shape), e)| {
                    layer != &e.layer || param != &e.param || shape.as_slice() != e.tensor.shape()
                })
        {
            return Err(Error::ShapeMismatch(
                "share tensors do not line up with the network's gradient layout".into(),
            ));
        }
        if ctx.transform.tensors.len() != entries.len() {
            return Err(Error::ShapeMismatch(
                "transform estimate does not line up with the share".into(),
            ));
        }

        let mut segments = Vec::with_capacity(entries.len());
        let mut offset = 0usize;
        for e in entries {
            let n = e.tensor.numel();
            segments.push((offset, offset + n));
            offset += n;
        }

        let resolve = |mode: DetectionMode, detected: bool| match mode {
            DetectionMode::Auto => detected,
            DetectionMode::Force => true,
            DetectionMode::Off => false,
        };
        let est = ctx.transform;
        let apply_clip = resolve(ctx.config.clip_detection, est.clip_detected);
        let apply_sparsify = resolve(ctx.config.sparsify_detection, est.sparsify_detected);
        let apply_soteria =
            resolve(ctx.config.soteria_detection, est.soteria_detected) && est.soteria_layer.is_some();

        // Masks merge by elementwise product; rebuilding from the share
        // here lets a forced mode work even when detection stayed quiet.
        let mask = if apply_sparsify || apply_soteria {
            let mut flat = Vec::with_capacity(offset);
            for e in entries {
                let soteria_tensor = apply_soteria
                    && e.param == "weight"
                    && Some(&e.layer) == est.soteria_layer.as_ref();
                if apply_sparsify || soteria_tensor {
                    flat.extend(e.tensor.data().iter().map(|v| if *v == 0.0 { 0.0 } else { 1.0 }));
                } else {
                    flat.extend(std::iter::repeat(1.0).take(e.tensor.numel()));
                }
            }
            Some(flat)
        } else {
            None
        };
        let clip = if apply_clip {
            Some(est.tensors.iter().map(|t| t.observed_norm).collect())
        } else {
            None
        };

        Ok(Evaluator {
            net: ctx.net,
            generator: ctx.generator,
            label: ctx.label,
            target: ctx.share.grads.flatten(),
            segments,
            mask,
            clip,
            loss: ctx.config.loss,
            regularizer: ctx.config.regularizer,
            lambda: ctx.config.lambda,
        })
    }

    /// Mask first, then clip: pruning changes norms, and the observed
    /// bounds were measured after the client's own masking.
    fn apply_transform(&self, flat: &mut [f64]) {
        if let Some(mask) = &self.mask {
            for (v, m) in flat.iter_mut().zip(mask) {
                *v *= m;
            }
        }
        if let Some(bounds) = &self.clip {
            for ((start, end), bound) in self.segments.iter().zip(bounds) {
                let segment = &mut flat[*start..*end];
                let norm = segment.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > *bound && norm > 0.0 {
                    let scale = bound / norm;
                    for v in segment {
                        *v *= scale;
                    }
                }
            }
        }
    }

    fn parts(&self, z: &[f64]) -> Result<ObjectiveParts> {
        let image = self.generator.generate(z)?;
        let grads = self.net.param_gradients(&image, self.label)?;
        let mut flat = grads.flatten();
        self.apply_transform(&mut flat);
        let match_term = match self.loss {
            MatchLoss::SquaredL2 => l2_flat(&self.target, &flat),
            MatchLoss::CosineDistance => cosine_flat(&self.target, &flat)?,
        };
        let regularizer_term = if self.lambda == 0.0 {
            0.0
        } else {
            self.lambda
                * match self.regularizer {
                    Regularizer::KlDivergence => reg_kl(z)?,
                    Regularizer::SquaredNormGap => reg_norm(z),
                }
        };
        Ok(ObjectiveParts {
            match_term,
            regularizer_term,
        })
    }

    /// Total objective with degeneracies mapped to a large finite penalty,
    /// as the minimizers require finite values everywhere.
    fn penalized(&self, z: &[f64]) -> f64 {
        match self.parts(z) {
            Ok(parts) => {
                let total = parts.total();
                if total.is_finite() {
                    total
                } else {
                    CANDIDATE_PENALTY
                }
            }
            Err(_) => CANDIDATE_PENALTY,
        }
    }
}

/// Reconstruction quality against a known ground-truth image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionMetrics {
    pub mse_image: f64,
    pub psnr_db: f64,
    pub mse_representation: f64,
}

/// Everything one attack run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub inferred_label: usize,
    pub transform: EstimatedTransform,
    /// Best latent found, in image-generation coordinates.
    pub latent: Vec<f64>,
    pub reconstruction: Tensor,
    pub objective_value: f64,
    pub match_term: f64,
    pub regularizer_term: f64,
    pub evaluations: usize,
    /// Best-so-far objective per generation; non-increasing.
    pub history: Vec<TraceEntry>,
    pub termination: Termination,
    pub metrics: Option<ReconstructionMetrics>,
    /// Wall-clock seconds; excluded from serialization so reports are
    /// byte-reproducible.
    #[serde(skip)]
    pub duration_seconds: f64,
}

/// Runs the full reconstruction: label inference, transform estimation,
/// then latent-space search with the configured optimizer.
///
/// `ground_truth`, when given, is only used to score the result.
pub fn attack(
    share: &SharedGradients,
    generator: &Generator,
    net: &Network,
    config: &AttackConfig,
    ground_truth: Option<&Tensor>,
) -> Result<AttackReport> {
    let started = Instant::now();
    config.validate()?;
    let local_id = net.content_id();
    if share.model_id != local_id {
        return Err(Error::ModelMismatch {
            share_model: share.model_id.clone(),
            local_model: local_id,
        });
    }

    let label = infer_label(share)?;
    let transform = estimate_transform(share);
    let ctx = AttackContext {
        share,
        net,
        generator,
        label,
        transform: &transform,
        config,
    };
    let evaluator = Evaluator::new(&ctx)?;

    let dim = generator.latent_dim();
    let root = RandomSource::new(config.seed);
    let optimizer_seed = root.split(1).seed();
    let mut start_stream = root.split(2);

    // Structural problems (wrong shapes, broken generator) should surface
    // as errors, not as a silently penalized search. Probe one ordinary
    // point; only candidate-specific degeneracies pass.
    let mut probe_stream = root.split(3);
    let probe: Vec<f64> = (0..dim).map(|_| probe_stream.next_gaussian()).collect();
    match evaluator.parts(&optim::squash(&probe, Some(config.latent_bound))) {
        Ok(_) | Err(Error::DegenerateLatent) | Err(Error::UndefinedCosine) => {}
        Err(other) => return Err(other),
    }

    let f = |z: &[f64]| evaluator.penalized(z);
    let run = match &config.optimizer {
        OptimizerChoice::Cmaes {
            population,
            max_generations,
            initial_step,
        } => {
            let cfg = optim::cmaes::CmaesConfig {
                population: *population,
                max_generations: *max_generations,
                initial_step: *initial_step,
                initial_mean: None,
                bound: Some(config.latent_bound),
                target_value: None,
                seed: optimizer_seed,
            };
            optim::cmaes::minimize(&f, dim, &cfg)?
        }
        OptimizerChoice::Turbo {
            n_init,
            batch,
            max_evaluations,
        } => {
            let cfg = optim::turbo::TurboConfig {
                n_init: *n_init,
                batch: *batch,
                bound: config.latent_bound,
                max_evaluations: *max_evaluations,
                target_value: None,
                seed: optimizer_seed,
            };
            optim::turbo::minimize(&f, dim, &cfg)?
        }
        OptimizerChoice::FdAdam {
            steps,
            learning_rate,
            fd_step,
        } => {
            let start: Vec<f64> = (0..dim).map(|_| start_stream.next_gaussian()).collect();
            let cfg = optim::fd_adam::FdAdamConfig {
                steps: *steps,
                learning_rate: *learning_rate,
                fd_step: *fd_step,
                bound: Some(config.latent_bound),
                target_value: None,
                ..optim::fd_adam::FdAdamConfig::default()
            };
            optim::fd_adam::minimize(&f, &start, &cfg)?
        }
    };

    let latent = run.best_point;
    let parts = evaluator.parts(&latent)?;
    let reconstruction = generator.generate(&latent)?;
    let metrics = match ground_truth {
        Some(truth) => Some(ReconstructionMetrics {
            mse_image: metrics::mse_image(truth, &reconstruction)?,
            psnr_db: metrics::psnr(truth, &reconstruction)?,
            mse_representation: metrics::mse_representation(net, truth, &reconstruction)?,
        }),
        None => None,
    };

    Ok(AttackReport {
        inferred_label: label,
        transform,
        latent,
        reconstruction,
        objective_value: parts.total(),
        match_term: parts.match_term,
        regularizer_term: parts.regularizer_term,
        evaluations: run.evaluations,
        history: run.trace,
        termination: run.termination,
        metrics,
        duration_seconds: started.elapsed().as_secs_f64(),
    })
}
