//! Runtime verification battery: finite-difference oracles for every
//! analytic derivative, plus fast property checks for the defense,
//! estimation, loss and serialization invariants.
//!
//! The derivative oracles never touch the backward pass they are checking:
//! parameter gradients are re-derived by rebuilding the network with one
//! perturbed weight at a time, Jacobians by perturbing input pixels, both
//! with central differences. The `selftest` subcommand prints one line per
//! check and fails if any check fails; the acceptance tests reuse the same
//! functions.

use crate::adversary::{self, MatchLoss};
use crate::client::produce_share;
use crate::container::{self, ContainerKind, NamedTensor};
use crate::defense::{self, DefenseConfig, DefenseStep};
use crate::error::Result;
use crate::generator::{Generator, GeneratorKind};
use crate::imageio;
use crate::metrics;
use crate::nn::{GradEntry, GradientVector, LayerSpec, Network};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative agreement required between analytic and numeric derivatives.
pub const FD_REL_TOL: f64 = 1e-5;
/// Absolute slack for entries too small for a relative comparison.
pub const FD_ABS_TOL: f64 = 1e-8;

/// One named check with its worst observed deviation.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    /// Number of individual comparisons folded into this check.
    pub checked: usize,
    /// Worst deviation as a multiple of its tolerance; below 1 passes.
    pub worst: f64,
    pub ok: bool,
    /// Context for the first failure, empty otherwise.
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SelftestReport {
    pub checks: Vec<CheckOutcome>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }
}

/// Folds elementwise comparisons into a `CheckOutcome` using the shared
/// mixed tolerance: an entry passes when
/// `|a - b| <= max(FD_ABS_TOL, FD_REL_TOL * max(|a|, |b|))`.
struct Agreement {
    name: String,
    checked: usize,
    worst: f64,
    first_failure: String,
}

impl Agreement {
    fn new(name: impl Into<String>) -> Agreement {
        Agreement {
            name: name.into(),
            checked: 0,
            worst: 0.0,
            first_failure: String::new(),
        }
    }

    fn compare(&mut self, context: &str, analytic: &[f64], numeric: &[f64]) {
        assert_eq!(analytic.len(), numeric.len(), "oracle length mismatch");
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let tol = FD_ABS_TOL.max(FD_REL_TOL * a.abs().max(n.abs()));
            let ratio = (a - n).abs() / tol;
            self.checked += 1;
            if ratio > self.worst {
                self.worst = ratio;
            }
            if ratio > 1.0 && self.first_failure.is_empty() {
                self.first_failure = format!(
                    "{context} entry {i}: analytic {a:.9e} vs numeric {n:.9e}"
                );
            }
        }
    }

    fn finish(self) -> CheckOutcome {
        CheckOutcome {
            ok: self.first_failure.is_empty(),
            name: self.name,
            checked: self.checked,
            worst: self.worst,
            detail: self.first_failure,
        }
    }
}

/// Builds a `CheckOutcome` for a plain pass/fail property where the
/// deviation scale is already normalized by the caller.
fn property(name: &str, checked: usize, worst: f64, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        checked,
        worst,
        ok: detail.is_empty(),
        detail,
    }
}

fn random_image(shape: &[usize], rng: &mut RandomSource) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_raw(shape.to_vec(), (0..n).map(|_| rng.next_uniform()).collect())
}

/// Loss gradient for every parameter by central differences, one rebuilt
/// network per probe. Independent of the backward pass.
pub fn fd_param_gradients(net: &Network, x: &Tensor, class: usize) -> Result<GradientVector> {
    let base = net.to_tensors();
    let mut entries = Vec::new();
    for (layer, param, shape) in net.gradient_entry_names() {
        let name = format!("{layer}.{param}");
        let index = base
            .iter()
            .position(|t| t.name == name)
            .expect("gradient entries mirror the weight container");
        let n = base[index].tensor.numel();
        let mut grad = Vec::with_capacity(n);
        for j in 0..n {
            let probe = |delta: f64| -> Result<f64> {
                let mut tensors = base.clone();
                let mut data = tensors[index].tensor.data().to_vec();
                data[j] += delta;
                tensors[index] =
                    NamedTensor::new(name.clone(), Tensor::new(shape.clone(), data)?);
                Network::from_tensors(&tensors)?.loss(x, class)
            };
            let plus = probe(FD_STEP)?;
            let minus = probe(-FD_STEP)?;
            grad.push((plus - minus) / (2.0 * FD_STEP));
        }
        entries.push(GradEntry {
            layer,
            param,
            tensor: Tensor::new(shape, grad)?,
        });
    }
    Ok(GradientVector::from_entries(entries))
}

/// Jacobian of the pre-head representation with respect to the input by
/// central differences over pixels; columns correspond to pixels.
pub fn fd_representation_jacobian(net: &Network, x: &Tensor) -> Result<Tensor> {
    let d = x.numel();
    let l = net.representation_width();
    let mut jac = vec![0.0; l * d];
    for j in 0..d {
        let probe = |delta: f64| -> Result<Tensor> {
            let mut data = x.data().to_vec();
            data[j] += delta;
            net.representation(&Tensor::new(x.shape().to_vec(), data)?)
        };
        let plus = probe(FD_STEP)?;
        let minus = probe(-FD_STEP)?;
        for i in 0..l {
            jac[i * d + j] = (plus.data()[i] - minus.data()[i]) / (2.0 * FD_STEP);
        }
    }
    Tensor::new(vec![l, d], jac)
}

/// Architectures the derivative oracles cycle through. Together they cover
/// every layer kind, including the two stock presets.
fn oracle_networks(rng: &mut RandomSource) -> Vec<(String, Network, Vec<usize>, usize)> {
    let mut out = Vec::new();
    let mut counter = 17u64;
    let mut seed = || {
        counter += 1;
        rng.split(counter).seed()
    };
    out.push((
        "mlp-small".to_string(),
        Network::preset("mlp-small", &[1, 5, 5], 3, seed()).unwrap(),
        vec![1, 5, 5],
        3,
    ));
    out.push((
        "cnn-small".to_string(),
        Network::preset("cnn-small", &[1, 6, 6], 3, seed()).unwrap(),
        vec![1, 6, 6],
        3,
    ));
    out.push((
        "dense-sigmoid".to_string(),
        Network::new(
            &[1, 4, 4],
            vec![
                LayerSpec::Dense { input: 16, output: 10 },
                LayerSpec::Sigmoid,
                LayerSpec::Dense { input: 10, output: 4 },
            ],
            4,
            seed(),
        )
        .unwrap(),
        vec![1, 4, 4],
        4,
    ));
    out.push((
        "conv-sigmoid".to_string(),
        Network::new(
            &[2, 5, 5],
            vec![
                LayerSpec::Conv2d {
                    in_channels: 2,
                    out_channels: 4,
                    kernel: (3, 3),
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Sigmoid,
                LayerSpec::Flatten,
                LayerSpec::Dense { input: 36, output: 8 },
                LayerSpec::ReLU,
                LayerSpec::Dense { input: 8, output: 3 },
            ],
            3,
            seed(),
        )
        .unwrap(),
        vec![2, 5, 5],
        3,
    ));
    out
}

/// Analytic parameter gradients against the finite-difference oracle over
/// `instances` random (network, input, class) triples per architecture.
pub fn check_param_gradients(seed: u64, instances: usize) -> Vec<CheckOutcome> {
    let mut rng = RandomSource::new(seed);
    let mut outcomes = Vec::new();
    for (name, net, shape, classes) in oracle_networks(&mut rng) {
        let mut agreement = Agreement::new(format!("loss-gradients {name}"));
        for i in 0..instances {
            let mut stream = rng.split(1000 + i as u64);
            let x = random_image(&shape, &mut stream);
            let class = (stream.next_uniform() * classes as f64) as usize % classes;
            let analytic = net.param_gradients(&x, class).unwrap();
            let numeric = fd_param_gradients(&net, &x, class).unwrap();
            agreement.compare(
                &format!("{name} instance {i}"),
                &analytic.flatten(),
                &numeric.flatten(),
            );
        }
        outcomes.push(agreement.finish());
    }
    outcomes
}

/// Analytic representation Jacobians against central differences.
pub fn check_representation_jacobians(seed: u64, instances: usize) -> Vec<CheckOutcome> {
    let mut rng = RandomSource::new(seed ^ 0x9e37);
    let mut outcomes = Vec::new();
    for (name, net, shape, _) in oracle_networks(&mut rng) {
        let mut agreement = Agreement::new(format!("representation-jacobian {name}"));
        for i in 0..instances {
            let mut stream = rng.split(2000 + i as u64);
            let x = random_image(&shape, &mut stream);
            let analytic = net.representation_input_jacobian(&x).unwrap();
            let numeric = fd_representation_jacobian(&net, &x).unwrap();
            agreement.compare(
                &format!("{name} instance {i}"),
                analytic.data(),
                numeric.data(),
            );
        }
        outcomes.push(agreement.finish());
    }
    outcomes
}

fn check_clip(seed: u64) -> CheckOutcome {
    let rng = RandomSource::new(seed ^ 0xc11b);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut detail = String::new();
    for trial in 0..20u64 {
        let net = Network::preset("mlp-small", &[1, 6, 6], 4, rng.split(trial).seed()).unwrap();
        let mut stream = rng.split(100 + trial);
        let x = random_image(&[1, 6, 6], &mut stream);
        let grads = net.param_gradients(&x, (trial % 4) as usize).unwrap();
        let bound = 0.002 + 0.05 * stream.next_uniform();
        let clipped = defense::clip(&grads, bound).unwrap();
        for (orig, out) in grads.entries().iter().zip(clipped.entries()) {
            let expected = orig.tensor.l2_norm().unwrap().min(bound);
            let got = out.tensor.l2_norm().unwrap();
            let err = (got - expected).abs();
            checked += 1;
            worst = worst.max(err / 1e-12);
            if err > 1e-12 && detail.is_empty() {
                detail = format!(
                    "{}.{} norm {got:.15e}, expected {expected:.15e}",
                    orig.layer, orig.param
                );
            }
        }
        // A clipped tensor's norm can land one ulp above the bound, so the
        // second application may rescale; the contract is 1e-12, not bits.
        let twice = defense::clip(&clipped, bound).unwrap();
        for (a, b) in clipped.flatten().iter().zip(twice.flatten()) {
            let err = (a - b).abs();
            checked += 1;
            worst = worst.max(err / 1e-12);
            if err > 1e-12 && detail.is_empty() {
                detail = format!("second clip moved an entry by {err:.3e}");
            }
        }
    }
    property("clip-norms-and-idempotence", checked, worst, detail)
}

fn check_sparsify(seed: u64) -> CheckOutcome {
    let mut rng = RandomSource::new(seed ^ 0x5a55);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut detail = String::new();
    for trial in 0..20 {
        // Distinct magnitudes make the survivor set unique.
        let n = 40 + trial * 7;
        let mut values: Vec<f64> = (0..n)
            .map(|i| (1.0 + i as f64 * 1e-3) * if rng.next_uniform() < 0.5 { -1.0 } else { 1.0 })
            .collect();
        for k in (1..n).rev() {
            let j = (rng.next_uniform() * (k + 1) as f64) as usize % (k + 1);
            values.swap(k, j);
        }
        let rate = 0.1 + 0.8 * rng.next_uniform();
        let grads = GradientVector::from_entries(vec![GradEntry {
            layer: "only".into(),
            param: "weight".into(),
            tensor: Tensor::new(vec![n], values.clone()).unwrap(),
        }]);
        let sparse = defense::sparsify(&grads, rate).unwrap();
        let out = sparse.entries()[0].tensor.data();
        let m = (rate * n as f64).floor() as usize;
        let zeroed = out.iter().filter(|v| **v == 0.0).count();
        checked += 1;
        worst = worst.max(zeroed as f64 / n as f64 - rate);
        if zeroed != m && detail.is_empty() {
            detail = format!("zeroed {zeroed} of {n}, expected {m} at rate {rate:.3}");
        }
        let min_survivor = out
            .iter()
            .filter(|v| **v != 0.0)
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min);
        let max_zeroed = values
            .iter()
            .zip(out)
            .filter(|(_, o)| **o == 0.0)
            .map(|(v, _)| v.abs())
            .fold(0.0, f64::max);
        checked += 1;
        if max_zeroed >= min_survivor && detail.is_empty() {
            detail = format!(
                "zeroed magnitude {max_zeroed} not below surviving magnitude {min_survivor}"
            );
        }
    }
    property("sparsify-survivor-set", checked, worst, detail)
}

fn check_soteria(seed: u64) -> CheckOutcome {
    let rng = RandomSource::new(seed ^ 0x5073);
    let mut checked = 0;
    let mut detail = String::new();
    for trial in 0..10u64 {
        let net = Network::preset("mlp-small", &[1, 6, 6], 4, rng.split(trial).seed()).unwrap();
        let mut stream = rng.split(300 + trial);
        let x = random_image(&[1, 6, 6], &mut stream);
        let class = (trial % 4) as usize;
        let rate = 0.3 + 0.5 * stream.next_uniform();
        let plain = net.param_gradients(&x, class).unwrap();
        let mask = defense::soteria_mask(&net, &x, rate, "dense0").unwrap();
        let masked = defense::apply_soteria_mask(&plain, &mask).unwrap();

        let expected = (rate * mask.keep.len() as f64).floor() as usize;
        checked += 1;
        if mask.pruned_count() != expected && detail.is_empty() {
            detail = format!(
                "pruned {} entries, expected {expected} at rate {rate:.3}",
                mask.pruned_count()
            );
        }
        for (orig, out) in plain.entries().iter().zip(masked.entries()) {
            let defended = orig.layer == "dense0" && orig.param == "weight";
            checked += 1;
            if !defended && orig != out && detail.is_empty() {
                detail = format!("{}.{} changed outside the defended layer", orig.layer, orig.param);
            }
        }
    }
    property("representation-prune-exactness", checked, 0.0, detail)
}

fn check_label_inference(seed: u64, instances: usize) -> CheckOutcome {
    let rng = RandomSource::new(seed ^ 0x1ab3);
    let mut detail = String::new();
    for i in 0..instances {
        let trial = rng.split(i as u64);
        let classes = 2 + (i % 7);
        let net =
            Network::preset("mlp-small", &[1, 5, 5], classes, trial.seed()).unwrap();
        let mut stream = rng.split(5000 + i as u64);
        let x = random_image(&[1, 5, 5], &mut stream);
        let class = (stream.next_uniform() * classes as f64) as usize % classes;
        let share = produce_share(&net, &x, class, &DefenseConfig::none()).unwrap();
        match adversary::infer_label(&share) {
            Ok(label) if label == class => {}
            other => {
                if detail.is_empty() {
                    detail = format!("instance {i}: true class {class}, inferred {other:?}");
                }
            }
        }
    }
    property("label-inference", instances, 0.0, detail)
}

/// Sigmoid feature extractor: strictly positive activations keep natural
/// zeros out of the gradients, so every observed zero is defense-made.
/// Three dense layers give a middle layer whose input is a genuine hidden
/// representation, the natural target for representation pruning.
fn sigmoid_net(seed: u64) -> Network {
    Network::new(
        &[1, 6, 6],
        vec![
            LayerSpec::Dense { input: 36, output: 24 },
            LayerSpec::Sigmoid,
            LayerSpec::Dense { input: 24, output: 12 },
            LayerSpec::Sigmoid,
            LayerSpec::Dense { input: 12, output: 4 },
        ],
        4,
        seed,
    )
    .unwrap()
}

fn check_estimation(seed: u64) -> CheckOutcome {
    let rng = RandomSource::new(seed ^ 0xe571);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut detail = String::new();
    for trial in 0..10u64 {
        let net = sigmoid_net(rng.split(trial).seed());
        let mut stream = rng.split(700 + trial);
        let x = random_image(&[1, 6, 6], &mut stream);
        let class = (trial % 4) as usize;

        let bound = 0.001 + 0.01 * stream.next_uniform();
        let clip_cfg = DefenseConfig {
            steps: vec![DefenseStep::Clip { bound }],
            noise_seed: 0,
        };
        let clipped = produce_share(&net, &x, class, &clip_cfg).unwrap();
        let est = adversary::estimate_transform(&clipped);
        checked += 1;
        if !est.clip_detected && detail.is_empty() {
            detail = format!("clipping at bound {bound:.4} not detected");
        }
        for t in est.tensors.iter().filter(|t| t.param == "weight") {
            let err = (t.observed_norm - bound).abs() / bound;
            checked += 1;
            worst = worst.max(err / 1e-9);
            if err > 1e-9 && detail.is_empty() {
                detail = format!(
                    "recovered bound {:.12e} from true {bound:.12e}",
                    t.observed_norm
                );
            }
        }

        let rate = 0.5 + 0.4 * stream.next_uniform();
        let sparse_cfg = DefenseConfig {
            steps: vec![DefenseStep::Sparsify { rate }],
            noise_seed: 0,
        };
        let sparse = produce_share(&net, &x, class, &sparse_cfg).unwrap();
        let est = adversary::estimate_transform(&sparse);
        checked += 1;
        if !est.sparsify_detected && detail.is_empty() {
            detail = format!("sparsification at rate {rate:.3} not detected");
        }
        let big = est
            .tensors
            .iter()
            .find(|t| t.layer == "dense0" && t.param == "weight")
            .unwrap();
        let err = (big.zero_fraction - rate).abs();
        checked += 1;
        worst = worst.max(err / 0.005);
        if err > 0.005 && detail.is_empty() {
            detail = format!("rate estimate {:.4} from true {rate:.4}", big.zero_fraction);
        }

        let soteria_cfg = DefenseConfig {
            steps: vec![DefenseStep::Soteria { rate: 0.6, layer: "dense1".into() }],
            noise_seed: 0,
        };
        let defended = produce_share(&net, &x, class, &soteria_cfg).unwrap();
        let est = adversary::estimate_transform(&defended);
        let applied = defense::soteria_mask(&net, &x, 0.6, "dense1").unwrap();
        checked += 1;
        if est.soteria_layer.as_deref() != Some("dense1") && detail.is_empty() {
            detail = format!("pruned layer identified as {:?}", est.soteria_layer);
        }
        let position = defended
            .grads
            .entries()
            .iter()
            .position(|e| e.layer == "dense1" && e.param == "weight")
            .unwrap();
        let recovered = est.masks[position].as_ref();
        let truth = applied.weight_mask(12);
        checked += 1;
        if recovered != Some(&truth) && detail.is_empty() {
            detail = "recovered pruning mask differs from the applied mask".to_string();
        }
    }
    property("estimation-round-trip", checked, worst, detail)
}

fn check_cosine_invariance(seed: u64) -> CheckOutcome {
    let mut rng = RandomSource::new(seed ^ 0xc05e);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut detail = String::new();
    let vector = |rng: &mut RandomSource, n: usize| -> GradientVector {
        GradientVector::from_entries(vec![GradEntry {
            layer: "only".into(),
            param: "weight".into(),
            tensor: Tensor::from_raw(vec![n], (0..n).map(|_| rng.next_gaussian()).collect()),
        }])
    };
    for _ in 0..100 {
        let n = 8;
        let y = vector(&mut rng, n);
        let candidate = vector(&mut rng, n);
        let scale = 10f64.powf(rng.uniform_in(-3.0, 3.0));
        let scaled = GradientVector::from_entries(vec![GradEntry {
            layer: "only".into(),
            param: "weight".into(),
            tensor: y.entries()[0].tensor.scale(scale).unwrap(),
        }]);
        let base = adversary::loss_cosine(&y, &candidate).unwrap();
        let after = adversary::loss_cosine(&scaled, &candidate).unwrap();
        let err = (base - after).abs();
        checked += 1;
        worst = worst.max(err / 1e-12);
        if err > 1e-12 && detail.is_empty() {
            detail = format!("distance moved by {err:.3e} under scale {scale:.3e}");
        }
    }
    // Scaling the observed share must not reorder a candidate set.
    let y = vector(&mut rng, 12);
    let candidates: Vec<GradientVector> = (0..20).map(|_| vector(&mut rng, 12)).collect();
    let argmin = |target: &GradientVector| -> usize {
        let mut best = 0;
        let mut best_v = f64::INFINITY;
        for (i, c) in candidates.iter().enumerate() {
            let v = adversary::loss_cosine(target, c).unwrap();
            if v < best_v {
                best_v = v;
                best = i;
            }
        }
        best
    };
    let reference = argmin(&y);
    for scale in [1e-3, 0.5, 7.0, 4096.0] {
        let scaled = GradientVector::from_entries(vec![GradEntry {
            layer: "only".into(),
            param: "weight".into(),
            tensor: y.entries()[0].tensor.scale(scale).unwrap(),
        }]);
        checked += 1;
        let got = argmin(&scaled);
        if got != reference && detail.is_empty() {
            detail = format!("argmin moved from {reference} to {got} under scale {scale}");
        }
    }
    property("cosine-scale-invariance", checked, worst, detail)
}

fn check_landscape(seed: u64) -> CheckOutcome {
    let mut rng = RandomSource::new(seed ^ 0x1a5d);
    let mut checked = 0;
    let mut detail = String::new();
    let f = |z: &[f64]| -> f64 {
        z.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum()
    };
    for _ in 0..5 {
        let k = 6;
        let z1: Vec<f64> = (0..k).map(|_| rng.next_gaussian()).collect();
        let z2: Vec<f64> = (0..k).map(|_| rng.next_gaussian()).collect();
        let eta: Vec<f64> = (0..k).map(|_| rng.next_gaussian()).collect();
        let line = metrics::landscape_1d(&f, None, &z1, &z2, 7, (-0.25, 1.25)).unwrap();
        let start = line.iter().find(|s| s.alpha == 0.0).unwrap();
        let end = line.iter().find(|s| s.alpha == 1.0).unwrap();
        checked += 2;
        if start.loss.to_bits() != f(&z1).to_bits() && detail.is_empty() {
            detail = "line walk start differs from direct evaluation".into();
        }
        if end.loss.to_bits() != f(&z2).to_bits() && detail.is_empty() {
            detail = "line walk end differs from direct evaluation".into();
        }
        let plane =
            metrics::landscape_2d(&f, None, &z1, &z2, &eta, 7, 5, (-0.25, 1.25), (-1.0, 1.0))
                .unwrap();
        let center: Vec<f64> = plane
            .iter()
            .filter(|s| s.beta == Some(0.0))
            .map(|s| s.loss)
            .collect();
        checked += 1;
        if center.len() != line.len()
            || center
                .iter()
                .zip(&line)
                .any(|(p, l)| p.to_bits() != l.loss.to_bits())
        {
            if detail.is_empty() {
                detail = "plane center row differs from the line walk".into();
            }
        }
    }
    property("landscape-interpolation-exactness", checked, 0.0, detail)
}

fn check_image_round_trip(seed: u64) -> CheckOutcome {
    let mut rng = RandomSource::new(seed ^ 0x1746);
    let mut checked = 0;
    let mut detail = String::new();
    for (channels, label) in [(1usize, "grayscale"), (3usize, "color")] {
        for trial in 0..5 {
            let shape = vec![channels, 4 + trial, 3 + trial];
            let raw = random_image(&shape, &mut rng);
            // Quantize once; a second pass through bytes must be exact.
            let bytes = imageio::encode_image(&raw).unwrap();
            let decoded = imageio::decode_image(&bytes).unwrap();
            let again = imageio::encode_image(&decoded).unwrap();
            checked += 1;
            if bytes != again && detail.is_empty() {
                detail = format!("{label} image bytes changed on the second pass");
            }
            let twice = imageio::decode_image(&again).unwrap();
            checked += 1;
            if twice != decoded && detail.is_empty() {
                detail = format!("{label} image values changed on the second pass");
            }
        }
    }
    property("image-quantization-round-trip", checked, 0.0, detail)
}

fn check_weight_round_trip(seed: u64) -> CheckOutcome {
    let mut rng = RandomSource::new(seed ^ 0x3317);
    let mut checked = 0;
    let mut detail = String::new();
    for (name, shape, classes) in
        [("mlp-small", vec![1, 5, 5], 3usize), ("cnn-small", vec![1, 6, 6], 4usize)]
    {
        let net = Network::preset(name, &shape, classes, rng.split(checked as u64).seed()).unwrap();
        let bytes = net.to_container_bytes();
        let tensors = container::decode(ContainerKind::Weights, &bytes).unwrap();
        let back = Network::from_tensors(&tensors).unwrap();
        checked += 1;
        if back.content_id() != net.content_id() && detail.is_empty() {
            detail = format!("{name} weights changed identity across serialization");
        }
        let x = random_image(&shape, &mut rng);
        let a = net.param_gradients(&x, 0).unwrap().flatten();
        let b = back.param_gradients(&x, 0).unwrap().flatten();
        checked += 1;
        if a.iter().zip(&b).any(|(u, v)| u.to_bits() != v.to_bits()) && detail.is_empty() {
            detail = format!("{name} gradients differ after weight round-trip");
        }
    }
    property("weight-container-round-trip", checked, 0.0, detail)
}

fn check_in_range_objective(seed: u64) -> CheckOutcome {
    let rng = RandomSource::new(seed ^ 0x0b1e);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut detail = String::new();
    for trial in 0..5u64 {
        let net = Network::preset("mlp-small", &[1, 6, 6], 4, rng.split(trial).seed()).unwrap();
        let generator =
            Generator::random(GeneratorKind::Linear, 8, &[1, 6, 6], rng.split(50 + trial).seed())
                .unwrap();
        let mut stream = rng.split(900 + trial);
        let z0: Vec<f64> = (0..8).map(|_| stream.next_gaussian().clamp(-1.9, 1.9)).collect();
        let image = generator.generate(&z0).unwrap();
        let share = produce_share(&net, &image, (trial % 4) as usize, &DefenseConfig::none())
            .unwrap();
        let est = adversary::estimate_transform(&share);
        let mut config = adversary::AttackConfig::new(0);
        config.lambda = 0.0;
        config.loss = MatchLoss::SquaredL2;
        let ctx = adversary::AttackContext {
            share: &share,
            net: &net,
            generator: &generator,
            label: (trial % 4) as usize,
            transform: &est,
            config: &config,
        };
        let value = adversary::objective(&z0, &ctx).unwrap();
        checked += 1;
        worst = worst.max(value / 1e-18);
        if value > 1e-18 && detail.is_empty() {
            detail = format!("objective {value:.3e} at the generating latent");
        }
    }
    property("in-range-objective-floor", checked, worst, detail)
}

/// Runs the full battery. Deterministic in `seed`.
pub fn run(seed: u64) -> SelftestReport {
    let mut checks = Vec::new();
    checks.extend(check_param_gradients(seed, 6));
    checks.extend(check_representation_jacobians(seed, 6));
    checks.push(check_clip(seed));
    checks.push(check_sparsify(seed));
    checks.push(check_soteria(seed));
    checks.push(check_label_inference(seed, 100));
    checks.push(check_estimation(seed));
    checks.push(check_cosine_invariance(seed));
    checks.push(check_landscape(seed));
    checks.push(check_image_round_trip(seed));
    checks.push(check_weight_round_trip(seed));
    checks.push(check_in_range_objective(seed));
    SelftestReport { checks }
}
