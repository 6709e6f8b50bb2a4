//! Gradient defenses applied by the client before sharing.
//!
//! Four transforms are supported and compose in the configured order:
//!
//! * `Clip`: per-tensor norm bounding, `y / max(1, |y| / bound)`.
//! * `Noise`: additive Gaussian perturbation of every entry.
//! * `Sparsify`: per-tensor magnitude pruning to a target zero fraction.
//! * `Soteria`: representation-space pruning realized as a mask on the
//!   defended Dense layer's weight gradient.
//!
//! A Soteria step must come first (it reasons about the clean gradient) and
//! at most one may appear. Everything here is deterministic given the noise
//! seed; noise draws walk the gradient entries in share order, each tensor
//! row major.

use crate::error::{Error, Result};
use crate::nn::{GradientVector, Network};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// Score denominator guard; keeps entries with a vanishing input Jacobian
/// from dividing by zero.
pub const SOTERIA_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum DefenseStep {
    Clip { bound: f64 },
    Noise { sigma: f64 },
    Sparsify { rate: f64 },
    Soteria { rate: f64, layer: String },
}

/// Ordered defense pipeline plus the seed that fixes the noise draws.
#[derive(Debug, Clone, PartialEq)]
pub struct DefenseConfig {
    pub steps: Vec<DefenseStep>,
    pub noise_seed: u64,
}

impl DefenseConfig {
    pub fn none() -> Self {
        DefenseConfig {
            steps: Vec::new(),
            noise_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let soteria_positions: Vec<usize> = self
            .steps
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, DefenseStep::Soteria { .. }))
            .map(|(i, _)| i)
            .collect();
        if soteria_positions.len() > 1 {
            return Err(Error::InvalidArgument("at most one soteria step".into()));
        }
        if let Some(&pos) = soteria_positions.first() {
            if pos != 0 {
                return Err(Error::InvalidArgument(
                    "a soteria step must come first (it scores the clean gradient)".into(),
                ));
            }
        }
        for step in &self.steps {
            match step {
                DefenseStep::Clip { bound } => {
                    if !(bound.is_finite() && *bound > 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "clip bound must be positive, got {bound}"
                        )));
                    }
                }
                DefenseStep::Noise { sigma } => {
                    if !(sigma.is_finite() && *sigma >= 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "noise sigma must be >= 0, got {sigma}"
                        )));
                    }
                }
                DefenseStep::Sparsify { rate } | DefenseStep::Soteria { rate, .. } => {
                    if !(rate.is_finite() && (0.0..1.0).contains(rate)) {
                        return Err(Error::InvalidArgument(format!(
                            "pruning rate must lie in [0, 1), got {rate}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scales each gradient tensor onto the norm ball of radius `bound`:
/// tensors already inside are untouched, larger ones keep their direction
/// and land exactly on the boundary. Idempotent.
pub fn clip(grads: &GradientVector, bound: f64) -> Result<GradientVector> {
    if !(bound.is_finite() && bound > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "clip bound must be positive, got {bound}"
        )));
    }
    let entries = grads
        .entries()
        .iter()
        .map(|e| {
            let norm = e.tensor.l2_norm()?;
            let mut out = e.clone();
            if norm > bound {
                out.tensor = e.tensor.scale(bound / norm)?;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradientVector::from_entries(entries))
}

/// Adds `N(0, sigma^2)` noise to every entry. Draw order is the share
/// order, so the result is a pure function of `(grads, sigma, rng state)`.
pub fn add_noise(
    grads: &GradientVector,
    sigma: f64,
    rng: &mut RandomSource,
) -> Result<GradientVector> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be >= 0, got {sigma}"
        )));
    }
    let entries = grads
        .entries()
        .iter()
        .map(|e| {
            let mut out = e.clone();
            let data = out.tensor.data_mut();
            for v in data.iter_mut() {
                *v += sigma * rng.next_gaussian();
            }
            out
        })
        .collect();
    Ok(GradientVector::from_entries(entries))
}

/// Zeroes the smallest-magnitude fraction `rate` of each tensor.
///
/// Per tensor with `n` entries the threshold is the `floor(rate * n)`-th
/// smallest absolute value (one-indexed; zero when that count is zero) and
/// entries survive only with magnitude strictly above it. Ties therefore
/// fall to the zeroed side, which can only push the zero fraction above
/// `rate`, never below.
pub fn sparsify(grads: &GradientVector, rate: f64) -> Result<GradientVector> {
    if !(rate.is_finite() && (0.0..1.0).contains(&rate)) {
        return Err(Error::InvalidArgument(format!(
            "pruning rate must lie in [0, 1), got {rate}"
        )));
    }
    let entries = grads
        .entries()
        .iter()
        .map(|e| {
            let mut out = e.clone();
            let n = out.tensor.numel();
            let m = (rate * n as f64).floor() as usize;
            if m == 0 {
                return out;
            }
            let mut mags: Vec<f64> = out.tensor.data().iter().map(|v| v.abs()).collect();
            mags.sort_by(|a, b| a.partial_cmp(b).expect("gradient entries are finite"));
            let threshold = mags[m - 1];
            for v in out.tensor.data_mut() {
                if v.abs() <= threshold {
                    *v = 0.0;
                }
            }
            out
        })
        .collect();
    Ok(GradientVector::from_entries(entries))
}

/// Which representation entries of the defended layer survive pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct SoteriaMask {
    pub layer: String,
    /// `keep[i]` is false for pruned representation entries.
    pub keep: Vec<bool>,
}

impl SoteriaMask {
    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    /// Mask over the defended layer's weight gradient: zero in every column
    /// that belongs to a pruned representation entry.
    pub fn weight_mask(&self, out_width: usize) -> Tensor {
        let l = self.keep.len();
        let mut data = vec![1.0; out_width * l];
        for (i, keep) in self.keep.iter().enumerate() {
            if !keep {
                for o in 0..out_width {
                    data[o * l + i] = 0.0;
                }
            }
        }
        Tensor::from_raw(vec![out_width, l], data)
    }
}

/// Scores the defended layer's input entries and selects the prune set.
///
/// Entry `i` scores `|r_i| / (|d r_i / d x| + 1e-12)`; the
/// `floor(rate * l)` entries with the largest scores are pruned, ties
/// broken toward the lower index. A dead entry (zero value and zero
/// Jacobian row) scores zero and so is never pruned ahead of any entry
/// with a positive score.
pub fn soteria_mask(
    net: &Network,
    x: &Tensor,
    rate: f64,
    layer: &str,
) -> Result<SoteriaMask> {
    if !(rate.is_finite() && (0.0..1.0).contains(&rate)) {
        return Err(Error::InvalidArgument(format!(
            "pruning rate must lie in [0, 1), got {rate}"
        )));
    }
    let (r, jac) = net.layer_input_jacobian(x, layer)?;
    let l = r.numel();
    let d = x.numel();
    let mut scores: Vec<(usize, f64)> = (0..l)
        .map(|i| {
            let row = &jac.data()[i * d..(i + 1) * d];
            let row_norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            (i, r.data()[i].abs() / (row_norm + SOTERIA_EPS))
        })
        .collect();
    scores.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("scores are finite")
            .then(a.0.cmp(&b.0))
    });
    let prune_count = (rate * l as f64).floor() as usize;
    let mut keep = vec![true; l];
    for &(i, _) in scores.iter().take(prune_count) {
        keep[i] = false;
    }
    Ok(SoteriaMask {
        layer: layer.to_string(),
        keep,
    })
}

/// Applies a Soteria mask to a gradient vector: the defended layer's
/// weight-gradient columns of pruned entries become zero, its bias and all
/// other layers are untouched (the bias gradient does not involve the
/// representation, so pruning leaves it as is).
pub fn apply_soteria_mask(grads: &GradientVector, mask: &SoteriaMask) -> Result<GradientVector> {
    let mut found = false;
    let entries = grads
        .entries()
        .iter()
        .map(|e| {
            let mut out = e.clone();
            if e.layer == mask.layer && e.param == "weight" {
                found = true;
                let shape = e.tensor.shape().to_vec();
                if shape.len() != 2 || shape[1] != mask.keep.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "soteria mask over {} entries does not fit weight gradient {:?}",
                        mask.keep.len(),
                        shape
                    )));
                }
                let l = mask.keep.len();
                let data = out.tensor.data_mut();
                for o in 0..shape[0] {
                    for (i, keep) in mask.keep.iter().enumerate() {
                        if !keep {
                            data[o * l + i] = 0.0;
                        }
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    if !found {
        return Err(Error::LayerNotFound(mask.layer.clone()));
    }
    Ok(GradientVector::from_entries(entries))
}

/// Runs the full defended-share pipeline: exact gradient, then each
/// configured step in order. Deterministic given the rng state.
pub fn apply_defense(
    net: &Network,
    x: &Tensor,
    class: usize,
    cfg: &DefenseConfig,
    rng: &mut RandomSource,
) -> Result<GradientVector> {
    cfg.validate()?;
    let mut grads = net.param_gradients(x, class)?;
    for step in &cfg.steps {
        grads = match step {
            DefenseStep::Clip { bound } => clip(&grads, *bound)?,
            DefenseStep::Noise { sigma } => add_noise(&grads, *sigma, rng)?,
            DefenseStep::Sparsify { rate } => sparsify(&grads, *rate)?,
            DefenseStep::Soteria { rate, layer } => {
                let mask = soteria_mask(net, x, *rate, layer)?;
                apply_soteria_mask(&grads, &mask)?
            }
        };
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{GradEntry, LayerParams, LayerSpec};

    fn grads_from(tensors: Vec<(&str, &str, Tensor)>) -> GradientVector {
        GradientVector::from_entries(
            tensors
                .into_iter()
                .map(|(layer, param, tensor)| GradEntry {
                    layer: layer.into(),
                    param: param.into(),
                    tensor,
                })
                .collect(),
        )
    }

    fn small_net(seed: u64) -> (Network, Tensor) {
        let net = Network::preset("mlp-small", &[1, 4, 4], 5, seed).unwrap();
        let mut rng = RandomSource::new(seed + 1000);
        let x = Tensor::from_raw(vec![1, 4, 4], (0..16).map(|_| rng.next_uniform()).collect());
        (net, x)
    }

    #[test]
    fn clip_rescales_onto_the_ball() {
        let g = grads_from(vec![("a", "weight", Tensor::from_vec(vec![3.0, 4.0]).unwrap())]);
        let clipped = clip(&g, 2.5).unwrap();
        let t = &clipped.entries()[0].tensor;
        assert!((t.data()[0] - 1.5).abs() < 1e-12);
        assert!((t.data()[1] - 2.0).abs() < 1e-12);
        assert!((t.l2_norm().unwrap() - 2.5).abs() < 1e-12);

        // A bound above the norm leaves the tensor untouched.
        let loose = clip(&g, 10.0).unwrap();
        assert_eq!(loose.entries()[0].tensor, g.entries()[0].tensor);
    }

    #[test]
    fn clip_is_idempotent_and_direction_preserving() {
        let (net, x) = small_net(3);
        let g = net.param_gradients(&x, 2).unwrap();
        let once = clip(&g, 0.05).unwrap();
        let twice = clip(&once, 0.05).unwrap();
        for (a, b) in once.entries().iter().zip(twice.entries()) {
            for (u, v) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
        // Direction: cosine between original and clipped tensor is one.
        for (orig, cl) in g.entries().iter().zip(once.entries()) {
            let dot = orig.tensor.dot(&cl.tensor).unwrap();
            let denom = orig.tensor.l2_norm().unwrap() * cl.tensor.l2_norm().unwrap();
            assert!((dot / denom - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sparsify_matches_the_worked_example() {
        let g = grads_from(vec![(
            "a",
            "weight",
            Tensor::from_vec(vec![1.0, -2.0, 3.0, 0.5]).unwrap(),
        )]);
        let s = sparsify(&g, 0.5).unwrap();
        assert_eq!(s.entries()[0].tensor.data(), &[0.0, -2.0, 3.0, 0.0]);
    }

    #[test]
    fn sparsify_zero_fraction_is_at_least_the_rate() {
        let (net, x) = small_net(7);
        let g = net.param_gradients(&x, 1).unwrap();
        for rate in [0.1, 0.5, 0.9] {
            let s = sparsify(&g, rate).unwrap();
            for e in s.entries() {
                assert!(
                    e.tensor.zero_fraction() >= rate - 1.0 / e.tensor.numel() as f64 - 1e-12,
                    "tensor {}.{} rate {rate}: fraction {}",
                    e.layer,
                    e.param,
                    e.tensor.zero_fraction()
                );
                // The floor rule guarantees at least floor(rate * n) zeros.
                let n = e.tensor.numel();
                let zeros = e.tensor.data().iter().filter(|v| **v == 0.0).count();
                assert!(zeros >= (rate * n as f64).floor() as usize);
            }
        }
    }

    #[test]
    fn sparsify_survivors_are_top_magnitudes() {
        let data: Vec<f64> = (1..=10).map(|v| v as f64 * if v % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let g = grads_from(vec![("a", "weight", Tensor::from_vec(data.clone()).unwrap())]);
        let s = sparsify(&g, 0.7).unwrap();
        let out = s.entries()[0].tensor.data();
        // floor(0.7 * 10) = 7 smallest magnitudes go, 8..10 survive.
        for (i, v) in out.iter().enumerate() {
            if data[i].abs() >= 8.0 {
                assert_eq!(*v, data[i]);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn noise_zero_sigma_is_identity_and_seeds_reproduce() {
        let (net, x) = small_net(9);
        let g = net.param_gradients(&x, 0).unwrap();
        let mut rng = RandomSource::new(50);
        let same = add_noise(&g, 0.0, &mut rng).unwrap();
        assert_eq!(same, g);

        let mut r1 = RandomSource::new(51);
        let mut r2 = RandomSource::new(51);
        let a = add_noise(&g, 0.1, &mut r1).unwrap();
        let b = add_noise(&g, 0.1, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, g);
    }

    #[test]
    fn composition_order_matters() {
        let (net, x) = small_net(13);
        let g = net.param_gradients(&x, 3).unwrap();
        let mut r1 = RandomSource::new(1);
        let mut r2 = RandomSource::new(1);
        let clip_then_noise = add_noise(&clip(&g, 0.01).unwrap(), 0.05, &mut r1).unwrap();
        let noise_then_clip = clip(&add_noise(&g, 0.05, &mut r2).unwrap(), 0.01).unwrap();
        assert_ne!(clip_then_noise, noise_then_clip);
    }

    #[test]
    fn soteria_identity_extractor_scores_reduce_to_pixel_magnitudes() {
        // Feature extractor is an identity Dense followed by ReLU, so for a
        // strictly positive input the representation is the input itself
        // and every Jacobian row is a unit vector: scores become |x_i|.
        let d = 6;
        let mut weight = vec![0.0; d * d];
        for i in 0..d {
            weight[i * d + i] = 1.0;
        }
        let layers = vec![
            LayerSpec::Dense { input: d, output: d },
            LayerSpec::ReLU,
            LayerSpec::Dense { input: d, output: 3 },
        ];
        let params = vec![
            Some(LayerParams {
                weight: Tensor::from_raw(vec![d, d], weight),
                bias: Tensor::zeros(&[d]),
            }),
            None,
            Some(LayerParams {
                weight: Tensor::filled(&[3, d], 0.1).unwrap(),
                bias: Tensor::zeros(&[3]),
            }),
        ];
        let net = Network::with_params(&[d], layers, params, 3).unwrap();
        let x = Tensor::from_vec(vec![0.9, 0.1, 0.5, 0.3, 0.7, 0.2]).unwrap();
        let mask = soteria_mask(&net, &x, 0.5, "dense1").unwrap();
        // floor(0.5 * 6) = 3 largest pixels pruned: 0.9, 0.7, 0.5.
        assert_eq!(mask.keep, vec![false, true, false, true, false, true]);
        assert_eq!(mask.pruned_count(), 3);
    }

    #[test]
    fn soteria_mask_touches_only_the_defended_layer() {
        let (net, x) = small_net(17);
        let g = net.param_gradients(&x, 2).unwrap();
        let mask = soteria_mask(&net, &x, 0.8, "dense1").unwrap();
        let masked = apply_soteria_mask(&g, &mask).unwrap();
        assert_eq!(mask.pruned_count(), (0.8f64 * 64.0).floor() as usize);
        for (orig, out) in g.entries().iter().zip(masked.entries()) {
            if orig.layer == "dense1" && orig.param == "weight" {
                let l = mask.keep.len();
                for o in 0..orig.tensor.shape()[0] {
                    for i in 0..l {
                        let v = out.tensor.data()[o * l + i];
                        if mask.keep[i] {
                            assert_eq!(v, orig.tensor.data()[o * l + i]);
                        } else {
                            assert_eq!(v, 0.0);
                        }
                    }
                }
            } else {
                // Bit-identical elsewhere, bias of the defended layer included.
                assert_eq!(orig.tensor, out.tensor);
            }
        }
    }

    #[test]
    fn soteria_config_rules() {
        let bad = DefenseConfig {
            steps: vec![
                DefenseStep::Soteria { rate: 0.5, layer: "dense1".into() },
                DefenseStep::Soteria { rate: 0.5, layer: "dense1".into() },
            ],
            noise_seed: 0,
        };
        let err = bad.validate().unwrap_err();
        assert!(err.to_string().contains("at most one soteria step"));

        let misplaced = DefenseConfig {
            steps: vec![
                DefenseStep::Clip { bound: 1.0 },
                DefenseStep::Soteria { rate: 0.5, layer: "dense1".into() },
            ],
            noise_seed: 0,
        };
        assert!(misplaced.validate().is_err());
    }

    #[test]
    fn apply_defense_is_deterministic_given_seed() {
        let (net, x) = small_net(23);
        let cfg = DefenseConfig {
            steps: vec![
                DefenseStep::Clip { bound: 0.5 },
                DefenseStep::Noise { sigma: 0.01 },
                DefenseStep::Sparsify { rate: 0.5 },
            ],
            noise_seed: 77,
        };
        let mut r1 = RandomSource::new(cfg.noise_seed);
        let mut r2 = RandomSource::new(cfg.noise_seed);
        let a = apply_defense(&net, &x, 1, &cfg, &mut r1).unwrap();
        let b = apply_defense(&net, &x, 1, &cfg, &mut r2).unwrap();
        assert_eq!(a, b);
    }
}
