//! Randomized invariants of the defenses, the metrics, and the byte
//! formats. Each property is a claim the rest of the system leans on;
//! counterexamples here mean the acceptance suite cannot be trusted.

use proptest::prelude::*;

use gradaudit_core::adversary::{self, loss_cosine};
use gradaudit_core::client::{decode_share, encode_share, produce_share};
use gradaudit_core::container::{self, ContainerKind, NamedTensor};
use gradaudit_core::defense::{self, DefenseConfig};
use gradaudit_core::imageio;
use gradaudit_core::metrics::{self, PSNR_SENTINEL_DB};
use gradaudit_core::nn::{GradEntry, GradientVector, Network};
use gradaudit_core::rng::RandomSource;
use gradaudit_core::tensor::Tensor;

fn grads_from(parts: &[Vec<f64>]) -> GradientVector {
    let entries = parts
        .iter()
        .enumerate()
        .map(|(i, p)| GradEntry {
            layer: format!("layer{i}"),
            param: "weight".to_string(),
            tensor: Tensor::from_vec(p.clone()).expect("finite test data"),
        })
        .collect();
    GradientVector::from_entries(entries)
}

fn tensor_parts() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        prop::collection::vec(-100.0f64..100.0, 1..24),
        1..4,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn clip_norms_and_directions(parts in tensor_parts(), bound in 0.01f64..50.0) {
        let grads = grads_from(&parts);
        let clipped = defense::clip(&grads, bound).unwrap();
        for (orig, out) in grads.entries().iter().zip(clipped.entries()) {
            let norm_in = orig.tensor.l2_norm().unwrap();
            let norm_out = out.tensor.l2_norm().unwrap();
            let expected = norm_in.min(bound);
            prop_assert!(
                (norm_out - expected).abs() <= 1e-12 * expected.max(1.0),
                "norm {norm_out} should be {expected}"
            );
            // Direction survives: the output is a non-negative multiple of
            // the input, so cross terms vanish entrywise.
            let scale = if norm_in > bound { bound / norm_in } else { 1.0 };
            for (a, b) in orig.tensor.data().iter().zip(out.tensor.data()) {
                prop_assert!((a * scale - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn clip_is_idempotent_within_tolerance(parts in tensor_parts(), bound in 0.01f64..50.0) {
        let grads = grads_from(&parts);
        let once = defense::clip(&grads, bound).unwrap();
        let twice = defense::clip(&once, bound).unwrap();
        for (a, b) in once.entries().iter().zip(twice.entries()) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sparsify_keeps_exactly_the_largest_magnitudes(
        values in prop::collection::vec(-100.0f64..100.0, 4..40),
        rate in 0.05f64..0.95,
    ) {
        // Ties in magnitude make "the top (1 - rate) fraction" ambiguous;
        // continuous draws collide with probability zero, discard if so.
        let mut mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
        mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assume!(mags.windows(2).all(|w| w[0] != w[1]));

        let grads = grads_from(&[values.clone()]);
        let sparse = defense::sparsify(&grads, rate).unwrap();
        let out = sparse.entries()[0].tensor.data();

        let n = values.len();
        let expected_zeros = (rate * n as f64).floor() as usize;
        let zeroed: Vec<usize> = (0..n).filter(|&i| out[i] == 0.0).collect();
        prop_assert_eq!(zeroed.len(), expected_zeros);

        let max_zeroed = zeroed
            .iter()
            .map(|&i| values[i].abs())
            .fold(0.0f64, f64::max);
        for i in 0..n {
            if out[i] != 0.0 {
                prop_assert_eq!(out[i], values[i], "survivors pass through unchanged");
                prop_assert!(values[i].abs() > max_zeroed);
            }
        }
    }

    #[test]
    fn cosine_loss_ignores_positive_scale(
        a in prop::collection::vec(-10.0f64..10.0, 3..20),
        b_seed in prop::collection::vec(-10.0f64..10.0, 3..20),
        c in 0.001f64..1000.0,
    ) {
        let n = a.len().min(b_seed.len());
        let a = a[..n].to_vec();
        let b = b_seed[..n].to_vec();
        prop_assume!(a.iter().any(|v| *v != 0.0) && b.iter().any(|v| *v != 0.0));
        let ga = grads_from(&[a.clone()]);
        let gb = grads_from(&[b]);
        let scaled = grads_from(&[a.iter().map(|v| v * c).collect::<Vec<_>>()]);
        let base = loss_cosine(&ga, &gb).unwrap();
        let after = loss_cosine(&scaled, &gb).unwrap();
        prop_assert!((base - after).abs() <= 1e-12, "{base} vs {after}");
    }

    #[test]
    fn noise_is_deterministic_in_the_seed(
        parts in tensor_parts(),
        sigma in 0.0f64..5.0,
        seed in any::<u64>(),
    ) {
        let grads = grads_from(&parts);
        let mut r1 = RandomSource::new(seed);
        let mut r2 = RandomSource::new(seed);
        let n1 = defense::add_noise(&grads, sigma, &mut r1).unwrap();
        let n2 = defense::add_noise(&grads, sigma, &mut r2).unwrap();
        prop_assert_eq!(&n1, &n2);
        if sigma == 0.0 {
            prop_assert_eq!(&n1, &grads);
        }
    }

    #[test]
    fn psnr_is_symmetric_and_tops_out_at_the_sentinel(
        a in prop::collection::vec(0.0f64..1.0, 4..32),
        b in prop::collection::vec(0.0f64..1.0, 4..32),
    ) {
        let n = a.len().min(b.len());
        let ta = Tensor::from_vec(a[..n].to_vec()).unwrap();
        let tb = Tensor::from_vec(b[..n].to_vec()).unwrap();
        let ab = metrics::psnr(&ta, &tb).unwrap();
        let ba = metrics::psnr(&tb, &ta).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab <= PSNR_SENTINEL_DB);
        let self_match = metrics::psnr(&ta, &ta).unwrap();
        prop_assert_eq!(self_match, PSNR_SENTINEL_DB);
    }

    #[test]
    fn higher_mse_never_scores_higher_psnr(m1 in 1e-14f64..1.0, m2 in 1e-14f64..1.0) {
        let p1 = metrics::psnr_from_mse(m1).unwrap();
        let p2 = metrics::psnr_from_mse(m2).unwrap();
        if m1 < m2 {
            prop_assert!(p1 >= p2);
        }
    }

    #[test]
    fn weight_container_round_trips(parts in tensor_parts()) {
        let tensors: Vec<NamedTensor> = parts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                NamedTensor::new(format!("t{i}"), Tensor::from_vec(p.clone()).unwrap())
            })
            .collect();
        let bytes = container::encode(ContainerKind::Weights, &tensors);
        let back = container::decode(ContainerKind::Weights, &bytes).unwrap();
        prop_assert_eq!(&back, &tensors);
        let bytes_again = container::encode(ContainerKind::Weights, &back);
        prop_assert_eq!(bytes_again, bytes);
    }

    #[test]
    fn image_bytes_round_trip_exactly(
        pixels in prop::collection::vec(0.0f64..=1.0, 16),
        channels in prop::sample::select(vec![1usize, 3usize]),
    ) {
        let mut data = Vec::new();
        for _ in 0..channels {
            data.extend_from_slice(&pixels);
        }
        let t = Tensor::new(vec![channels, 4, 4], data).unwrap();
        let bytes = imageio::encode_image(&t).unwrap();
        let decoded = imageio::decode_image(&bytes).unwrap();
        prop_assert_eq!(decoded.shape(), t.shape());
        // Encoding quantizes to 8 bits; a decoded image re-encodes to the
        // same bytes because it sits exactly on the quantization grid.
        let bytes_again = imageio::encode_image(&decoded).unwrap();
        prop_assert_eq!(bytes_again, bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn share_codec_and_label_inference_agree(seed in any::<u64>(), class in 0usize..3) {
        let net = Network::preset("mlp-small", &[1, 5, 5], 3, seed).unwrap();
        let mut rng = RandomSource::new(seed ^ 0x9e3779b97f4a7c15);
        let n: usize = net.input_shape().iter().product();
        let x = Tensor::new(
            net.input_shape().to_vec(),
            (0..n).map(|_| rng.next_uniform()).collect(),
        )
        .unwrap();
        let share = produce_share(&net, &x, class, &DefenseConfig::none()).unwrap();

        let bytes = encode_share(&share);
        let back = decode_share(&bytes).unwrap();
        prop_assert_eq!(&back, &share);

        prop_assert_eq!(adversary::infer_label(&share).unwrap(), class);
    }

    #[test]
    fn soteria_prunes_the_floor_count_and_nothing_else(
        seed in any::<u64>(),
        rate in 0.1f64..0.9,
    ) {
        let net = Network::preset("mlp-small", &[1, 5, 5], 3, seed).unwrap();
        let mut rng = RandomSource::new(seed.wrapping_add(1));
        let n: usize = net.input_shape().iter().product();
        let x = Tensor::new(
            net.input_shape().to_vec(),
            (0..n).map(|_| rng.next_uniform()).collect(),
        )
        .unwrap();
        let plain = net.param_gradients(&x, 0).unwrap();
        let mask = defense::soteria_mask(&net, &x, rate, "dense0").unwrap();
        // The mask covers the layer's input representation, whose width is
        // the weight's column count.
        let l = plain.entry("dense0", "weight").unwrap().tensor.shape()[1];
        prop_assert_eq!(mask.pruned_count(), (rate * l as f64).floor() as usize);

        let defended = defense::apply_soteria_mask(&plain, &mask).unwrap();
        for (a, b) in plain.entries().iter().zip(defended.entries()) {
            if a.layer == "dense0" && a.param == "weight" {
                continue;
            }
            prop_assert_eq!(&a.tensor, &b.tensor, "{}.{} must pass through", a.layer, a.param);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn landscape_endpoints_evaluate_exactly(
        z1 in prop::collection::vec(-2.0f64..2.0, 4),
        z2 in prop::collection::vec(-2.0f64..2.0, 4),
        shift in -1.0f64..1.0,
    ) {
        let f = |z: &[f64]| -> f64 {
            z.iter().map(|v| (v - shift) * (v - shift) + 0.3 * v.sin()).sum()
        };
        // 13 points over the widened default range put grid nodes exactly
        // on alpha = 0 and alpha = 1 (the step divides 0.25 evenly).
        let samples = metrics::landscape_1d(&f, None, &z1, &z2, 13, (-0.25, 1.25)).unwrap();
        let at_zero = samples.iter().find(|s| s.alpha == 0.0).unwrap();
        let at_one = samples.iter().find(|s| s.alpha == 1.0).unwrap();
        prop_assert_eq!(at_zero.loss, f(&z1));
        prop_assert_eq!(at_one.loss, f(&z2));
    }

    #[test]
    fn plane_center_row_matches_the_line_walk(
        z1 in prop::collection::vec(-2.0f64..2.0, 4),
        z2 in prop::collection::vec(-2.0f64..2.0, 4),
        eta in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        prop_assume!(eta.iter().any(|v| *v != 0.0));
        let f = |z: &[f64]| -> f64 { z.iter().map(|v| v * v * v.cos()).sum() };
        let line = metrics::landscape_1d(&f, None, &z1, &z2, 11, (-0.25, 1.25)).unwrap();
        let plane = metrics::landscape_2d(
            &f, None, &z1, &z2, &eta, 11, 5, (-0.25, 1.25), (-1.0, 1.0),
        )
        .unwrap();
        let center: Vec<_> = plane.iter().filter(|s| s.beta == Some(0.0)).collect();
        prop_assert_eq!(center.len(), line.len());
        for (p, l) in center.iter().zip(&line) {
            prop_assert_eq!(p.alpha, l.alpha);
            prop_assert_eq!(p.loss, l.loss);
        }
    }
}
