//! The honest-but-curious participant's side: compute the training gradient
//! of one example, push it through the configured defense, and package the
//! result for transmission.
//!
//! A share deliberately carries no defense parameters. The receiving side
//! sees the gradient tensors, the model content id, the input geometry and
//! the class count, nothing else; anything more would hand an attacker the
//! transform for free and anything less would make honest aggregation
//! impossible.

use std::path::Path;

use crate::container::{self, ContainerKind, NamedTensor};
use crate::defense::{self, DefenseConfig};
use crate::error::{Error, Result};
use crate::nn::{GradEntry, GradientVector, Network};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// A defended gradient share as it travels to the aggregator.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedGradients {
    pub grads: GradientVector,
    /// Content id of the weight file the gradient was computed against.
    pub model_id: String,
    pub image_shape: Vec<usize>,
    pub class_count: usize,
}

/// Computes the defended share for one `(image, label)` example.
///
/// The image must live in `[0, 1]` and match the network's input shape.
/// Deterministic: the defense's noise draws come from a fresh source seeded
/// with `cfg.noise_seed`.
pub fn produce_share(
    net: &Network,
    x: &Tensor,
    class: usize,
    cfg: &DefenseConfig,
) -> Result<SharedGradients> {
    if x.shape() != net.input_shape() {
        return Err(Error::ShapeMismatch(format!(
            "image shape {:?} does not match model input {:?}",
            x.shape(),
            net.input_shape()
        )));
    }
    if x.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidArgument(
            "image values must lie in [0, 1]".into(),
        ));
    }
    if class >= net.class_count() {
        return Err(Error::ClassOutOfRange {
            index: class,
            count: net.class_count(),
        });
    }
    let mut rng = RandomSource::new(cfg.noise_seed);
    let grads = defense::apply_defense(net, x, class, cfg, &mut rng)?;
    Ok(SharedGradients {
        grads,
        model_id: net.content_id(),
        image_shape: x.shape().to_vec(),
        class_count: net.class_count(),
    })
}

/// Serializes a share into gradient-container bytes. Metadata rides as two
/// header tensors so the container format stays a flat list of named
/// tensors.
pub fn encode_share(share: &SharedGradients) -> Vec<u8> {
    let mut meta = vec![
        share.class_count as f64,
        share.image_shape.len() as f64,
    ];
    meta.extend(share.image_shape.iter().map(|&d| d as f64));
    let id = u64::from_str_radix(&share.model_id, 16).unwrap_or(0);
    let id_tensor = Tensor::from_raw(
        vec![2],
        vec![(id >> 32) as f64, (id & 0xffff_ffff) as f64],
    );
    let mut tensors = vec![
        NamedTensor::new("meta.share", Tensor::from_raw(vec![meta.len()], meta)),
        NamedTensor::new("meta.model_id", id_tensor),
    ];
    for e in share.grads.entries() {
        tensors.push(NamedTensor::new(
            format!("{}.{}", e.layer, e.param),
            e.tensor.clone(),
        ));
    }
    container::encode(ContainerKind::Gradients, &tensors)
}

/// Parses gradient-container bytes back into a share.
pub fn decode_share(bytes: &[u8]) -> Result<SharedGradients> {
    let tensors = container::decode(ContainerKind::Gradients, bytes)?;
    let meta = tensors
        .iter()
        .find(|t| t.name == "meta.share")
        .ok_or_else(|| Error::InvalidArgument("gradient container has no share header".into()))?;
    let m = meta.tensor.data();
    if m.len() < 2 {
        return Err(Error::InvalidArgument("share header too short".into()));
    }
    let class_count = m[0] as usize;
    let ndim = m[1] as usize;
    if m.len() != 2 + ndim {
        return Err(Error::InvalidArgument("share header length mismatch".into()));
    }
    let image_shape: Vec<usize> = m[2..2 + ndim].iter().map(|&v| v as usize).collect();

    let id_tensor = tensors
        .iter()
        .find(|t| t.name == "meta.model_id")
        .ok_or_else(|| Error::InvalidArgument("gradient container has no model id".into()))?;
    let idd = id_tensor.tensor.data();
    if idd.len() != 2
        || idd.iter().any(|&v| v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64)
    {
        return Err(Error::InvalidArgument("malformed model id".into()));
    }
    let model_id = format!("{:016x}", ((idd[0] as u64) << 32) | idd[1] as u64);

    let entries = tensors
        .into_iter()
        .filter(|t| !t.name.starts_with("meta."))
        .map(|t| {
            let (layer, param) = t
                .name
                .rsplit_once('.')
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("gradient name {} has no parameter part", t.name))
                })?;
            Ok(GradEntry {
                layer: layer.to_string(),
                param: param.to_string(),
                tensor: t.tensor,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if entries.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(SharedGradients {
        grads: GradientVector::from_entries(entries),
        model_id,
        image_shape,
        class_count,
    })
}

pub fn write_share(path: &Path, share: &SharedGradients) -> Result<()> {
    container::write_bytes_atomic(path, &encode_share(share))
}

pub fn read_share(path: &Path) -> Result<SharedGradients> {
    decode_share(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defense::DefenseStep;

    fn fixture() -> (Network, Tensor) {
        let net = Network::preset("mlp-small", &[1, 4, 4], 5, 2).unwrap();
        let mut rng = RandomSource::new(60);
        let x = Tensor::from_raw(vec![1, 4, 4], (0..16).map(|_| rng.next_uniform()).collect());
        (net, x)
    }

    #[test]
    fn share_round_trips_exactly() {
        let (net, x) = fixture();
        let cfg = DefenseConfig {
            steps: vec![DefenseStep::Sparsify { rate: 0.5 }],
            noise_seed: 4,
        };
        let share = produce_share(&net, &x, 3, &cfg).unwrap();
        let bytes = encode_share(&share);
        let back = decode_share(&bytes).unwrap();
        assert_eq!(share, back);
        // Encoding is canonical: re-encoding reproduces identical bytes.
        assert_eq!(encode_share(&back), bytes);
    }

    #[test]
    fn model_id_matches_the_network_content_id() {
        let (net, x) = fixture();
        let share = produce_share(&net, &x, 0, &DefenseConfig::none()).unwrap();
        assert_eq!(share.model_id, net.content_id());
    }

    #[test]
    fn out_of_range_image_is_rejected() {
        let (net, mut x) = fixture();
        x.data_mut()[0] = 1.5;
        let err = produce_share(&net, &x, 0, &DefenseConfig::none()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        let (net, x) = fixture();
        let err = produce_share(&net, &x, 9, &DefenseConfig::none()).unwrap_err();
        assert!(matches!(err, Error::ClassOutOfRange { index: 9, count: 5 }));
    }

    #[test]
    fn share_production_is_deterministic() {
        let (net, x) = fixture();
        let cfg = DefenseConfig {
            steps: vec![DefenseStep::Noise { sigma: 0.05 }],
            noise_seed: 123,
        };
        let a = produce_share(&net, &x, 2, &cfg).unwrap();
        let b = produce_share(&net, &x, 2, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(encode_share(&a), encode_share(&b));
    }

    #[test]
    fn weight_container_bytes_are_not_a_share() {
        let (net, _) = fixture();
        let err = decode_share(&net.to_container_bytes()).unwrap_err();
        assert!(matches!(err, Error::NotAGradientContainer));
    }
}
