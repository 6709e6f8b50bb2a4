//! Fixed-architecture classifier networks with hand-derived gradients.
//!
//! The layer vocabulary is intentionally closed: Dense, Conv2d, ReLU,
//! Sigmoid and Flatten. Every derivative in this module is written out by
//! hand and checked against central finite differences (see the `check`
//! module), because the whole point of the crate is that the parameter
//! gradient of a single training example is an exact, reproducible object
//! that can be shared, defended and inverted.
//!
//! Structural rules enforced at construction time:
//! * the last layer is Dense and its width equals the class count,
//! * walking backwards from that layer and skipping Flatten, the previous
//!   layer is ReLU or Sigmoid. The non-negative activation in front of the
//!   classifier head is what makes the ground-truth label readable from the
//!   gradient signs, so it is a construction invariant rather than a
//!   convention.
//!
//! The input of the final Dense layer is called the representation
//! throughout the crate.
//!
//! All computation is single example (batch size one) in `f64`.

use crate::container::{self, ContainerKind, NamedTensor};
use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// One layer of the closed architecture vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },
    ReLU,
    Sigmoid,
    Flatten,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Shape produced when this layer consumes `input` shaped data.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Dense {
                input: in_w,
                output,
            } => {
                let numel: usize = input.iter().product();
                if numel != *in_w {
                    return Err(Error::ShapeMismatch(format!(
                        "dense layer expects {in_w} inputs, incoming shape {input:?} has {numel}"
                    )));
                }
                Ok(vec![*output])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 {
                    return Err(Error::ShapeMismatch(format!(
                        "conv layer expects (channels, height, width), got {input:?}"
                    )));
                }
                let (c, h, w) = (input[0], input[1], input[2]);
                if c != *in_channels {
                    return Err(Error::ShapeMismatch(format!(
                        "conv layer expects {in_channels} channels, got {c}"
                    )));
                }
                let (kh, kw) = *kernel;
                let padded_h = h + 2 * padding;
                let padded_w = w + 2 * padding;
                if padded_h < kh || padded_w < kw {
                    return Err(Error::ShapeMismatch(format!(
                        "kernel {kh}x{kw} does not fit padded input {padded_h}x{padded_w}"
                    )));
                }
                let out_h = (padded_h - kh) / stride + 1;
                let out_w = (padded_w - kw) / stride + 1;
                Ok(vec![*out_channels, out_h, out_w])
            }
            LayerSpec::ReLU | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            LayerSpec::Dense { input, .. } => *input,
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel.0 * kernel.1,
            _ => 0,
        }
    }

    fn weight_shape(&self) -> Vec<usize> {
        match self {
            LayerSpec::Dense { input, output } => vec![*output, *input],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![*out_channels, *in_channels, kernel.0, kernel.1],
            _ => vec![],
        }
    }

    fn bias_shape(&self) -> Vec<usize> {
        match self {
            LayerSpec::Dense { output, .. } => vec![*output],
            LayerSpec::Conv2d { out_channels, .. } => vec![*out_channels],
            _ => vec![],
        }
    }
}

/// Weight and bias of one parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// One named gradient tensor inside a [`GradientVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub layer: String,
    pub param: String,
    pub tensor: Tensor,
}

/// Ordered collection of per-parameter gradient tensors. Order follows the
/// network's layer order, weight before bias, and is part of the share
/// format: two gradient vectors compare equal only entrywise in order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    entries: Vec<GradEntry>,
}

impl GradientVector {
    pub fn from_entries(entries: Vec<GradEntry>) -> Self {
        GradientVector { entries }
    }

    pub fn entries(&self) -> &[GradEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [GradEntry] {
        &mut self.entries
    }

    pub fn into_entries(self) -> Vec<GradEntry> {
        self.entries
    }

    pub fn entry(&self, layer: &str, param: &str) -> Option<&GradEntry> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.param == param)
    }

    /// Concatenates all tensors into one flat vector, in entry order.
    pub fn flatten(&self) -> Vec<f64> {
        let total: usize = self.entries.iter().map(|e| e.tensor.numel()).sum();
        let mut out = Vec::with_capacity(total);
        for e in &self.entries {
            out.extend_from_slice(e.tensor.data());
        }
        out
    }

    /// Euclidean norm over the full flattened vector.
    pub fn l2_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.tensor.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }
}

/// Cached activations of one forward evaluation.
///
/// `layer_inputs[i]` is the input to layer `i`; the final element is the
/// logits. Keeping every boundary makes both backpropagation and
/// representation extraction simple slices into the same structure.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    layer_inputs: Vec<Tensor>,
}

impl ForwardPass {
    pub fn logits(&self) -> &Tensor {
        self.layer_inputs.last().expect("forward pass is non-empty")
    }

    fn input_of(&self, layer: usize) -> &Tensor {
        &self.layer_inputs[layer]
    }
}

/// A classifier with fixed architecture and concrete parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    /// Aligned with `layers`; `None` for parameter-free layers.
    params: Vec<Option<LayerParams>>,
    /// Aligned with `layers`; parametric layers get `dense{i}` / `conv{i}`
    /// names with per-kind counters.
    names: Vec<Option<String>>,
    class_count: usize,
}

impl Network {
    /// Builds a network with freshly initialized parameters. Weights and
    /// biases draw from `uniform[-a, a]` with `a = sqrt(1 / fan_in)`, in
    /// layer order, weight entries (row major) before bias entries.
    pub fn new(
        input_shape: &[usize],
        layers: Vec<LayerSpec>,
        class_count: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = RandomSource::new(seed);
        let params = layers
            .iter()
            .map(|layer| {
                if !layer.has_params() {
                    return None;
                }
                let a = (1.0 / layer.fan_in() as f64).sqrt();
                let weight_shape = layer.weight_shape();
                let n: usize = weight_shape.iter().product();
                let weight_data: Vec<f64> = (0..n).map(|_| rng.uniform_in(-a, a)).collect();
                let bias_shape = layer.bias_shape();
                let bn: usize = bias_shape.iter().product();
                let bias_data: Vec<f64> = (0..bn).map(|_| rng.uniform_in(-a, a)).collect();
                Some(LayerParams {
                    weight: Tensor::from_raw(weight_shape, weight_data),
                    bias: Tensor::from_raw(bias_shape, bias_data),
                })
            })
            .collect();
        Self::assemble(input_shape, layers, params, class_count)
    }

    /// Builds a network around caller-supplied parameters, validating every
    /// shape against the layer specs.
    pub fn with_params(
        input_shape: &[usize],
        layers: Vec<LayerSpec>,
        params: Vec<Option<LayerParams>>,
        class_count: usize,
    ) -> Result<Self> {
        if params.len() != layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} layers but {} parameter slots",
                layers.len(),
                params.len()
            )));
        }
        for (i, (layer, p)) in layers.iter().zip(&params).enumerate() {
            match (layer.has_params(), p) {
                (true, Some(p)) => {
                    if p.weight.shape() != layer.weight_shape().as_slice()
                        || p.bias.shape() != layer.bias_shape().as_slice()
                    {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i} parameters do not match its spec"
                        )));
                    }
                }
                (false, None) => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "layer {i} parameter slot does not match the layer kind"
                    )));
                }
            }
        }
        Self::assemble(input_shape, layers, params, class_count)
    }

    fn assemble(
        input_shape: &[usize],
        layers: Vec<LayerSpec>,
        params: Vec<Option<LayerParams>>,
        class_count: usize,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network has no layers".into()));
        }
        if class_count < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {class_count}"
            )));
        }
        // Shape-check the whole pipeline once, so forward never has to.
        let mut shape = input_shape.to_vec();
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
        }
        match layers.last() {
            Some(LayerSpec::Dense { output, .. }) if *output == class_count => {}
            Some(LayerSpec::Dense { output, .. }) => {
                return Err(Error::InvalidArgument(format!(
                    "final dense width {output} does not match class count {class_count}"
                )));
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "final layer must be dense (it produces the logits)".into(),
                ));
            }
        }
        // Label readability requires a non-negative activation in front of
        // the head; Flatten in between is transparent.
        let mut saw_activation = false;
        for layer in layers[..layers.len() - 1].iter().rev() {
            match layer {
                LayerSpec::Flatten => continue,
                LayerSpec::ReLU | LayerSpec::Sigmoid => {
                    saw_activation = true;
                    break;
                }
                _ => break,
            }
        }
        if !saw_activation {
            return Err(Error::InvalidArgument(
                "a relu or sigmoid must feed the final dense layer".into(),
            ));
        }

        let mut dense_count = 0;
        let mut conv_count = 0;
        let names = layers
            .iter()
            .map(|layer| match layer {
                LayerSpec::Dense { .. } => {
                    let n = format!("dense{dense_count}");
                    dense_count += 1;
                    Some(n)
                }
                LayerSpec::Conv2d { .. } => {
                    let n = format!("conv{conv_count}");
                    conv_count += 1;
                    Some(n)
                }
                _ => None,
            })
            .collect();

        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            params,
            names,
            class_count,
        })
    }

    /// Builds one of the two stock architectures.
    ///
    /// * `mlp-small`: Dense(d, 64), ReLU, Dense(64, classes)
    /// * `cnn-small`: Conv(c, 8, 3x3, stride 1, pad 1), ReLU,
    ///   Conv(8, 16, 3x3, stride 2, pad 1), ReLU, Flatten,
    ///   Dense(flattened, classes)
    pub fn preset(
        name: &str,
        image_shape: &[usize],
        class_count: usize,
        seed: u64,
    ) -> Result<Self> {
        let layers = match name {
            "mlp-small" => {
                let d: usize = image_shape.iter().product();
                vec![
                    LayerSpec::Dense {
                        input: d,
                        output: 64,
                    },
                    LayerSpec::ReLU,
                    LayerSpec::Dense {
                        input: 64,
                        output: class_count,
                    },
                ]
            }
            "cnn-small" => {
                if image_shape.len() != 3 {
                    return Err(Error::ShapeMismatch(format!(
                        "cnn-small expects (channels, height, width), got {image_shape:?}"
                    )));
                }
                let head = vec![
                    LayerSpec::Conv2d {
                        in_channels: image_shape[0],
                        out_channels: 8,
                        kernel: (3, 3),
                        stride: 1,
                        padding: 1,
                    },
                    LayerSpec::ReLU,
                    LayerSpec::Conv2d {
                        in_channels: 8,
                        out_channels: 16,
                        kernel: (3, 3),
                        stride: 2,
                        padding: 1,
                    },
                    LayerSpec::ReLU,
                    LayerSpec::Flatten,
                ];
                let mut shape = image_shape.to_vec();
                for layer in &head {
                    shape = layer.output_shape(&shape)?;
                }
                let mut layers = head;
                layers.push(LayerSpec::Dense {
                    input: shape.iter().product(),
                    output: class_count,
                });
                layers
            }
            other => {
                return Err(Error::InvalidArgument(format!("unknown preset: {other}")));
            }
        };
        Network::new(image_shape, layers, class_count, seed)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Names of the parametric layers in forward order.
    pub fn layer_names(&self) -> Vec<&str> {
        self.names
            .iter()
            .filter_map(|n| n.as_deref())
            .collect()
    }

    /// Name of the final Dense layer (the classifier head).
    pub fn final_dense_name(&self) -> &str {
        self.names
            .last()
            .and_then(|n| n.as_deref())
            .expect("construction guarantees a named final dense layer")
    }

    /// Width of the representation (input of the final Dense layer).
    pub fn representation_width(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { input, .. }) => *input,
            _ => unreachable!("construction guarantees a final dense layer"),
        }
    }

    fn layer_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n.as_deref() == Some(name))
            .ok_or_else(|| Error::LayerNotFound(name.to_string()))
    }

    /// Runs the network on one input, caching every layer boundary.
    pub fn forward(&self, x: &Tensor) -> Result<ForwardPass> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "input shape {:?} does not match network input {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len() + 1);
        layer_inputs.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = layer_inputs.last().expect("at least the network input");
            let out = match layer {
                LayerSpec::Dense { input: in_w, output } => {
                    let p = self.params[i].as_ref().expect("dense layer has params");
                    dense_forward(p, input, *in_w, *output)
                }
                LayerSpec::Conv2d { .. } => {
                    let p = self.params[i].as_ref().expect("conv layer has params");
                    conv_forward(layer, p, input)
                }
                LayerSpec::ReLU => {
                    Tensor::from_raw(
                        input.shape().to_vec(),
                        input.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                    )
                }
                LayerSpec::Sigmoid => Tensor::from_raw(
                    input.shape().to_vec(),
                    input.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
                ),
                LayerSpec::Flatten => input.reshape(&[input.numel()])?,
            };
            layer_inputs.push(out);
        }
        Ok(ForwardPass { layer_inputs })
    }

    /// Representation vector for one input (the activations entering the
    /// classifier head), flattened.
    pub fn representation(&self, x: &Tensor) -> Result<Tensor> {
        let pass = self.forward(x)?;
        let r = pass.input_of(self.layers.len() - 1);
        r.reshape(&[r.numel()])
    }

    /// Cross-entropy loss of one forward pass against class `c`.
    pub fn loss(&self, x: &Tensor, class: usize) -> Result<f64> {
        let pass = self.forward(x)?;
        cross_entropy(pass.logits(), class)
    }

    /// Exact per-parameter gradient of the single-example cross-entropy
    /// loss. Entries are ordered by layer, weight before bias.
    pub fn param_gradients(&self, x: &Tensor, class: usize) -> Result<GradientVector> {
        let pass = self.forward(x)?;
        let logits = pass.logits();
        if class >= self.class_count {
            return Err(Error::ClassOutOfRange {
                index: class,
                count: self.class_count,
            });
        }
        // d(loss)/d(logits) for softmax cross-entropy is softmax - onehot.
        let probs = softmax(logits.data());
        let seed_data: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(i, &p)| if i == class { p - 1.0 } else { p })
            .collect();
        let seed = Tensor::from_raw(vec![seed_data.len()], seed_data);

        let mut collected: Vec<(usize, LayerParams)> = Vec::new();
        self.backward_span(&pass, self.layers.len(), seed, Some(&mut collected))?;
        collected.sort_by_key(|(i, _)| *i);

        let entries = collected
            .into_iter()
            .map(|(i, grads)| {
                let layer = self.names[i].clone().expect("parametric layers are named");
                vec![
                    GradEntry {
                        layer: layer.clone(),
                        param: "weight".into(),
                        tensor: grads.weight,
                    },
                    GradEntry {
                        layer,
                        param: "bias".into(),
                        tensor: grads.bias,
                    },
                ]
            })
            .flatten()
            .collect();
        Ok(GradientVector::from_entries(entries))
    }

    /// Jacobian of the representation with respect to the flattened input,
    /// one row per representation entry. Computed by seeding a unit vector
    /// at the head boundary and propagating it backwards, once per row.
    pub fn representation_input_jacobian(&self, x: &Tensor) -> Result<Tensor> {
        self.input_jacobian_at(x, self.layers.len() - 1).map(|(_, j)| j)
    }

    /// Representation and input Jacobian for an arbitrary named Dense
    /// layer. Returns the flattened input `r` of that layer and the matrix
    /// of `d r_i / d x_j`.
    pub fn layer_input_jacobian(&self, x: &Tensor, layer: &str) -> Result<(Tensor, Tensor)> {
        let idx = self.layer_index(layer)?;
        if !matches!(self.layers[idx], LayerSpec::Dense { .. }) {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} is not dense; only dense layers have a defended representation"
            )));
        }
        self.input_jacobian_at(x, idx)
    }

    fn input_jacobian_at(&self, x: &Tensor, layer_idx: usize) -> Result<(Tensor, Tensor)> {
        let pass = self.forward(x)?;
        let boundary = pass.input_of(layer_idx);
        let l = boundary.numel();
        let d = x.numel();
        let mut rows = Vec::with_capacity(l * d);
        for i in 0..l {
            let mut seed_data = vec![0.0; l];
            seed_data[i] = 1.0;
            let seed = Tensor::from_raw(boundary.shape().to_vec(), seed_data);
            let gx = self.backward_span(&pass, layer_idx, seed, None)?;
            rows.extend_from_slice(gx.data());
        }
        let r = boundary.reshape(&[l])?;
        Ok((r, Tensor::from_raw(vec![l, d], rows)))
    }

    /// Propagates `seed` (gradient with respect to the input of layer
    /// `from_layer`) down to the network input. When `collect` is given,
    /// parameter gradients of every traversed layer are recorded.
    fn backward_span(
        &self,
        pass: &ForwardPass,
        from_layer: usize,
        seed: Tensor,
        mut collect: Option<&mut Vec<(usize, LayerParams)>>,
    ) -> Result<Tensor> {
        let mut grad = seed;
        for i in (0..from_layer).rev() {
            let input = pass.input_of(i);
            let output = pass.input_of(i + 1);
            grad = match &self.layers[i] {
                LayerSpec::Dense { input: in_w, output: out_w } => {
                    let p = self.params[i].as_ref().expect("dense layer has params");
                    let (gx, gw, gb) = dense_backward(p, input, &grad, *in_w, *out_w);
                    if let Some(c) = collect.as_deref_mut() {
                        c.push((i, LayerParams { weight: gw, bias: gb }));
                    }
                    gx
                }
                LayerSpec::Conv2d { .. } => {
                    let p = self.params[i].as_ref().expect("conv layer has params");
                    let (gx, gw, gb) = conv_backward(&self.layers[i], p, input, &grad);
                    if let Some(c) = collect.as_deref_mut() {
                        c.push((i, LayerParams { weight: gw, bias: gb }));
                    }
                    gx
                }
                LayerSpec::ReLU => Tensor::from_raw(
                    input.shape().to_vec(),
                    input
                        .data()
                        .iter()
                        .zip(grad.data())
                        // Subgradient at exactly zero is zero.
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect(),
                ),
                LayerSpec::Sigmoid => Tensor::from_raw(
                    input.shape().to_vec(),
                    output
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&s, &g)| g * s * (1.0 - s))
                        .collect(),
                ),
                LayerSpec::Flatten => grad.reshape(input.shape())?,
            };
        }
        Ok(grad)
    }

    /// Serializes architecture and parameters as named tensors for the
    /// weight container. The architecture rides along as a numeric header
    /// tensor so a weight file is self-describing.
    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut meta = vec![
            self.class_count as f64,
            self.input_shape.len() as f64,
        ];
        meta.extend(self.input_shape.iter().map(|&d| d as f64));
        meta.push(self.layers.len() as f64);
        for layer in &self.layers {
            // Seven slots per layer: kind tag plus up to six fields.
            let mut slots = [0.0f64; 7];
            match layer {
                LayerSpec::Dense { input, output } => {
                    slots[0] = 0.0;
                    slots[1] = *input as f64;
                    slots[2] = *output as f64;
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    slots[0] = 1.0;
                    slots[1] = *in_channels as f64;
                    slots[2] = *out_channels as f64;
                    slots[3] = kernel.0 as f64;
                    slots[4] = kernel.1 as f64;
                    slots[5] = *stride as f64;
                    slots[6] = *padding as f64;
                }
                LayerSpec::ReLU => slots[0] = 2.0,
                LayerSpec::Sigmoid => slots[0] = 3.0,
                LayerSpec::Flatten => slots[0] = 4.0,
            }
            meta.extend_from_slice(&slots);
        }
        let mut out = vec![NamedTensor::new(
            "meta.network",
            Tensor::from_raw(vec![meta.len()], meta),
        )];
        for (i, p) in self.params.iter().enumerate() {
            if let Some(p) = p {
                let name = self.names[i].as_ref().expect("parametric layers are named");
                out.push(NamedTensor::new(format!("{name}.weight"), p.weight.clone()));
                out.push(NamedTensor::new(format!("{name}.bias"), p.bias.clone()));
            }
        }
        out
    }

    /// Rebuilds a network from container tensors, validating the header and
    /// every parameter shape.
    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let meta = tensors
            .iter()
            .find(|t| t.name == "meta.network")
            .ok_or_else(|| Error::InvalidArgument("weight container has no network header".into()))?;
        let m = meta.tensor.data();
        let mut pos = 0usize;
        let mut next = |what: &str| -> Result<f64> {
            let v = *m
                .get(pos)
                .ok_or_else(|| Error::InvalidArgument(format!("network header ends before {what}")))?;
            pos += 1;
            Ok(v)
        };
        let as_usize = |v: f64, what: &str| -> Result<usize> {
            if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                return Err(Error::InvalidArgument(format!(
                    "network header field {what} is not a valid size: {v}"
                )));
            }
            Ok(v as usize)
        };

        let class_count = as_usize(next("class count")?, "class count")?;
        let ndim = as_usize(next("input rank")?, "input rank")?;
        let mut input_shape = Vec::with_capacity(ndim);
        for i in 0..ndim {
            input_shape.push(as_usize(next("input dim")?, &format!("input dim {i}"))?);
        }
        let layer_count = as_usize(next("layer count")?, "layer count")?;
        let mut layers = Vec::with_capacity(layer_count);
        for i in 0..layer_count {
            let mut slots = [0.0f64; 7];
            for s in slots.iter_mut() {
                *s = next("layer slot")?;
            }
            let layer = match slots[0] as i64 {
                0 => LayerSpec::Dense {
                    input: as_usize(slots[1], "dense input")?,
                    output: as_usize(slots[2], "dense output")?,
                },
                1 => LayerSpec::Conv2d {
                    in_channels: as_usize(slots[1], "conv in")?,
                    out_channels: as_usize(slots[2], "conv out")?,
                    kernel: (as_usize(slots[3], "kernel h")?, as_usize(slots[4], "kernel w")?),
                    stride: as_usize(slots[5], "stride")?,
                    padding: as_usize(slots[6], "padding")?,
                },
                2 => LayerSpec::ReLU,
                3 => LayerSpec::Sigmoid,
                4 => LayerSpec::Flatten,
                k => {
                    return Err(Error::InvalidArgument(format!(
                        "network header layer {i} has unknown kind tag {k}"
                    )));
                }
            };
            layers.push(layer);
        }

        // Collect named parameters; naming must match what assemble() will
        // produce for this layer list.
        let mut dense_count = 0usize;
        let mut conv_count = 0usize;
        let mut params = Vec::with_capacity(layers.len());
        let lookup = |name: &str| -> Result<Tensor> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| t.tensor.clone())
                .ok_or_else(|| Error::InvalidArgument(format!("weight container lacks {name}")))
        };
        for layer in &layers {
            if !layer.has_params() {
                params.push(None);
                continue;
            }
            let name = match layer {
                LayerSpec::Dense { .. } => {
                    let n = format!("dense{dense_count}");
                    dense_count += 1;
                    n
                }
                LayerSpec::Conv2d { .. } => {
                    let n = format!("conv{conv_count}");
                    conv_count += 1;
                    n
                }
                _ => unreachable!(),
            };
            params.push(Some(LayerParams {
                weight: lookup(&format!("{name}.weight"))?,
                bias: lookup(&format!("{name}.bias"))?,
            }));
        }
        Network::with_params(&input_shape, layers, params, class_count)
    }

    /// Serialized weight-container bytes for this network.
    pub fn to_container_bytes(&self) -> Vec<u8> {
        container::encode(ContainerKind::Weights, &self.to_tensors())
    }

    /// Content identifier: FNV-1a 64 of the serialized weight container,
    /// printed as 16 hex digits. Shares carry this so an attack cannot be
    /// run against the wrong model by accident.
    pub fn content_id(&self) -> String {
        format!("{:016x}", fnv1a64(&self.to_container_bytes()))
    }

    /// Expected gradient entry names for this network, in share order.
    pub fn gradient_entry_names(&self) -> Vec<(String, String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.has_params() {
                let name = self.names[i].clone().expect("parametric layers are named");
                out.push((name.clone(), "weight".into(), layer.weight_shape()));
                out.push((name, "bias".into(), layer.bias_shape()));
            }
        }
        out
    }
}

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of logits against a hard label, computed through the
/// log-sum-exp form so large logits cannot overflow.
pub fn cross_entropy(logits: &Tensor, class: usize) -> Result<f64> {
    let data = logits.data();
    if class >= data.len() {
        return Err(Error::ClassOutOfRange {
            index: class,
            count: data.len(),
        });
    }
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = data.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(-(data[class] - max - log_sum))
}

fn dense_forward(p: &LayerParams, input: &Tensor, in_w: usize, out_w: usize) -> Tensor {
    let x = input.data();
    let w = p.weight.data();
    let b = p.bias.data();
    let mut out = vec![0.0; out_w];
    for o in 0..out_w {
        let row = &w[o * in_w..(o + 1) * in_w];
        let mut acc = b[o];
        for i in 0..in_w {
            acc += row[i] * x[i];
        }
        out[o] = acc;
    }
    Tensor::from_raw(vec![out_w], out)
}

fn dense_backward(
    p: &LayerParams,
    input: &Tensor,
    grad_out: &Tensor,
    in_w: usize,
    out_w: usize,
) -> (Tensor, Tensor, Tensor) {
    let x = input.data();
    let w = p.weight.data();
    let g = grad_out.data();
    let mut gw = vec![0.0; out_w * in_w];
    let mut gx = vec![0.0; in_w];
    for o in 0..out_w {
        let go = g[o];
        let row = &w[o * in_w..(o + 1) * in_w];
        let grow = &mut gw[o * in_w..(o + 1) * in_w];
        for i in 0..in_w {
            grow[i] = go * x[i];
            gx[i] += go * row[i];
        }
    }
    (
        // The dense input may have been an image; hand the gradient back in
        // the caller's original geometry.
        Tensor::from_raw(input.shape().to_vec(), gx),
        Tensor::from_raw(vec![out_w, in_w], gw),
        Tensor::from_raw(vec![out_w], g.to_vec()),
    )
}

fn conv_forward(layer: &LayerSpec, p: &LayerParams, input: &Tensor) -> Tensor {
    let LayerSpec::Conv2d {
        in_channels,
        out_channels,
        kernel,
        stride,
        padding,
    } = layer
    else {
        unreachable!()
    };
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (kh, kw) = *kernel;
    let out_h = (h + 2 * padding - kh) / stride + 1;
    let out_w = (w + 2 * padding - kw) / stride + 1;
    let x = input.data();
    let wt = p.weight.data();
    let b = p.bias.data();
    let mut out = vec![0.0; out_channels * out_h * out_w];
    for oc in 0..*out_channels {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = b[oc];
                for ic in 0..*in_channels {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - *padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - *padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xv = x[(ic * h + iy as usize) * w + ix as usize];
                            let wv = wt[((oc * in_channels + ic) * kh + ky) * kw + kx];
                            acc += xv * wv;
                        }
                    }
                }
                out[(oc * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
    Tensor::from_raw(vec![*out_channels, out_h, out_w], out)
}

fn conv_backward(
    layer: &LayerSpec,
    p: &LayerParams,
    input: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let LayerSpec::Conv2d {
        in_channels,
        out_channels,
        kernel,
        stride,
        padding,
    } = layer
    else {
        unreachable!()
    };
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (kh, kw) = *kernel;
    let out_h = grad_out.shape()[1];
    let out_w = grad_out.shape()[2];
    let x = input.data();
    let wt = p.weight.data();
    let g = grad_out.data();
    let mut gw = vec![0.0; out_channels * in_channels * kh * kw];
    let mut gb = vec![0.0; *out_channels];
    let mut gx = vec![0.0; in_channels * h * w];
    for oc in 0..*out_channels {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let go = g[(oc * out_h + oy) * out_w + ox];
                gb[oc] += go;
                for ic in 0..*in_channels {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - *padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - *padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = (ic * h + iy as usize) * w + ix as usize;
                            let wi = ((oc * in_channels + ic) * kh + ky) * kw + kx;
                            gw[wi] += go * x[xi];
                            gx[xi] += go * wt[wi];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_raw(input.shape().to_vec(), gx),
        Tensor::from_raw(vec![*out_channels, *in_channels, kh, kw], gw),
        Tensor::from_raw(vec![*out_channels], gb),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_image(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = RandomSource::new(seed);
        let n: usize = shape.iter().product();
        Tensor::from_raw(shape.to_vec(), (0..n).map(|_| rng.next_uniform()).collect())
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        // For logits [1, 0] and class 0 the loss is ln(1 + e^-1).
        let logits = Tensor::from_vec(vec![1.0, 0.0]).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((cross_entropy(&logits, 0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.3132616875182228).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_is_shift_invariant_and_stable() {
        let logits = Tensor::from_vec(vec![1000.0, 999.0, 998.0]).unwrap();
        let shifted = Tensor::from_vec(vec![0.0, -1.0, -2.0]).unwrap();
        let a = cross_entropy(&logits, 1).unwrap();
        let b = cross_entropy(&shifted, 1).unwrap();
        assert!(a.is_finite());
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn preset_shapes_are_as_documented() {
        let mlp = Network::preset("mlp-small", &[1, 8, 8], 10, 1).unwrap();
        assert_eq!(mlp.representation_width(), 64);
        assert_eq!(mlp.final_dense_name(), "dense1");

        let cnn = Network::preset("cnn-small", &[1, 16, 16], 10, 1).unwrap();
        // 16x16 halves to 8x8 at the strided conv, 16 channels.
        assert_eq!(cnn.representation_width(), 16 * 8 * 8);
        assert_eq!(cnn.layer_names(), vec!["conv0", "conv1", "dense0"]);

        assert!(Network::preset("mlp-tiny", &[1, 8, 8], 10, 1).is_err());
    }

    #[test]
    fn forward_is_deterministic_per_seed() {
        let a = Network::preset("mlp-small", &[1, 8, 8], 10, 7).unwrap();
        let b = Network::preset("mlp-small", &[1, 8, 8], 10, 7).unwrap();
        let c = Network::preset("mlp-small", &[1, 8, 8], 10, 8).unwrap();
        let x = unit_image(&[1, 8, 8], 3);
        assert_eq!(a.forward(&x).unwrap().logits(), b.forward(&x).unwrap().logits());
        assert_ne!(a.forward(&x).unwrap().logits(), c.forward(&x).unwrap().logits());
    }

    #[test]
    fn network_without_head_activation_is_rejected() {
        let layers = vec![
            LayerSpec::Dense { input: 4, output: 4 },
            LayerSpec::Dense { input: 4, output: 2 },
        ];
        let err = Network::new(&[4], layers, 2, 1).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn flatten_is_transparent_for_the_head_activation_rule() {
        let layers = vec![
            LayerSpec::Dense { input: 4, output: 6 },
            LayerSpec::ReLU,
            LayerSpec::Flatten,
            LayerSpec::Dense { input: 6, output: 3 },
        ];
        assert!(Network::new(&[4], layers, 3, 1).is_ok());
    }

    #[test]
    fn gradient_entries_follow_layer_order() {
        let net = Network::preset("cnn-small", &[1, 16, 16], 10, 5).unwrap();
        let x = unit_image(&[1, 16, 16], 9);
        let g = net.param_gradients(&x, 3).unwrap();
        let names: Vec<String> = g
            .entries()
            .iter()
            .map(|e| format!("{}.{}", e.layer, e.param))
            .collect();
        assert_eq!(
            names,
            vec![
                "conv0.weight",
                "conv0.bias",
                "conv1.weight",
                "conv1.bias",
                "dense0.weight",
                "dense0.bias"
            ]
        );
    }

    #[test]
    fn logit_gradient_is_softmax_minus_onehot() {
        // For the head bias the chain rule stops immediately, so its
        // gradient must equal softmax(logits) - onehot(c) exactly.
        let net = Network::preset("mlp-small", &[1, 8, 8], 4, 11).unwrap();
        let x = unit_image(&[1, 8, 8], 2);
        let pass = net.forward(&x).unwrap();
        let probs = softmax(pass.logits().data());
        let g = net.param_gradients(&x, 2).unwrap();
        let head_bias = &g.entry("dense1", "bias").unwrap().tensor;
        for (i, (&gb, &p)) in head_bias.data().iter().zip(&probs).enumerate() {
            let expected = if i == 2 { p - 1.0 } else { p };
            assert!((gb - expected).abs() < 1e-15, "bias entry {i}");
        }
    }

    #[test]
    fn head_weight_rows_have_label_sign_structure() {
        // With a ReLU feeding the head, row sums of the head weight
        // gradient are negative exactly at the true class.
        for seed in 0..20 {
            let net = Network::preset("mlp-small", &[1, 8, 8], 10, seed).unwrap();
            let x = unit_image(&[1, 8, 8], seed + 100);
            let class = (seed % 10) as usize;
            let g = net.param_gradients(&x, class).unwrap();
            let wt = &g.entry("dense1", "weight").unwrap().tensor;
            let (out_w, in_w) = (wt.shape()[0], wt.shape()[1]);
            for o in 0..out_w {
                let row_sum: f64 = wt.data()[o * in_w..(o + 1) * in_w].iter().sum();
                if o == class {
                    assert!(row_sum < 0.0, "seed {seed}: true row not negative");
                } else {
                    assert!(row_sum >= 0.0, "seed {seed}: row {o} negative");
                }
            }
        }
    }

    #[test]
    fn quick_finite_difference_spot_check() {
        // The full oracle sweep lives in the verification suite; this is a
        // cheap guard so a broken backward fails fast in unit tests.
        let net = Network::new(
            &[1, 5, 5],
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: (3, 3),
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Sigmoid,
                LayerSpec::Flatten,
                LayerSpec::Dense { input: 18, output: 3 },
            ],
            3,
            21,
        )
        .unwrap();
        let x = unit_image(&[1, 5, 5], 1);
        let g = net.param_gradients(&x, 1).unwrap();
        let flat = g.flatten();

        // Finite differences over the conv weight (first 18 entries).
        let h = 1e-5;
        let mut idx = 0;
        let base_layers = net.layers().to_vec();
        for wi in 0..18 {
            let mut plus = net.clone();
            let mut minus = net.clone();
            if let Some(p) = plus.params[0].as_mut() {
                p.weight.data_mut()[wi] += h;
            }
            if let Some(p) = minus.params[0].as_mut() {
                p.weight.data_mut()[wi] -= h;
            }
            let fd = (plus.loss(&x, 1).unwrap() - minus.loss(&x, 1).unwrap()) / (2.0 * h);
            let an = flat[idx];
            assert!(
                (fd - an).abs() <= 1e-7 + 1e-5 * an.abs(),
                "conv weight {wi}: fd {fd} vs analytic {an}"
            );
            idx += 1;
        }
        assert_eq!(base_layers, net.layers());
    }

    #[test]
    fn representation_jacobian_matches_finite_differences() {
        let net = Network::preset("mlp-small", &[1, 4, 4], 3, 13).unwrap();
        let x = unit_image(&[1, 4, 4], 4);
        let jac = net.representation_input_jacobian(&x).unwrap();
        assert_eq!(jac.shape(), &[64, 16]);
        let h = 1e-5;
        for j in 0..16 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[j] += h;
            xm.data_mut()[j] -= h;
            let rp = net.representation(&xp).unwrap();
            let rm = net.representation(&xm).unwrap();
            for i in 0..64 {
                let fd = (rp.data()[i] - rm.data()[i]) / (2.0 * h);
                let an = jac.data()[i * 16 + j];
                assert!(
                    (fd - an).abs() <= 1e-7 + 1e-5 * an.abs(),
                    "jacobian ({i},{j}): fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn serialization_round_trip_preserves_everything() {
        let net = Network::preset("cnn-small", &[1, 16, 16], 7, 3).unwrap();
        let tensors = net.to_tensors();
        let back = Network::from_tensors(&tensors).unwrap();
        assert_eq!(net, back);
        assert_eq!(net.content_id(), back.content_id());

        let other = Network::preset("cnn-small", &[1, 16, 16], 7, 4).unwrap();
        assert_ne!(net.content_id(), other.content_id());
    }
}
