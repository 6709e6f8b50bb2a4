//! Image generators mapping a low-dimensional latent vector to a pixel
//! tensor in `[0, 1]`.
//!
//! Reconstruction searches run in the latent space of one of these models,
//! so the contract that matters is purity: `generate` has no internal
//! randomness and two calls with the same latent produce bit-identical
//! images. Both architectures end in `(tanh + 1) / 2`, which pins the
//! output range without any clamping.

use serde::{Deserialize, Serialize};

use crate::container::{self, ContainerKind, NamedTensor};
use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// A point in generator latent space together with the box half-width the
/// search is allowed to use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub values: Vec<f64>,
    #[serde(default = "default_bound")]
    pub bound: f64,
}

pub const DEFAULT_LATENT_BOUND: f64 = 2.0;

fn default_bound() -> f64 {
    DEFAULT_LATENT_BOUND
}

impl LatentVector {
    pub fn new(values: Vec<f64>, bound: f64) -> Result<Self> {
        if !(bound.is_finite() && bound > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "latent bound must be positive and finite, got {bound}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent vector".into()));
        }
        Ok(LatentVector { values, bound })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Componentwise clamp onto `[-bound, bound]`.
    pub fn project(&self) -> LatentVector {
        LatentVector {
            values: self
                .values
                .iter()
                .map(|&v| v.clamp(-self.bound, self.bound))
                .collect(),
            bound: self.bound,
        }
    }

    pub fn is_in_box(&self) -> bool {
        self.values.iter().all(|&v| v.abs() <= self.bound)
    }
}

/// Single affine layer squashed to pixel range:
/// `pixel = (tanh(W z + b) + 1) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDecoder {
    /// `(output pixels, latent dim)`
    weight: Tensor,
    bias: Tensor,
    out_shape: Vec<usize>,
}

/// Dense projection to a coarse `(32, h/4, w/4)` grid followed by two
/// stride-2 transposed convolutions (kernel 2x2) with a ReLU in between.
/// Output sides are therefore exactly four times the base grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DeconvNet {
    dense_weight: Tensor,
    dense_bias: Tensor,
    /// `(in 32, out 16, 2, 2)`
    up0_weight: Tensor,
    up0_bias: Tensor,
    /// `(in 16, out channels, 2, 2)`
    up1_weight: Tensor,
    up1_bias: Tensor,
    out_shape: Vec<usize>,
}

const DECONV_BASE_CHANNELS: usize = 32;
const DECONV_MID_CHANNELS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    Linear(LinearDecoder),
    Deconv(DeconvNet),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Linear,
    Deconv,
}

impl Generator {
    /// Initializes a generator with seeded uniform `[-a, a]` parameters,
    /// `a = sqrt(1 / fan_in)` per layer (fan_in of a transposed conv being
    /// input channels times kernel area). Draw order is fixed: layer by
    /// layer, weight entries row major, then bias entries.
    pub fn random(
        kind: GeneratorKind,
        latent_dim: usize,
        out_shape: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::InvalidArgument("latent dim must be positive".into()));
        }
        if out_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "output shape {out_shape:?} has a zero extent"
            )));
        }
        let mut rng = RandomSource::new(seed);
        match kind {
            GeneratorKind::Linear => {
                let d: usize = out_shape.iter().product();
                let a = (1.0 / latent_dim as f64).sqrt();
                let weight = Tensor::from_raw(
                    vec![d, latent_dim],
                    (0..d * latent_dim).map(|_| rng.uniform_in(-a, a)).collect(),
                );
                let bias =
                    Tensor::from_raw(vec![d], (0..d).map(|_| rng.uniform_in(-a, a)).collect());
                Ok(Generator::Linear(LinearDecoder {
                    weight,
                    bias,
                    out_shape: out_shape.to_vec(),
                }))
            }
            GeneratorKind::Deconv => {
                if out_shape.len() != 3 {
                    return Err(Error::ShapeMismatch(format!(
                        "deconv generator needs (channels, height, width), got {out_shape:?}"
                    )));
                }
                let (c, h, w) = (out_shape[0], out_shape[1], out_shape[2]);
                if h % 4 != 0 || w % 4 != 0 || h < 4 || w < 4 {
                    return Err(Error::InvalidArgument(format!(
                        "output {h}x{w} is not reachable by the deconv stride plan \
                         (two stride-2 upsamplings need sides that are multiples of 4)"
                    )));
                }
                let (bh, bw) = (h / 4, w / 4);
                let hidden = DECONV_BASE_CHANNELS * bh * bw;

                let mut uniform_tensor = |shape: Vec<usize>, fan_in: usize| {
                    let a = (1.0 / fan_in as f64).sqrt();
                    let n: usize = shape.iter().product();
                    Tensor::from_raw(shape, (0..n).map(|_| rng.uniform_in(-a, a)).collect())
                };
                let dense_weight = uniform_tensor(vec![hidden, latent_dim], latent_dim);
                let dense_bias = uniform_tensor(vec![hidden], latent_dim);
                let up0_weight = uniform_tensor(
                    vec![DECONV_BASE_CHANNELS, DECONV_MID_CHANNELS, 2, 2],
                    DECONV_BASE_CHANNELS * 4,
                );
                let up0_bias =
                    uniform_tensor(vec![DECONV_MID_CHANNELS], DECONV_BASE_CHANNELS * 4);
                let up1_weight =
                    uniform_tensor(vec![DECONV_MID_CHANNELS, c, 2, 2], DECONV_MID_CHANNELS * 4);
                let up1_bias = uniform_tensor(vec![c], DECONV_MID_CHANNELS * 4);
                Ok(Generator::Deconv(DeconvNet {
                    dense_weight,
                    dense_bias,
                    up0_weight,
                    up0_bias,
                    up1_weight,
                    up1_bias,
                    out_shape: out_shape.to_vec(),
                }))
            }
        }
    }

    pub fn kind(&self) -> GeneratorKind {
        match self {
            Generator::Linear(_) => GeneratorKind::Linear,
            Generator::Deconv(_) => GeneratorKind::Deconv,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Generator::Linear(g) => g.weight.shape()[1],
            Generator::Deconv(g) => g.dense_weight.shape()[1],
        }
    }

    pub fn output_shape(&self) -> &[usize] {
        match self {
            Generator::Linear(g) => &g.out_shape,
            Generator::Deconv(g) => &g.out_shape,
        }
    }

    /// Maps a latent vector to an image. Pure: no randomness, no state, so
    /// equal latents give bit-identical images. Every output value lies in
    /// `[0, 1]` by construction.
    pub fn generate(&self, z: &[f64]) -> Result<Tensor> {
        if z.len() != self.latent_dim() {
            return Err(Error::ShapeMismatch(format!(
                "latent has {} entries, generator expects {}",
                z.len(),
                self.latent_dim()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent vector".into()));
        }
        match self {
            Generator::Linear(g) => {
                let d = g.out_shape.iter().product();
                let k = z.len();
                let w = g.weight.data();
                let b = g.bias.data();
                let mut out = vec![0.0; d];
                for o in 0..d {
                    let row = &w[o * k..(o + 1) * k];
                    let mut acc = b[o];
                    for i in 0..k {
                        acc += row[i] * z[i];
                    }
                    out[o] = (acc.tanh() + 1.0) / 2.0;
                }
                Ok(Tensor::from_raw(g.out_shape.clone(), out))
            }
            Generator::Deconv(g) => Ok(g.generate(z)),
        }
    }

    /// Serializes the generator as named tensors, with a numeric header so
    /// the weight file is self-describing.
    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut meta = vec![
            match self.kind() {
                GeneratorKind::Linear => 0.0,
                GeneratorKind::Deconv => 1.0,
            },
            self.latent_dim() as f64,
            self.output_shape().len() as f64,
        ];
        meta.extend(self.output_shape().iter().map(|&d| d as f64));
        let mut out = vec![NamedTensor::new(
            "meta.generator",
            Tensor::from_raw(vec![meta.len()], meta),
        )];
        match self {
            Generator::Linear(g) => {
                out.push(NamedTensor::new("linear.weight", g.weight.clone()));
                out.push(NamedTensor::new("linear.bias", g.bias.clone()));
            }
            Generator::Deconv(g) => {
                out.push(NamedTensor::new("deconv.dense.weight", g.dense_weight.clone()));
                out.push(NamedTensor::new("deconv.dense.bias", g.dense_bias.clone()));
                out.push(NamedTensor::new("deconv.up0.weight", g.up0_weight.clone()));
                out.push(NamedTensor::new("deconv.up0.bias", g.up0_bias.clone()));
                out.push(NamedTensor::new("deconv.up1.weight", g.up1_weight.clone()));
                out.push(NamedTensor::new("deconv.up1.bias", g.up1_bias.clone()));
            }
        }
        out
    }

    /// Rebuilds a generator from container tensors, cross-checking every
    /// parameter shape against the header's declared geometry.
    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let meta = tensors
            .iter()
            .find(|t| t.name == "meta.generator")
            .ok_or_else(|| {
                Error::InvalidArgument("weight container has no generator header".into())
            })?;
        let m = meta.tensor.data();
        if m.len() < 3 {
            return Err(Error::InvalidArgument("generator header too short".into()));
        }
        let latent_dim = m[1] as usize;
        let ndim = m[2] as usize;
        if m.len() != 3 + ndim {
            return Err(Error::InvalidArgument("generator header length mismatch".into()));
        }
        let out_shape: Vec<usize> = m[3..3 + ndim].iter().map(|&v| v as usize).collect();
        let lookup = |name: &str| -> Result<Tensor> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| t.tensor.clone())
                .ok_or_else(|| Error::InvalidArgument(format!("weight container lacks {name}")))
        };
        let expect_shape = |t: &Tensor, shape: &[usize], what: &str| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "{what} has shape {:?}, header implies {:?}",
                    t.shape(),
                    shape
                )));
            }
            Ok(())
        };
        match m[0] as i64 {
            0 => {
                let d: usize = out_shape.iter().product();
                let weight = lookup("linear.weight")?;
                let bias = lookup("linear.bias")?;
                expect_shape(&weight, &[d, latent_dim], "linear.weight")?;
                expect_shape(&bias, &[d], "linear.bias")?;
                Ok(Generator::Linear(LinearDecoder {
                    weight,
                    bias,
                    out_shape,
                }))
            }
            1 => {
                if out_shape.len() != 3 {
                    return Err(Error::ShapeMismatch(format!(
                        "deconv header output shape {out_shape:?} is not three-dimensional"
                    )));
                }
                let (c, h, w) = (out_shape[0], out_shape[1], out_shape[2]);
                if h % 4 != 0 || w % 4 != 0 || h < 4 || w < 4 {
                    return Err(Error::InvalidArgument(format!(
                        "output {h}x{w} is not reachable by the deconv stride plan \
                         (two stride-2 upsamplings need sides that are multiples of 4)"
                    )));
                }
                let hidden = DECONV_BASE_CHANNELS * (h / 4) * (w / 4);
                let dense_weight = lookup("deconv.dense.weight")?;
                let dense_bias = lookup("deconv.dense.bias")?;
                let up0_weight = lookup("deconv.up0.weight")?;
                let up0_bias = lookup("deconv.up0.bias")?;
                let up1_weight = lookup("deconv.up1.weight")?;
                let up1_bias = lookup("deconv.up1.bias")?;
                expect_shape(&dense_weight, &[hidden, latent_dim], "deconv.dense.weight")?;
                expect_shape(&dense_bias, &[hidden], "deconv.dense.bias")?;
                expect_shape(
                    &up0_weight,
                    &[DECONV_BASE_CHANNELS, DECONV_MID_CHANNELS, 2, 2],
                    "deconv.up0.weight",
                )?;
                expect_shape(&up0_bias, &[DECONV_MID_CHANNELS], "deconv.up0.bias")?;
                expect_shape(&up1_weight, &[DECONV_MID_CHANNELS, c, 2, 2], "deconv.up1.weight")?;
                expect_shape(&up1_bias, &[c], "deconv.up1.bias")?;
                Ok(Generator::Deconv(DeconvNet {
                    dense_weight,
                    dense_bias,
                    up0_weight,
                    up0_bias,
                    up1_weight,
                    up1_bias,
                    out_shape,
                }))
            }
            k => Err(Error::InvalidArgument(format!(
                "generator header has unknown kind tag {k}"
            ))),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        container::write_file(path, ContainerKind::Weights, &self.to_tensors())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let tensors = container::read_file(path, ContainerKind::Weights)?;
        Generator::from_tensors(&tensors)
    }
}

impl DeconvNet {
    fn generate(&self, z: &[f64]) -> Tensor {
        let (c, h, w) = (self.out_shape[0], self.out_shape[1], self.out_shape[2]);
        let (bh, bw) = (h / 4, w / 4);
        let k = z.len();

        // Dense projection onto the coarse grid.
        let hidden = DECONV_BASE_CHANNELS * bh * bw;
        let dw = self.dense_weight.data();
        let db = self.dense_bias.data();
        let mut base = vec![0.0; hidden];
        for o in 0..hidden {
            let row = &dw[o * k..(o + 1) * k];
            let mut acc = db[o];
            for i in 0..k {
                acc += row[i] * z[i];
            }
            base[o] = acc;
        }

        // First upsampling with ReLU. Kernel equals stride, so each output
        // position receives exactly one (input, kernel) pair:
        // input index y/2 with kernel offset y%2.
        let (mh, mw) = (bh * 2, bw * 2);
        let mut mid = vec![0.0; DECONV_MID_CHANNELS * mh * mw];
        let w0 = self.up0_weight.data();
        let b0 = self.up0_bias.data();
        for oc in 0..DECONV_MID_CHANNELS {
            for y in 0..mh {
                for x in 0..mw {
                    let (iy, ky) = (y / 2, y % 2);
                    let (ix, kx) = (x / 2, x % 2);
                    let mut acc = b0[oc];
                    for ic in 0..DECONV_BASE_CHANNELS {
                        let wv = w0[((ic * DECONV_MID_CHANNELS + oc) * 2 + ky) * 2 + kx];
                        acc += wv * base[(ic * bh + iy) * bw + ix];
                    }
                    mid[(oc * mh + y) * mw + x] = if acc > 0.0 { acc } else { 0.0 };
                }
            }
        }

        // Second upsampling straight into pixel range.
        let w1 = self.up1_weight.data();
        let b1 = self.up1_bias.data();
        let mut out = vec![0.0; c * h * w];
        for oc in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (iy, ky) = (y / 2, y % 2);
                    let (ix, kx) = (x / 2, x % 2);
                    let mut acc = b1[oc];
                    for ic in 0..DECONV_MID_CHANNELS {
                        let wv = w1[((ic * c + oc) * 2 + ky) * 2 + kx];
                        acc += wv * mid[(ic * mh + iy) * mw + ix];
                    }
                    out[(oc * h + y) * w + x] = (acc.tanh() + 1.0) / 2.0;
                }
            }
        }
        Tensor::from_raw(self.out_shape.clone(), out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_latent(dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = RandomSource::new(seed);
        (0..dim).map(|_| rng.next_gaussian()).collect()
    }

    #[test]
    fn outputs_stay_in_unit_interval() {
        let lin = Generator::random(GeneratorKind::Linear, 16, &[1, 8, 8], 1).unwrap();
        let dec = Generator::random(GeneratorKind::Deconv, 32, &[1, 16, 16], 2).unwrap();
        for seed in 0..1000 {
            let z = random_latent(16, seed);
            let img = lin.generate(&z).unwrap();
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        for seed in 0..200 {
            // Include far out-of-box latents; tanh still pins the range.
            let z: Vec<f64> = random_latent(32, seed).iter().map(|v| v * 50.0).collect();
            let img = dec.generate(&z).unwrap();
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn generate_is_pure() {
        let g = Generator::random(GeneratorKind::Deconv, 32, &[1, 16, 16], 3).unwrap();
        let z = random_latent(32, 9);
        let a = g.generate(&z).unwrap();
        let b = g.generate(&z).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_latents_give_distinct_images() {
        // With a random (almost surely full column rank) weight matrix and
        // pre-activations away from tanh saturation, the linear decoder is
        // injective on distinct latents.
        let g = Generator::random(GeneratorKind::Linear, 8, &[1, 6, 6], 4).unwrap();
        for seed in 0..100 {
            let z1 = random_latent(8, 2 * seed);
            let z2 = random_latent(8, 2 * seed + 1);
            let img1 = g.generate(&z1).unwrap();
            let img2 = g.generate(&z2).unwrap();
            assert_ne!(img1, img2, "seed {seed}");
        }
    }

    #[test]
    fn deconv_rejects_unreachable_shapes() {
        for shape in [[1usize, 10, 16], [1, 16, 10], [1, 2, 2], [3, 15, 15]] {
            let err = Generator::random(GeneratorKind::Deconv, 8, &shape, 1).unwrap_err();
            assert!(matches!(err, Error::InvalidArgument(_)), "{shape:?}");
        }
        // Eight by eight is fine: base grid 2x2.
        assert!(Generator::random(GeneratorKind::Deconv, 8, &[1, 8, 8], 1).is_ok());
    }

    #[test]
    fn serialization_round_trips() {
        for g in [
            Generator::random(GeneratorKind::Linear, 16, &[1, 8, 8], 5).unwrap(),
            Generator::random(GeneratorKind::Deconv, 32, &[3, 16, 16], 6).unwrap(),
        ] {
            let back = Generator::from_tensors(&g.to_tensors()).unwrap();
            assert_eq!(g, back);
            let z = random_latent(g.latent_dim(), 11);
            assert_eq!(g.generate(&z).unwrap(), back.generate(&z).unwrap());
        }
    }

    #[test]
    fn header_latent_dim_conflict_is_a_shape_mismatch() {
        let g = Generator::random(GeneratorKind::Linear, 16, &[1, 8, 8], 7).unwrap();
        let mut tensors = g.to_tensors();
        // Claim a different latent dim than the stored weight matrix has.
        let meta = &mut tensors[0];
        let mut m = meta.tensor.data().to_vec();
        m[1] = 20.0;
        meta.tensor = Tensor::from_raw(vec![m.len()], m);
        let err = Generator::from_tensors(&tensors).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)), "{err:?}");
    }

    #[test]
    fn latent_projection_clamps_into_the_box() {
        let z = LatentVector::new(vec![3.0, -5.0, 0.25], 2.0).unwrap();
        assert!(!z.is_in_box());
        let p = z.project();
        assert_eq!(p.values, vec![2.0, -2.0, 0.25]);
        assert!(p.is_in_box());
        assert!(LatentVector::new(vec![0.0], -1.0).is_err());
    }
}
