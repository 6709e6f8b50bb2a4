//! Dense row-major tensor of `f64` values.
//!
//! This is the single numeric carrier for the whole crate: images, network
//! parameters, gradients and latent vectors all travel as [`Tensor`]s. The
//! representation is deliberately plain (a shape vector plus a flat `Vec`)
//! so that serialization is trivially byte-stable and every computation in
//! the crate can be followed with a debugger.
//!
//! Invariants held by every publicly constructed tensor:
//! * `data.len()` equals the product of the shape extents,
//! * every stored value is finite.
//!
//! Zero extents are representable (the product convention makes the data
//! empty); reduction operations that need at least one element report
//! `empty input` instead of producing NaN.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Deserialization detour so that decoded tensors pass through the same
/// validation as constructed ones.
#[derive(serde::Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data, checking both the
    /// length contract and finiteness of every entry.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor constructor (value {bad})")));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// Constant-filled tensor. `value` must be finite.
    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite("tensor fill value".into()));
        }
        let n: usize = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    /// One-dimensional tensor borrowing nothing from the caller.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let shape = vec![data.len()];
        Tensor::new(shape, data)
    }

    /// Internal constructor for values that are finite by construction
    /// (sums and products of finite inputs at desk scale). Debug builds
    /// still verify the claim.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Applies `f` to every element. The result is checked for finiteness,
    /// since this is a public escape hatch for arbitrary math.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor map (value {bad})")));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{op} needs equal shapes, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Elementwise difference `self - other`.
    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.check_same_shape(other, "mul")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Multiplies every element by a finite scalar.
    pub fn scale(&self, factor: f64) -> Result<Self> {
        if !factor.is_finite() {
            return Err(Error::NonFinite("scale factor".into()));
        }
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|v| v * factor).collect(),
        )
    }

    /// Inner product over flattened entries. Shapes must match exactly.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    /// Euclidean norm over all entries.
    ///
    /// The all-zero tensor of any shape has norm exactly `0.0`. A tensor
    /// with no elements has no norm and reports `empty input`.
    pub fn l2_norm(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(self.data.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    /// Fraction of entries that are exactly zero.
    pub fn zero_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let zeros = self.data.iter().filter(|v| **v == 0.0).count();
        zeros as f64 / self.data.len() as f64
    }
}
