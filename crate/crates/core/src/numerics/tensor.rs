use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dense row-major `f32` tensor.
///
/// Every extent is positive and every element is finite; both are checked
/// when a tensor is built from caller-supplied data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!("zero extent in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::InvalidTensor(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor(format!(
                "non-finite value {} at index {i}",
                data[i]
            )));
        }
        Ok(Self { dims, data })
    }

    /// Builds a tensor from values produced by this crate's own kernels.
    ///
    /// Skips the finiteness scan; the kernels never introduce NaN from finite
    /// inputs except through overflow, which training code checks on the loss.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::filled(dims, 1.0)
    }

    pub fn filled(dims: &[usize], value: f32) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "zero extent in {dims:?}");
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// Normal samples with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f32, rng: &mut R) -> Self {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self::from_parts(dims.to_vec(), data)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(dims: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self::from_parts(dims.to_vec(), data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.dims.last().expect("tensor has at least one axis")
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert!(self.is_scalar(), "item() on tensor with dims {:?}", self.dims);
        self.data[0]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "reshape",
                left: self.dims.clone(),
                right: dims.to_vec(),
            });
        }
        Ok(Self::from_parts(dims.to_vec(), self.data.clone()))
    }

    /// Sub-tensor at `index` along the first axis.
    pub fn index_first(&self, index: usize) -> Self {
        assert!(self.rank() >= 2 && index < self.dims[0]);
        let stride: usize = self.dims[1..].iter().product();
        Self::from_parts(
            self.dims[1..].to_vec(),
            self.data[index * stride..(index + 1) * stride].to_vec(),
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.dims != first.dims {
                return Err(Error::Shape {
                    op: "stack",
                    left: first.dims.clone(),
                    right: p.dims.clone(),
                });
            }
            data.extend_from_slice(&p.data);
        }
        let mut dims = vec![parts.len()];
        dims.extend_from_slice(&first.dims);
        Ok(Self::from_parts(dims, data))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// True when both tensors have equal dims and bitwise-equal elements.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
