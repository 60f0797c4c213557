//! Dense row-major `f64` tensors and a define-by-run reverse-mode tape.
//!
//! Five-dimensional tensors use the `[batch, channel, height, width, depth]`
//! order. Depth is the innermost (fastest varying) axis, so a `1×1×K` slice
//! convolution walks contiguous memory.

mod tape;

pub use tape::{Tape, Var};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{ensure, Error, Result};

/// The generator used for every seeded draw in the crate (ChaCha with 8 rounds).
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream tag (splitmix64 finalizer).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Content for [`Tensor::create`].
#[derive(Debug, Clone, PartialEq)]
pub enum Fill {
    Value(f64),
    Normal { mean: f64, std: f64 },
    Uniform { low: f64, high: f64 },
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_extents(shape: &[usize]) -> Result<usize> {
    ensure!(!shape.is_empty(), InvalidShape, "tensor needs at least one dimension");
    ensure!(
        shape.iter().all(|&e| e >= 1),
        InvalidShape,
        "every extent must be >= 1, got {shape:?}"
    );
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn create(shape: &[usize], fill: Fill, rng: &mut SeededRng) -> Result<Self> {
        let len = check_extents(shape)?;
        let data = match fill {
            Fill::Value(v) => vec![v; len],
            Fill::Normal { mean, std } => {
                let dist = Normal::new(mean, std)
                    .map_err(|e| Error::Contract(format!("normal distribution: {e}")))?;
                (0..len).map(|_| dist.sample(rng)).collect()
            }
            Fill::Uniform { low, high } => {
                ensure!(low < high, Contract, "uniform bounds must satisfy low < high");
                (0..len).map(|_| rng.random_range(low..high)).collect()
            }
            Fill::Values(values) => {
                ensure!(
                    values.len() == len,
                    InvalidShape,
                    "{} values supplied for shape {shape:?} ({len} elements)",
                    values.len()
                );
                values
            }
        };
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let len = check_extents(shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: vec![value; len] })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = check_extents(shape)?;
        ensure!(
            data.len() == len,
            InvalidShape,
            "{} values supplied for shape {shape:?} ({len} elements)",
            data.len()
        );
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut SeededRng) -> Result<Self> {
        let len = check_extents(shape)?;
        let data = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        ensure!(
            index.len() == self.shape.len(),
            Contract,
            "index rank {} != tensor rank {}",
            index.len(),
            self.shape.len()
        );
        let mut off = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            ensure!(i < e, Contract, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * e + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    /// `[B, C, H, W, D]` extents; errors unless the tensor is 5-D.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        match *self.shape.as_slice() {
            [b, c, h, w, d] => Ok([b, c, h, w, d]),
            _ => Err(Error::InvalidShape(format!("expected a 5-D tensor, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_extents(shape)?;
        ensure!(len == self.data.len(), InvalidShape, "cannot reshape {:?} to {shape:?}", self.shape);
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}
