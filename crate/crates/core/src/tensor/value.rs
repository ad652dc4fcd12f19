use std::fmt::Debug;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub const fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type a [`Tensor`] can hold.
pub trait Element: Float + Debug + Default + Send + Sync + std::iter::Sum + 'static {
    const DTYPE: DType;

    fn of(v: f64) -> Self;

    fn f64(self) -> f64;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn of(v: f64) -> Self {
        v
    }

    fn f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape(&shape)?;
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::DataLength {
                shape,
                count: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn full(shape: Vec<usize>, value: T) -> Result<Self> {
        check_shape(&shape)?;
        let count = shape.iter().product();
        Ok(Self {
            shape,
            data: vec![value; count],
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Vec<usize>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros(vec![n, n])?;
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        Ok(t)
    }

    /// Gaussian entries drawn in f64 and rounded, so f32 and f64 models built
    /// from one seed agree up to rounding.
    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Result<Self> {
        check_shape(&shape)?;
        let count: usize = shape.iter().product();
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidArgument(format!("normal std {std}: {e}")))?;
        let data = (0..count).map(|_| T::of(normal.sample(rng))).collect();
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn bytes(&self) -> u64 {
        (self.data.len() * T::DTYPE.size()) as u64
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::EmptyShape(shape.to_vec()));
    }
    Ok(())
}
