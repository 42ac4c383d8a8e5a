//! Dense rank-4 tensors in `(n, c, h, w)` row-major layout.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Scalar element type. Training runs in `f32`; `f64` exists for gradient checks.
pub trait Real:
    Float + FromPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type Dims = [usize; 4];

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        let len = dims.iter().product::<usize>();
        if data.len() != len {
            return Err(Error::shape(
                "Tensor::new",
                format!("dims {dims:?} need {len} values, got {}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: Dims, value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every index.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Size of one `(h, w)` plane.
    pub fn plane(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.dims;
        ((n * cs + c) * hs + y) * ws + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    /// Single-element value, for scalar losses.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, dims: Dims) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.dims, dims),
            ));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64c(v.to_f64c()))
                .collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|&v| v.to_f64c().powi(2)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64c() - b.to_f64c()).abs())
            .fold(0.0, f64::max)
    }

    /// Copy of batch element `i`, with `n = 1`.
    pub fn batch_item(&self, i: usize) -> Tensor<T> {
        let stride = self.dims[1] * self.plane();
        Tensor {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[i * stride..(i + 1) * stride].to_vec(),
        }
    }

    /// Stacks tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors"))?;
        let [_, c, h, w] = first.dims;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            if t.dims[1..] != [c, h, w] {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.dims, first.dims),
                ));
            }
            n += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            dims: [n, c, h, w],
            data,
        })
    }

    pub fn check_same_dims(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims, other.dims),
            ));
        }
        Ok(())
    }
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Spatial padding applied before a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero(usize),
    /// Mirror without repeating the edge sample. Margin must be smaller than both spatial dims.
    Reflect(usize),
}

impl Padding {
    pub fn margin(self) -> usize {
        match self {
            Padding::Zero(p) | Padding::Reflect(p) => p,
        }
    }
}
