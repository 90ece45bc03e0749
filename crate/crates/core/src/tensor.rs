//! Dense row-major `f64` tensors.
//!
//! Activations use the channels-last convention: a single feature map is
//! `(W, L, C)` and a batch of them is `(N, W, L, C)`.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("shape must have between 1 and 4 dims, got {0}")]
    BadRank(usize),
    #[error("shape dims must be positive, got {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("element count of shape {0:?} overflows")]
    Overflow(Vec<usize>),
    #[error("data length {len} does not match shape {shape} ({expected} elements)")]
    DataLength { shape: Shape, len: usize, expected: usize },
    #[error("shape mismatch: {0} vs {1}")]
    Mismatch(Shape, Shape),
}

/// Ordered list of 1 to 4 positive dimensions.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let dims = dims.into();
        if dims.is_empty() || dims.len() > 4 {
            return Err(TensorError::BadRank(dims.len()));
        }
        if dims.contains(&0) {
            return Err(TensorError::ZeroDim(dims));
        }
        if dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).is_none() {
            return Err(TensorError::Overflow(dims));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Last dimension, which is the channel axis for feature maps.
    pub fn channels(&self) -> usize {
        *self.0.last().expect("shape is never empty")
    }

    /// Prepends a batch dimension. Fails if the result would exceed rank 4.
    pub fn batched(&self, n: usize) -> Result<Shape, TensorError> {
        let mut dims = Vec::with_capacity(self.rank() + 1);
        dims.push(n);
        dims.extend_from_slice(&self.0);
        Shape::new(dims)
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = TensorError;
    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        Shape::new(v)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Builds a shape from a literal dims list, panicking on invalid input.
/// Intended for constants and tests.
#[macro_export]
macro_rules! shape {
    ($($d:expr),+ $(,)?) => {
        $crate::tensor::Shape::new(vec![$($d),+]).expect("valid literal shape")
    };
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Tensor {
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Tensor {
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Tensor, TensorError> {
        if data.len() != shape.numel() {
            return Err(TensorError::DataLength {
                expected: shape.numel(),
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(self, shape: Shape) -> Result<Tensor, TensorError> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sample `i` of a batched tensor, with the batch dimension dropped.
    pub fn sample(&self, i: usize) -> Result<Tensor, TensorError> {
        let dims = self.dims();
        let inner = Shape::new(dims[1..].to_vec())?;
        let n = inner.numel();
        Ok(Tensor {
            data: self.data[i * n..(i + 1) * n].to_vec(),
            shape: inner,
        })
    }

    /// Stacks equally shaped tensors along a new leading batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor, TensorError> {
        let first = items.first().ok_or(TensorError::BadRank(0))?;
        let shape = first.shape.batched(items.len())?;
        let mut data = Vec::with_capacity(shape.numel());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::Mismatch(first.shape.clone(), t.shape.clone()));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape, data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        elementwise_add(self, other)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::Mismatch(self.shape.clone(), other.shape.clone()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

pub fn elementwise_add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::Mismatch(a.shape.clone(), b.shape.clone()));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

/// `(M, K) x (K, N) -> (M, N)`, accumulating over `K` in ascending order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (&[m, k], &[k2, n]) = (a.dims(), b.dims()) else {
        return Err(TensorError::Mismatch(a.shape.clone(), b.shape.clone()));
    };
    if k != k2 {
        return Err(TensorError::Mismatch(a.shape.clone(), b.shape.clone()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0;
            for (p, &x) in row.iter().enumerate() {
                acc += x * b.data[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::from_vec(Shape::new(vec![m, n])?, out)
}
