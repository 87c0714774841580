//! Dense row-major tensors, a reverse-mode tape, parameter storage and the
//! optimizer.
//!
//! Everything is generic over [`Real`] so that models train in `f32` and the
//! gradient checks run the very same code in `f64`.

mod checkpoint;
mod graph;
mod gradcheck;
mod kernels;
pub mod nn;
mod optim;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry};
pub use graph::{Grads, Graph, Var};
pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};

/// Floating point element type used by every tensor.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn row_vector(data: Vec<T>) -> Self {
        let n = data.len();
        Self {
            shape: vec![1, n],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(x: T) -> Self {
        Self::row_vector(vec![x])
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of the tensor viewed as a matrix (leading dimensions folded).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Numerically stabilized softmax of a plain slice.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax over an empty axis".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Softmax along one axis of a 2-D tensor (0 = down columns, 1 = along rows).
pub fn softmax_axis<T: Real>(t: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (rows, cols) = (t.rows(), t.cols());
    if rows == 0 || cols == 0 {
        return Err(Error::Empty("softmax over an empty axis".into()));
    }
    let mut out = t.clone();
    out.grad = None;
    match axis {
        1 => {
            for r in 0..rows {
                kernels::softmax_in_place(&mut out.data[r * cols..(r + 1) * cols], None);
            }
        }
        0 => {
            for c in 0..cols {
                let column: Vec<T> = (0..rows).map(|r| t.data[r * cols + c]).collect();
                let mut column = column;
                kernels::softmax_in_place(&mut column, None);
                for (r, v) in column.into_iter().enumerate() {
                    out.data[r * cols + c] = v;
                }
            }
        }
        _ => return Err(Error::Invalid(format!("softmax axis {axis} on a matrix"))),
    }
    Ok(out)
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Cosine similarity of two equal-length, non-zero vectors.
pub fn cosine_sim<T: Real>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::shape(
            "cosine_sim",
            format!("{} vs {}", u.len(), v.len()),
        ));
    }
    let dot: T = u.iter().zip(v).map(|(a, b)| *a * *b).sum();
    let nu = u.iter().map(|a| *a * *a).sum::<T>().sqrt();
    let nv = v.iter().map(|a| *a * *a).sum::<T>().sqrt();
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::Invalid("cosine similarity of a zero vector".into()));
    }
    let c = dot / (nu * nv);
    Ok(c.max(-T::one()).min(T::one()))
}
