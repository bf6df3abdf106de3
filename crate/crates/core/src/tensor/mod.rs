//! A small, deterministic CNN engine.
//!
//! Tensors are dense `n×c×h×w` arrays in row-major order. The layer set is fixed
//! (conv stem, conv block, flatten, dense, softmax output); every layer has a
//! hand-written backward pass. The engine is generic over [`Scalar`] so that the
//! same code trains in `f32` and is gradient-checked in `f64`.

mod arch;
mod cost;
mod gradcheck;
pub mod kernels;
mod modelfile;
mod net;

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use arch::{ArchConfig, LayerSpec, ShapeTrace, NUM_CLASSES};
pub use cost::{count_costs, CostReport, LayerCost, FLOPS_CONVENTION};
pub use gradcheck::{
    gradient_check, gradient_check_with, GradCheckOptions, GradCheckReport, GroupError,
};
pub use modelfile::{read_model, write_model, ModelFile, MODEL_MAGIC, MODEL_VERSION};
pub use net::{Mode, Param, TrainState, DEFAULT_PROB_FLOOR};

/// Floating-point element type of the engine.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    fn of(x: f64) -> Self;

    /// `c = alpha·a·b + beta·c` for an `m×k` times `k×n` product.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-overlapping (for `c`) regions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// `n×c×h×w` extent of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-d array with an optional gradient buffer of the same length.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    values: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            values: vec![T::zero(); shape.len()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape, values: Vec<T>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::config(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.len(),
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::config("gradient length differs from value length"));
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Values of batch item `i`.
    pub fn item(&self, i: usize) -> &[T] {
        let len = self.shape.item_len();
        &self.values[i * len..(i + 1) * len]
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let s = self.shape;
        self.values[((n * s.c + c) * s.h + h) * s.w + w]
    }

    /// Fails with a numeric error naming `layer` if any value is NaN or infinite.
    pub fn check_finite(&self, layer: &str) -> Result<()> {
        check_finite(&self.values, layer)
    }

    /// Row `i` of an `n×k×1×1` tensor (class probabilities, logits).
    pub fn row(&self, i: usize) -> &[T] {
        self.item(i)
    }

    /// Index of the largest entry of each batch row.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.shape.n)
            .map(|i| {
                let row = self.item(i);
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

pub(crate) fn check_finite<T: Scalar>(values: &[T], layer: &str) -> Result<()> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            layer: layer.to_string(),
            detail: format!("non-finite value at flat index {pos}"),
        });
    }
    Ok(())
}
