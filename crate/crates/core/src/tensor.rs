//! Dense f64 tensors and the value-space kernels shared by the tracked and
//! untracked forward paths.
//!
//! [`Tensor`] is plain storage: shape, values, and a gradient slot that the
//! trainer fills after a backward pass. Autodiff bookkeeping lives on the
//! tape ([`crate::tape`]); parameters outlive any single tape, so they are
//! kept here and bound as leaves per step.
//!
//! The free functions at the bottom (`affine_into`, `relu_into`,
//! `l2_normalize`, ...) are the single implementation of each forward
//! computation. The tape calls the same kernels the untracked encoder path
//! calls, so the two paths agree bit-for-bit by construction.

use crate::error::{Error, Result};

/// Norm threshold below which normalization refuses to divide.
pub const NORM_EPSILON: f64 = 1e-12;

/// Rank-0/1/2 dense tensor. Shape `[]` is a scalar, `[n]` a vector,
/// `[rows, cols]` a row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new",
                expected: format!("{expected} values for shape {shape:?}"),
                got: format!("{} values", values.len()),
            });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            values: vec![v],
            grad: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Gradient of the most recent backward pass, if one was copied in.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Installs a gradient; must match the value count.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::set_grad",
                expected: format!("{} gradient entries", self.values.len()),
                got: format!("{}", grad.len()),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Dot product of equal-length slices. Panics on length mismatch (internal
/// callers validate shapes first).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// y = W x + b for row-major `w` of shape `[out, in]`. Writes into `out`.
pub fn affine_into(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let rows = b.len();
    let cols = x.len();
    debug_assert_eq!(w.len(), rows * cols);
    out.clear();
    out.reserve(rows);
    for r in 0..rows {
        out.push(dot(&w[r * cols..(r + 1) * cols], x) + b[r]);
    }
}

/// Elementwise max(x, 0). The derivative at exactly 0 is taken as 0.
pub fn relu_into(x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }));
}

/// x / ||x||, refusing vectors with norm below [`NORM_EPSILON`].
pub fn l2_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if n < NORM_EPSILON {
        return Err(Error::DegenerateVector {
            context: "l2_normalize",
            norm: n,
            epsilon: NORM_EPSILON,
        });
    }
    Ok(x.iter().map(|&v| v / n).collect())
}

/// log(sum_i exp(x_i)) with max subtraction, so overflow cannot occur and
/// the result is exact for single-element inputs. Panics on empty input
/// (callers guarantee at least one similarity term).
pub fn log_sum_exp(x: &[f64]) -> f64 {
    debug_assert!(!x.is_empty());
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}
