//! Dense f64 tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable row-major value. Attaching it to a [`Tape`]
//! (via [`Tape::var`]) makes downstream operations record themselves, so one
//! [`Tape::backward`] pass yields gradients for every attached input. Tensors
//! without a tape handle behave as constants and the same operations just
//! compute values.

pub mod ops;
mod optim;
mod tape;

pub use ops::*;
pub use optim::{adamw_step, OptimState};
pub use tape::{Gradients, Tape};

use crate::error::{Error, Result};
use rand::Rng;
use std::rc::Rc;

pub(crate) use tape::NodeRef;

/// Dense multi-dimensional f64 array, row-major, optionally on a tape.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Rc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Rc::new(vec![0.0; numel]),
            node: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Rc::new(vec![value; numel]),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full([1], value)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor {
            shape: vec![n, n],
            data: Rc::new(data),
            node: None,
        }
    }

    /// 2-D tensor from row slices; rows must have equal length.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![r, c],
            data: Rc::new(data),
            node: None,
        }
    }

    pub fn rand_uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape,
            data: Rc::new(data),
            node: None,
        }
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

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.data)
    }

    /// Mutable access to the values; used by the optimizer. Copy-on-write if
    /// the buffer is shared.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        let v: &mut Vec<f64> = Rc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    /// Number of rows when viewed as 2-D (trailing dims folded into columns).
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[0]
        }
    }

    /// Number of columns when viewed as 2-D.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product::<usize>().max(
            if self.shape.len() <= 1 { 1 } else { 0 },
        )
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<&NodeRef> {
        self.node.as_ref()
    }

    /// Tape this tensor is recorded on, if any.
    pub(crate) fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    pub(crate) fn with_node(mut self, node: NodeRef) -> Self {
        self.node = Some(node);
        self
    }

    /// The same value with no tape attachment.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the shape; element count must match. Gradient is identity.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Contract(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Rc::clone(&self.data),
            node: self.node.clone(),
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Max elementwise relative error with an absolute floor on the
    /// denominator.
    pub fn max_rel_diff(&self, other: &Tensor, floor: f64) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs() / (a.abs().max(b.abs()).max(floor)))
            .fold(0.0, f64::max)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{} values]", self.numel())
        }
    }
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dim {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_mismatch_rejected() {
        let err = Tensor::new([2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn reshape_preserves_data_and_rejects_bad_count() {
        let t = Tensor::new([2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let r = t.reshape([3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshape([4, 2]).is_err());
    }

    #[test]
    fn eye_and_accessors() {
        let i = Tensor::eye(3);
        assert_eq!(i.get2(1, 1), 1.0);
        assert_eq!(i.get2(1, 2), 0.0);
        assert_eq!(i.rows(), 3);
        assert_eq!(i.cols(), 3);
    }
}
