//! Dense row-major tensors and the define-by-run differentiation tape.

pub mod conv;
mod tape;

pub use conv::{ConvBackend, ConvGeom, ConvTransposeGeom};
pub use tape::{Activation, NormBlocks, NormStats, Tape, Var};

use crate::error::{Error, Result};
use crate::real::Real;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// A dense tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} holds {} values, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel(shape)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient has {} values, tensor {}", g.len(), self.data.len()),
            ));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        dims4(&self.shape, "dims4")
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    /// Converts element type (gradient buffers are dropped).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `[start, start + len)` of the leading axis.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Self> {
        let n = *self.shape.first().ok_or(Error::Empty("slice_batch"))?;
        if start + len > n {
            return Err(Error::shape(
                "slice_batch",
                format!("rows {}..{} out of batch {}", start, start + len, n),
            ));
        }
        let row = self.data.len() / n.max(1);
        let mut shape = self.shape.clone();
        shape[0] = len;
        Tensor::new(&shape, self.data[start * row..(start + len) * row].to_vec())
    }

    /// Stacks tensors along the leading axis; trailing dims must agree.
    pub fn concat_batch(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("concat_batch"))?;
        let tail = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(Error::shape(
                    "concat_batch",
                    format!("trailing dims {:?} vs {:?}", &p.shape, tail),
                ));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Tensor::new(&shape, data)
    }
}

pub(crate) fn dims4(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected NCHW, got {:?}", shape))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn grad_accumulates_and_zeroes() {
        let mut t = Tensor::<f32>::zeros(&[2]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad(), Some(&[2.0, 4.0][..]));
        assert!(t.accumulate_grad(&[1.0]).is_err());
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn slice_and_concat_are_inverse() {
        let t = Tensor::<f32>::from_fn(&[4, 2, 1, 1], |i| i as f32);
        let a = t.slice_batch(0, 1).unwrap();
        let b = t.slice_batch(1, 3).unwrap();
        assert_eq!(Tensor::concat_batch(&[&a, &b]).unwrap(), t);
        assert!(t.slice_batch(3, 2).is_err());
    }
}
