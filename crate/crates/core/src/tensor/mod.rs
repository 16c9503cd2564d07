//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a row-major buffer plus shape. Gradients are recorded on a
//! [`Tape`](tape::Tape): leaves opt in via [`Tensor::watch`], every operation
//! whose inputs are live on a tape records a backward closure, and
//! [`Tape::backward`](tape::Tape::backward) replays the closures in reverse to
//! produce a gradient per leaf. Published operations reject non-finite
//! outputs instead of propagating them.

pub mod conv;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod tape;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::{RngPool, RngStream};
use crate::scalar::Scalar;

use tape::{NodeRef, Tape};

#[derive(Clone)]
pub struct Tensor<E: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    pub(crate) node: Option<NodeRef<E>>,
    requires_grad: bool,
}

impl<E: Scalar> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("recorded", &self.node.is_some())
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<E: Scalar> Tensor<E> {
    /// Build a tensor from raw row-major data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Tensor<E>> {
        if numel(&shape) != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Tensor<E> {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![E::ZERO; numel(shape)]),
            node: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: E) -> Tensor<E> {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel(shape)]),
            node: None,
            requires_grad: false,
        }
    }

    pub fn ones(shape: &[usize]) -> Tensor<E> {
        Tensor::full(shape, E::ONE)
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(value: E) -> Tensor<E> {
        Tensor::full(&[], value)
    }

    /// I.i.d. standard-normal tensor, bit-reproducible from `seed` alone.
    pub fn randn(shape: &[usize], seed: u64) -> Result<Tensor<E>> {
        let mut stream = RngPool::new(seed).stream("randn");
        Tensor::randn_stream(shape, &mut stream)
    }

    /// Standard-normal tensor drawn from an existing stream.
    pub fn randn_stream(shape: &[usize], stream: &mut RngStream) -> Result<Tensor<E>> {
        if shape.is_empty() {
            return Err(Error::InvalidShape("randn requires a non-empty shape".into()));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!("randn extents must be >= 1, got {shape:?}")));
        }
        let data: Vec<E> = (0..numel(shape)).map(|_| E::from_f64(stream.normal())).collect();
        Tensor::from_vec(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.data)
    }

    /// Mutable access to the underlying buffer (copy-on-write if shared).
    /// Only for host-side mutation of unrecorded tensors (optimizer, IO).
    pub fn data_mut(&mut self) -> &mut Vec<E> {
        debug_assert!(self.node.is_none(), "mutating a recorded tensor");
        Arc::make_mut(&mut self.data)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Register this tensor as a differentiated leaf on `tape`.
    pub fn watch(&mut self, tape: &Tape<E>) -> Result<()> {
        let id = tape.push_leaf(self.shape.clone(), self.numel())?;
        self.node = Some(NodeRef { tape: tape.clone(), id });
        self.requires_grad = true;
        Ok(())
    }

    /// Same values, no tape attachment.
    pub fn detach(&self) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
            requires_grad: false,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max |x| over the tensor, as f64.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.to_f64().abs()))
    }

    pub(crate) fn same_shape(&self, other: &Tensor<E>, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn randn_is_deterministic_per_seed() {
        let a = Tensor::<f64>::randn(&[2, 2], 7).unwrap();
        let b = Tensor::<f64>::randn(&[2, 2], 7).unwrap();
        assert_eq!(a.data(), b.data());
        let c = Tensor::<f64>::randn(&[2, 2], 8).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn randn_moments_within_lln_bounds() {
        let t = Tensor::<f64>::randn(&[10_000], 42).unwrap();
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean > -0.05 && mean < 0.05, "mean {mean}");
        assert!(var > 0.9 && var < 1.1, "var {var}");
    }

    #[test]
    fn randn_rejects_zero_extent() {
        assert!(Tensor::<f64>::randn(&[0], 1).is_err());
        assert!(Tensor::<f64>::randn(&[], 1).is_err());
    }

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::<f64>::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn scalar_tensor_is_rank_zero() {
        let s = Tensor::<f64>::scalar(3.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 3.5);
    }
}
