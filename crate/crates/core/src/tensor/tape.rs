//! The autodiff tape.
//!
//! Nodes are appended in forward order, so reverse creation order is a valid
//! reverse topological order and the backward pass visits each node exactly
//! once. A tape serves exactly one backward call; afterwards it is consumed
//! and tensors still holding references to it behave as constants.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result, ShapeDisplay};
use crate::scalar::Scalar;

use super::Tensor;

type BackFn<E> = Box<dyn Fn(&[E], &mut GradSink<'_, E>)>;

pub(crate) struct Node<E: Scalar> {
    /// Parent node id (None when that operand was not recorded) plus its
    /// element count, one entry per operand in op order.
    parents: Vec<(Option<usize>, usize)>,
    backward: Option<BackFn<E>>,
    leaf_shape: Option<Vec<usize>>,
    len: usize,
}

pub(crate) struct TapeInner<E: Scalar> {
    nodes: Vec<Node<E>>,
    consumed: bool,
}

/// Handle from a recorded tensor back to its tape node.
pub(crate) struct NodeRef<E: Scalar> {
    pub tape: Tape<E>,
    pub id: usize,
}

impl<E: Scalar> Clone for NodeRef<E> {
    fn clone(&self) -> Self {
        NodeRef { tape: self.tape.clone(), id: self.id }
    }
}

pub struct Tape<E: Scalar>(Rc<RefCell<TapeInner<E>>>);

impl<E: Scalar> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape(Rc::clone(&self.0))
    }
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Tape<E> {
        Tape(Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), consumed: false })))
    }

    pub fn num_nodes(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_consumed(&self) -> bool {
        self.0.borrow().consumed
    }

    fn ptr_eq(&self, other: &Tape<E>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn push_leaf(&self, shape: Vec<usize>, len: usize) -> Result<usize> {
        let mut inner = self.0.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        inner.nodes.push(Node {
            parents: Vec::new(),
            backward: None,
            leaf_shape: Some(shape),
            len,
        });
        Ok(inner.nodes.len() - 1)
    }

    fn push_op(
        &self,
        parents: Vec<(Option<usize>, usize)>,
        len: usize,
        backward: BackFn<E>,
    ) -> usize {
        let mut inner = self.0.borrow_mut();
        inner.nodes.push(Node { parents, backward: Some(backward), leaf_shape: None, len });
        inner.nodes.len() - 1
    }

    /// Reverse-mode sweep from `loss`. Returns a gradient per watched leaf
    /// and consumes the tape.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<Grads<E>> {
        if self.0.borrow().consumed {
            return Err(Error::TapeConsumed);
        }
        let node = match &loss.node {
            Some(n) if n.tape.ptr_eq(self) => n.id,
            Some(_) => return Err(Error::TapeMismatch),
            None => return Err(Error::DetachedLoss),
        };
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(ShapeDisplay(loss.shape().to_vec())));
        }

        let mut inner = self.0.borrow_mut();
        inner.consumed = true;

        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<E>>> = (0..n).map(|_| None).collect();
        grads[node] = Some(vec![E::ONE]);

        for i in (0..n).rev() {
            if grads[i].is_none() || inner.nodes[i].backward.is_none() {
                continue;
            }
            // Parents always precede their node, so splitting at i gives
            // mutable access to every parent buffer while reading grad[i].
            let (lo, hi) = grads.split_at_mut(i);
            let gout = hi[0].take().expect("checked above");
            let node_i = &inner.nodes[i];
            let mut sink = GradSink { parents: &node_i.parents, grads: lo };
            (node_i.backward.as_ref().unwrap())(&gout, &mut sink);
        }

        let mut out = HashMap::new();
        for (i, node_i) in inner.nodes.iter().enumerate() {
            if let Some(shape) = &node_i.leaf_shape {
                let g = grads[i].take().unwrap_or_else(|| vec![E::ZERO; node_i.len]);
                out.insert(i, Tensor::from_vec(shape.clone(), g)?);
            }
        }
        // Release the recorded closures (and the forward buffers they hold).
        inner.nodes.clear();
        Ok(Grads { by_leaf: out, tape_ptr: Rc::as_ptr(&self.0) as usize })
    }
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink<'a, E: Scalar> {
    parents: &'a [(Option<usize>, usize)],
    grads: &'a mut [Option<Vec<E>>],
}

impl<'a, E: Scalar> GradSink<'a, E> {
    /// Whether operand `slot` needs a gradient at all.
    pub fn wants(&self, slot: usize) -> bool {
        self.parents[slot].0.is_some()
    }

    /// Elementwise-add `contrib` into operand `slot`'s gradient.
    pub fn add(&mut self, slot: usize, contrib: &[E]) {
        self.accumulate(slot, |buf| {
            for (b, c) in buf.iter_mut().zip(contrib) {
                *b += *c;
            }
        });
    }

    /// Accumulate into operand `slot`'s gradient buffer in place. The buffer
    /// holds previously accumulated values; `f` must only add to it.
    pub fn accumulate(&mut self, slot: usize, f: impl FnOnce(&mut [E])) {
        let (id, len) = self.parents[slot];
        if let Some(id) = id {
            let buf = self.grads[id].get_or_insert_with(|| vec![E::ZERO; len]);
            f(buf);
        }
    }
}

/// Per-leaf gradients produced by one backward pass.
pub struct Grads<E: Scalar> {
    by_leaf: HashMap<usize, Tensor<E>>,
    tape_ptr: usize,
}

impl<E: Scalar> Grads<E> {
    /// Gradient of the loss with respect to the watched leaf `t`.
    pub fn get(&self, t: &Tensor<E>) -> Option<&Tensor<E>> {
        let node = t.node.as_ref()?;
        if Rc::as_ptr(&node.tape.0) as usize != self.tape_ptr {
            return None;
        }
        self.by_leaf.get(&node.id)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

/// Build an op result: validate finiteness, then record on the single live
/// tape among `parents` (if any). `backward` receives the output gradient and
/// a sink with one slot per parent, in the order passed here.
pub(crate) fn op_result<E: Scalar>(
    op: &'static str,
    shape: Vec<usize>,
    data: Vec<E>,
    parents: &[&Tensor<E>],
    backward: impl Fn(&[E], &mut GradSink<'_, E>) + 'static,
) -> Result<Tensor<E>> {
    debug_assert_eq!(super::numel(&shape), data.len(), "{op}: bad result buffer");
    if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: op.to_string(), context: format!("element {bad}") });
    }

    let mut tape: Option<&Tape<E>> = None;
    for p in parents {
        if let Some(nref) = &p.node {
            if nref.tape.is_consumed() {
                continue; // dead tape: operand acts as a constant
            }
            match tape {
                None => tape = Some(&nref.tape),
                Some(t) if t.ptr_eq(&nref.tape) => {}
                Some(_) => return Err(Error::TapeMismatch),
            }
        }
    }

    let node = match tape {
        None => None,
        Some(t) => {
            let parent_slots: Vec<(Option<usize>, usize)> = parents
                .iter()
                .map(|p| {
                    let id = p.node.as_ref().filter(|n| n.tape.ptr_eq(t)).map(|n| n.id);
                    (id, p.numel())
                })
                .collect();
            let len = data.len();
            let id = t.push_op(parent_slots, len, Box::new(backward));
            Some(NodeRef { tape: t.clone(), id })
        }
    };

    Ok(Tensor { shape, data: std::sync::Arc::new(data), node, requires_grad: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_on_sum_gives_ones() {
        let tape = Tape::new();
        let mut x = Tensor::<f64>::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        x.watch(&tape).unwrap();
        let loss = x.sum().unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn second_backward_fails() {
        let tape = Tape::new();
        let mut x = Tensor::<f64>::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        x.watch(&tape).unwrap();
        let loss = x.sum().unwrap();
        tape.backward(&loss).unwrap();
        assert!(matches!(tape.backward(&loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let mut x = Tensor::<f64>::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        x.watch(&tape).unwrap();
        let y = x.silu().unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn detached_loss_rejected() {
        let tape = Tape::<f64>::new();
        let loss = Tensor::<f64>::scalar(1.0);
        assert!(matches!(tape.backward(&loss), Err(Error::DetachedLoss)));
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let mut x = Tensor::<f64>::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let mut unused = Tensor::<f64>::from_vec(vec![2], vec![5.0, 6.0]).unwrap();
        x.watch(&tape).unwrap();
        unused.watch(&tape).unwrap();
        let loss = x.sum().unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&unused).unwrap().data(), &[0.0, 0.0]);
    }
}
