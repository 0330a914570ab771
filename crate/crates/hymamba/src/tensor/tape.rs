//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every primitive that touches a taped tensor records one operation with
//! handles to its parents and a backward closure over whatever values the
//! reverse pass needs. Nodes are stored in recording order, which is a valid
//! topological order, so one reverse traversal accumulates gradients for
//! every reachable input exactly once. A tape is single-use: `backward`
//! consumes it, and a second call is a state error. Gradient reset is
//! dropping the tape and recording on a fresh one.

use super::Tensor;
use crate::error::{Error, Result};
use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

/// Identifies one output of one recorded operation.
pub(crate) type ValId = (usize, usize);

/// Sink receiving gradient contributions: (parent slot, contribution values).
pub(crate) type GradSink<'a> = dyn FnMut(usize, &[f64]) + 'a;

/// Backward closure: slice of per-output gradients (None when an output is
/// unreachable from the loss) plus an accumulation sink. Backward closures
/// perform raw arithmetic only and must not record new operations.
pub(crate) type BackwardFn = Box<dyn Fn(&[Option<&[f64]>], &mut GradSink)>;

struct OpRec {
    /// Parent slot -> tape id; None for constant (untaped) inputs.
    parents: Vec<Option<ValId>>,
    out_numels: Vec<usize>,
    backward: BackwardFn,
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) tape: Tape,
    pub(crate) id: ValId,
}

/// Recording tape. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

struct TapeInner {
    ops: RefCell<Vec<OpRec>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                ops: RefCell::new(Vec::new()),
                consumed: Cell::new(false),
            }),
        }
    }

    pub(crate) fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn num_ops(&self) -> usize {
        self.inner.ops.borrow().len()
    }

    /// Attach a value as a differentiable leaf. The returned tensor shares
    /// the value's storage and receives a gradient entry after `backward`.
    pub fn var(&self, value: &Tensor) -> Tensor {
        let numel = value.numel();
        let id = self.push(OpRec {
            parents: Vec::new(),
            out_numels: vec![numel],
            backward: Box::new(|_, _| {}),
        });
        value.detach().with_node(NodeRef {
            tape: self.clone(),
            id: (id, 0),
        })
    }

    fn push(&self, rec: OpRec) -> usize {
        let mut ops = self.inner.ops.borrow_mut();
        ops.push(rec);
        ops.len() - 1
    }

    /// Record one operation with possibly several outputs. `inputs` supplies
    /// parent handles positionally; untaped inputs keep their slot so the
    /// backward closure can address parents by position and contributions to
    /// constants are dropped.
    pub(crate) fn record(
        &self,
        inputs: &[&Tensor],
        outputs: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Vec<Tensor> {
        let parents: Vec<Option<ValId>> = inputs
            .iter()
            .map(|t| t.node().map(|n| n.id))
            .collect();
        let out_numels = outputs.iter().map(|t| t.numel()).collect();
        let op = self.push(OpRec {
            parents,
            out_numels,
            backward,
        });
        outputs
            .into_iter()
            .enumerate()
            .map(|(k, t)| {
                t.with_node(NodeRef {
                    tape: self.clone(),
                    id: (op, k),
                })
            })
            .collect()
    }

    /// Reverse pass from a scalar loss. Consumes the tape; calling twice is a
    /// state error. Every tensor recorded on the tape (leaves included) gets
    /// an entry in the returned map if the loss reaches it.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let node = loss.node().ok_or_else(|| {
            Error::Contract("backward: loss is not attached to a tape".into())
        })?;
        if !self.same_tape(&node.tape) {
            return Err(Error::Contract(
                "backward: loss belongs to a different tape".into(),
            ));
        }
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        if self.inner.consumed.get() {
            return Err(Error::State(
                "backward called on a consumed tape; record a fresh tape".into(),
            ));
        }
        self.inner.consumed.set(true);

        let ops = self.inner.ops.borrow();
        let mut grads: Vec<Vec<Option<Vec<f64>>>> = ops
            .iter()
            .map(|op| vec![None; op.out_numels.len()])
            .collect();
        grads[node.id.0][node.id.1] = Some(vec![1.0]);

        for i in (0..ops.len()).rev() {
            let any_live = grads[i].iter().any(Option::is_some);
            if !any_live || ops[i].parents.is_empty() {
                continue;
            }
            // Move this op's output grads out so the sink can borrow `grads`.
            let out_grads: Vec<Option<Vec<f64>>> = std::mem::take(&mut grads[i]);
            let out_refs: Vec<Option<&[f64]>> =
                out_grads.iter().map(|g| g.as_deref()).collect();
            let parents = &ops[i].parents;
            {
                let mut sink = |slot: usize, contrib: &[f64]| {
                    if let Some((op, out)) = parents[slot] {
                        let numel = ops[op].out_numels[out];
                        debug_assert_eq!(contrib.len(), numel, "gradient size mismatch");
                        let buf = grads[op][out].get_or_insert_with(|| vec![0.0; numel]);
                        for (b, c) in buf.iter_mut().zip(contrib) {
                            *b += c;
                        }
                    }
                };
                (ops[i].backward)(&out_refs, &mut sink);
            }
            grads[i] = out_grads;
        }

        let mut map = HashMap::new();
        for (op, outs) in grads.into_iter().enumerate() {
            for (k, g) in outs.into_iter().enumerate() {
                if let Some(g) = g {
                    map.insert((op, k), g);
                }
            }
        }
        Ok(Gradients { tape: self.clone(), map })
    }
}

/// Gradient map produced by [`Tape::backward`].
pub struct Gradients {
    tape: Tape,
    map: HashMap<ValId, Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, shaped like `t`. None when
    /// `t` is untaped or unreachable from the loss.
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        let node = t.node()?;
        if !self.tape.same_tape(&node.tape) {
            return None;
        }
        let g = self.map.get(&node.id)?;
        Some(Tensor::new(t.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient for `t`, zeros when unreachable. Errors for untaped tensors.
    pub fn get_or_zeros(&self, t: &Tensor) -> Result<Tensor> {
        if t.node().is_none() {
            return Err(Error::Contract(
                "gradient requested for a tensor that is not on the tape".into(),
            ));
        }
        Ok(self
            .get(t)
            .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn sum_grad_is_ones() {
        let tape = Tape::new();
        let x = tape.var(&Tensor::new([2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let loss = ops::sum(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let gx = grads.get(&x).unwrap();
        assert_eq!(gx.shape(), &[2, 2]);
        assert!(gx.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn quadratic_grad_matches_analytic() {
        // loss = 0.5 * sum(x^2) => grad = x
        let tape = Tape::new();
        let x = tape.var(&Tensor::new([2], vec![3.0, -2.0]).unwrap());
        let sq = ops::mul(&x, &x).unwrap();
        let loss = ops::scale(&ops::sum(&sq).unwrap(), 0.5).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let gx = grads.get(&x).unwrap();
        assert_eq!(gx.data(), &[3.0, -2.0]);
    }

    #[test]
    fn second_backward_is_state_error() {
        let tape = Tape::new();
        let x = tape.var(&Tensor::scalar(2.0));
        let loss = ops::sum(&x).unwrap();
        tape.backward(&loss).unwrap();
        let err = tape.backward(&loss).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.var(&Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let err = tape.backward(&x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn grad_accumulates_over_reuse() {
        // loss = sum(x + x) => grad = 2
        let tape = Tape::new();
        let x = tape.var(&Tensor::scalar(1.5));
        let loss = ops::sum(&ops::add(&x, &x).unwrap()).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().item(), 2.0);
    }
}
