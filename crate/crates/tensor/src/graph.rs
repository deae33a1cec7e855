//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation applied during one forward pass. Node
//! values are `f32` tensors; scalar nodes produced by reductions additionally
//! carry an `f64` value so that loss totals and finite-difference probes do
//! not suffer from a final rounding to single precision.

use std::collections::HashMap;

use crate::{ParamId, ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Inputs handed to a backward closure.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    /// Which inputs want a gradient; closures may skip the others.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + Send + Sync>;

struct Node {
    value: Tensor,
    exact: Option<f64>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), usize>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(Node {
            value,
            exact: None,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    /// A free input; gradients with respect to it are kept after `backward`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(Node {
            value,
            exact: None,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        })
    }

    /// Inserts (once per graph) the current value of a stored parameter.
    /// Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.tag(), id.0);
        if let Some(&idx) = self.params.get(&key) {
            return Var(idx);
        }
        let v = self.leaf(store.get(id).clone(), !store.is_frozen(id));
        self.params.insert(key, v.0);
        v
    }

    pub fn opt_param(&mut self, store: &ParamStore, id: Option<ParamId>) -> Option<Var> {
        id.map(|id| self.param(store, id))
    }

    /// Records an operation. The backward closure is dropped when no parent
    /// requires a gradient.
    pub fn push(
        &mut self,
        value: Tensor,
        exact: Option<f64>,
        parents: &[Var],
        backward: BackwardFn,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_node(Node {
            value,
            exact,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node, in double precision when available.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "scalar() on a non-scalar node");
        n.exact.unwrap_or(n.value.data()[0] as f64)
    }

    pub(crate) fn exact(&self, v: Var) -> Option<f64> {
        self.nodes[v.0].exact
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Back-propagates from a scalar node. Gradients of leaves (parameters and
    /// `leaf` inputs) remain available afterwards; intermediate gradients are
    /// released as soon as they have been consumed.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return;
        }
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let ctx = BackwardCtx {
                inputs,
                output: &node.value,
                grad: &g,
                needs,
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                if let Some(pg) = pg {
                    debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        self.grads = grads;
    }

    /// Gradient of the last `backward` with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter of `store`, indexed by [`ParamId`].
    /// Parameters that were frozen or unused get `None`.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..store.len()).map(|_| None).collect();
        for (&(tag, idx), &node) in &self.params {
            if tag == store.tag() && self.nodes[node].requires_grad {
                out[idx] = self.grads.get(node).cloned().flatten();
            }
        }
        out
    }

    /// True when any parameter of `store` was inserted into this graph.
    pub fn uses_store(&self, store: &ParamStore) -> bool {
        self.params.keys().any(|&(tag, _)| tag == store.tag())
    }
}
