//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. [`Var`] is a
//! cheap copyable handle into it. Calling [`Tape::backward`] on a scalar
//! node walks the tape in reverse and accumulates gradients.

pub mod kernels;
mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use kernels::ConvGeom;

/// Inputs handed to a node's backward rule.
pub(crate) struct BackwardArgs<'a, S: Scalar> {
    pub inputs: Vec<&'a Tensor<S>>,
    pub output: &'a Tensor<S>,
    pub grad: &'a Tensor<S>,
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn<S> = Box<dyn Fn(&BackwardArgs<'_, S>) -> Vec<Option<Tensor<S>>>>;

struct Node<S: Scalar> {
    value: Arc<Tensor<S>>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<S>>,
}

pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    params: Vec<Arc<Tensor<S>>>,
    bound: RefCell<HashMap<ParamId, usize>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    /// Tape without parameter bindings.
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), params: Vec::new(), bound: RefCell::new(HashMap::new()) }
    }

    /// Tape that can bind the parameters of `store` as differentiable leaves.
    pub fn with_params(store: &ParamStore<S>) -> Self {
        Tape { params: store.shared_values(), ..Self::new() }
    }

    fn push(&self, node: Node<S>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        let id = self.push(Node { value: Arc::new(value), inputs: vec![], requires_grad: false, backward: None });
        Var { tape: self, id }
    }

    /// Differentiable input; its gradient is available from [`Gradients::of`].
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        let id = self.push(Node { value: Arc::new(value), inputs: vec![], requires_grad: true, backward: None });
        Var { tape: self, id }
    }

    /// The parameter `id`, bound once per tape.
    pub fn param(&self, id: ParamId) -> Var<'_, S> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let value = Arc::clone(&self.params[id.0]);
        let node = self.push(Node { value, inputs: vec![], requires_grad: true, backward: None });
        self.bound.borrow_mut().insert(id, node);
        Var { tape: self, id: node }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn op(&self, inputs: &[Var<'_, S>], value: Tensor<S>, backward: BackwardFn<S>) -> Var<'_, S> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let id = self.push(Node {
            value: Arc::new(value),
            inputs: ids,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var { tape: self, id }
    }

    /// Reverse sweep from a single-element node.
    pub fn backward(&self, root: Var<'_, S>) -> Gradients<S> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), S::one()));
        for id in (0..=root.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(rule) = &node.backward {
                let args = BackwardArgs {
                    inputs: node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect(),
                    output: &node.value,
                    grad: &grad,
                    needs: node.inputs.iter().map(|&i| nodes[i].requires_grad).collect(),
                };
                for (&input, g) in node.inputs.iter().zip(rule(&args)) {
                    let Some(g) = g else { continue };
                    debug_assert_eq!(g.shape(), nodes[input].value.shape());
                    match grads[input].as_mut() {
                        Some(acc) => acc.add_assign(&g),
                        None => grads[input] = Some(g),
                    }
                }
            }
            if node.inputs.is_empty() && node.requires_grad {
                grads[id] = Some(grad);
            }
        }
        let params = self.bound.borrow().iter().map(|(&p, &n)| (p, n)).collect();
        Gradients { leaves: grads, params }
    }
}

/// Gradients of the leaves of one tape.
pub struct Gradients<S: Scalar> {
    leaves: Vec<Option<Tensor<S>>>,
    params: HashMap<ParamId, usize>,
}

impl<S: Scalar> Gradients<S> {
    pub fn of(&self, v: Var<'_, S>) -> Option<&Tensor<S>> {
        self.leaves.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&id).and_then(|&n| self.leaves.get(n)).and_then(|g| g.as_ref())
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<S>> {
        Arc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Identity of the node; two handles are equal iff they share a node.
    pub fn node_id(&self) -> usize {
        self.id
    }
}
