//! Reverse-mode tape.
//!
//! Every operation appends a node holding its value and a backward closure.
//! Node ids are assigned in creation order, which is a topological order, so
//! backpropagation is a single reverse sweep.

use std::cell::RefCell;
use std::sync::Arc;

use crate::float::Float;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Gradient of one output with respect to each parent. `needs[i]` is false
/// when parent `i` does not require a gradient; the closure may return `None`
/// for it.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Float> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

struct ParamSlot<T: Float> {
    value: Arc<Tensor<T>>,
    trainable: bool,
}

pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    params: Vec<ParamSlot<T>>,
    param_nodes: RefCell<Vec<Option<usize>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Float> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<T: Float> Tape<T> {
    /// Tape that records gradients, reading parameters from `store`.
    pub fn new(store: &ParamStore<T>) -> Self {
        Self::build(store, true)
    }

    /// Inference tape: values only, no backward closures are kept.
    pub fn no_grad(store: &ParamStore<T>) -> Self {
        Self::build(store, false)
    }

    /// Tape with no parameters at all.
    pub fn detached(grad_enabled: bool) -> Self {
        Self::build(&ParamStore::new(), grad_enabled)
    }

    fn build(store: &ParamStore<T>, grad_enabled: bool) -> Self {
        let params: Vec<_> = store
            .entries()
            .map(|e| ParamSlot {
                value: e.value.clone(),
                trainable: e.trainable,
            })
            .collect();
        let n = params.len();
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled,
            params,
            param_nodes: RefCell::new(vec![None; n]),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Arc::new(value),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// Input that receives a gradient (used for gradient checks on inputs).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Arc::new(value),
            requires_grad: self.grad_enabled,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// Parameter `id` of the store this tape was built from. Repeated calls
    /// return the same node.
    pub fn param(&self, id: ParamId) -> Var<'_, T> {
        if let Some(node) = self.param_nodes.borrow()[id.0] {
            return Var { tape: self, id: node };
        }
        let slot = &self.params[id.0];
        let var = self.push(Node {
            value: slot.value.clone(),
            requires_grad: self.grad_enabled && slot.trainable,
            parents: Vec::new(),
            backward: None,
        });
        self.param_nodes.borrow_mut()[id.0] = Some(var.id);
        var
    }

    /// Record a custom differentiable operation.
    pub fn op<'t>(
        &'t self,
        parents: &[Var<'t, T>],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'t, T> {
        self.op_arc(parents, Arc::new(value), backward)
    }

    /// Like [`Tape::op`] for a value already shared with the backward closure.
    pub fn op_arc<'t>(
        &'t self,
        parents: &[Var<'t, T>],
        value: Arc<Tensor<T>>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'t, T> {
        let parent_ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            parent_ids.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push(Node {
            value,
            requires_grad,
            parents: if requires_grad { parent_ids } else { Vec::new() },
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Backpropagate from a scalar `root`.
    pub fn backward(&self, root: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let root_value = &nodes[root.id].value;
        assert_eq!(root_value.len(), 1, "backward() needs a scalar root");
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(Tensor::full(root_value.shape(), T::one()));
        }
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, need) else {
                    continue;
                };
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let mut params = vec![None; self.params.len()];
        for (pid, node) in self.param_nodes.borrow().iter().enumerate() {
            if let Some(node) = node {
                params[pid] = grads[*node].take();
            }
        }
        Grads { nodes: grads, params }
    }
}

/// Gradients produced by [`Tape::backward`]. Only leaves and parameters keep
/// their gradient after the sweep.
pub struct Grads<T: Float> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    /// Gradient of a leaf created with [`Tape::leaf`].
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.nodes.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients indexed like the originating store.
    pub fn into_param_grads(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }
}
