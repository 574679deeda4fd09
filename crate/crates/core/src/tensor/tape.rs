//! Reverse-mode differentiation tape.
//!
//! Operations executed on [`Var`]s append a node holding a backward closure.
//! `backward` walks the nodes in reverse execution order, so the topological
//! invariant holds by construction: a node can only reference nodes that
//! already exist. Nothing is recorded when no input requires a gradient or
//! when recording is disabled, which keeps inference memory proportional to
//! the live values only.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use super::element::Element;
use super::param::Parameter;
use super::storage::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Gradients for each op input, given the output gradient and a per-input
/// "needs gradient" mask.
pub type BackwardFn<E> = Box<dyn FnOnce(&Tensor<E>, &[bool]) -> Vec<Option<Tensor<E>>>>;

struct Node<E> {
    inputs: Vec<Option<NodeId>>,
    backward: Option<BackwardFn<E>>,
    shape: Vec<usize>,
}

#[derive(Default)]
struct TapeState<E> {
    nodes: Vec<Node<E>>,
    leaf_grads: HashMap<NodeId, Tensor<E>>,
    params: HashMap<String, (NodeId, Arc<Tensor<E>>)>,
    backward_done: bool,
}

pub struct Tape<E: Element> {
    state: RefCell<TapeState<E>>,
    recording: Cell<bool>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            state: RefCell::new(TapeState {
                nodes: Vec::new(),
                leaf_grads: HashMap::new(),
                params: HashMap::new(),
                backward_done: false,
            }),
            recording: Cell::new(true),
        }
    }

    /// A tape that never records; used for inference.
    pub fn no_grad() -> Self {
        let t = Self::new();
        t.recording.set(false);
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    pub fn len(&self) -> usize {
        self.state.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value that never receives a gradient.
    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        self.constant_arc(Arc::new(value))
    }

    pub fn constant_arc(&self, value: Arc<Tensor<E>>) -> Var<'_, E> {
        Var {
            tape: self,
            value,
            node: None,
        }
    }

    /// Leaf that requires a gradient.
    pub fn variable(&self, value: Tensor<E>) -> Var<'_, E> {
        self.variable_arc(Arc::new(value))
    }

    pub fn variable_arc(&self, value: Arc<Tensor<E>>) -> Var<'_, E> {
        if !self.is_recording() {
            return self.constant_arc(value);
        }
        let node = self.push_node(Vec::new(), None, value.shape().to_vec());
        Var {
            tape: self,
            value,
            node: Some(node),
        }
    }

    /// Binds a named parameter as a leaf. Binding the same name twice on one
    /// tape returns the same leaf, so repeated uses accumulate gradients.
    pub fn param(&self, p: &Parameter<E>) -> Var<'_, E> {
        if !self.is_recording() {
            return self.constant_arc(p.value_arc());
        }
        if let Some((node, value)) = self.state.borrow().params.get(p.name()) {
            return Var {
                tape: self,
                value: value.clone(),
                node: Some(*node),
            };
        }
        let var = self.variable_arc(p.value_arc());
        self.state.borrow_mut().params.insert(
            p.name().to_string(),
            (var.node.expect("recording tape"), var.value.clone()),
        );
        var
    }

    fn push_node(
        &self,
        inputs: Vec<Option<NodeId>>,
        backward: Option<BackwardFn<E>>,
        shape: Vec<usize>,
    ) -> NodeId {
        let mut st = self.state.borrow_mut();
        st.nodes.push(Node {
            inputs,
            backward,
            shape,
        });
        st.nodes.len() - 1
    }

    /// True when recording and at least one input carries a node.
    pub fn needs_grad(&self, inputs: &[&Var<'_, E>]) -> bool {
        self.is_recording() && inputs.iter().any(|v| v.node.is_some())
    }

    /// Records an operation. `backward` receives the output gradient and
    /// returns one optional gradient per input, in input order.
    pub fn record<F>(&self, value: Tensor<E>, inputs: &[&Var<'_, E>], backward: F) -> Var<'_, E>
    where
        F: FnOnce(&Tensor<E>, &[bool]) -> Vec<Option<Tensor<E>>> + 'static,
    {
        self.record_arc(Arc::new(value), inputs, backward)
    }

    pub fn record_arc<F>(
        &self,
        value: Arc<Tensor<E>>,
        inputs: &[&Var<'_, E>],
        backward: F,
    ) -> Var<'_, E>
    where
        F: FnOnce(&Tensor<E>, &[bool]) -> Vec<Option<Tensor<E>>> + 'static,
    {
        debug_assert!(
            value.all_finite(),
            "non-finite forward value, shape {:?}",
            value.shape()
        );
        debug_assert!(inputs.iter().all(|v| std::ptr::eq(v.tape, self)));
        if !self.needs_grad(inputs) {
            return self.constant_arc(value);
        }
        let ids = inputs.iter().map(|v| v.node).collect();
        let node = self.push_node(ids, Some(Box::new(backward)), value.shape().to_vec());
        Var {
            tape: self,
            value,
            node: Some(node),
        }
    }

    /// Propagates d(loss)/d(node) to every leaf reachable from `loss`.
    pub fn backward(&self, loss: &Var<'_, E>) -> Result<()> {
        if loss.value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar root, got shape {:?}",
                loss.value.shape()
            )));
        }
        let root = loss
            .node
            .ok_or_else(|| Error::Autodiff("root does not depend on any variable".into()))?;
        let mut nodes = {
            let mut st = self.state.borrow_mut();
            if st.backward_done {
                return Err(Error::Autodiff(
                    "backward already ran on this tape; call reset() first".into(),
                ));
            }
            if st.nodes.is_empty() {
                return Err(Error::Autodiff("empty tape".into()));
            }
            st.backward_done = true;
            std::mem::take(&mut st.nodes)
        };
        let mut grads: Vec<Option<Tensor<E>>> = Vec::new();
        grads.resize_with(root + 1, || None);
        grads[root] = Some(Tensor::ones(loss.value.shape().to_vec()));
        let mut leaf_grads = HashMap::new();

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &mut nodes[id];
            let inputs = std::mem::take(&mut node.inputs);
            match node.backward.take() {
                None => {
                    leaf_grads.insert(id, g);
                }
                Some(bw) => {
                    let needs: Vec<bool> = inputs.iter().map(Option::is_some).collect();
                    let input_grads = bw(&g, &needs);
                    debug_assert_eq!(input_grads.len(), inputs.len());
                    for (input, ig) in inputs.iter().zip(input_grads) {
                        let (Some(pid), Some(ig)) = (input, ig) else {
                            continue;
                        };
                        debug_assert_eq!(ig.shape(), nodes_shape(&nodes, *pid));
                        match &mut grads[*pid] {
                            Some(acc) => acc.add_assign(&ig),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
        }
        let mut st = self.state.borrow_mut();
        // leaves keep their shapes for zero-filled lookups
        st.nodes = nodes
            .into_iter()
            .map(|n| Node {
                inputs: Vec::new(),
                backward: None,
                shape: n.shape,
            })
            .collect();
        st.leaf_grads = leaf_grads;
        Ok(())
    }

    /// Gradient of a leaf after `backward`. Leaves the loss does not depend on
    /// get zeros.
    pub fn grad(&self, var: &Var<'_, E>) -> Option<Tensor<E>> {
        let node = var.node?;
        self.grad_of_node(node)
    }

    fn grad_of_node(&self, node: NodeId) -> Option<Tensor<E>> {
        let st = self.state.borrow();
        if !st.backward_done {
            return None;
        }
        Some(
            st.leaf_grads
                .get(&node)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(st.nodes[node].shape.clone())),
        )
    }

    /// Gradient of a parameter bound with [`Tape::param`].
    pub fn param_grad(&self, name: &str) -> Option<Tensor<E>> {
        let node = self.state.borrow().params.get(name).map(|(n, _)| *n)?;
        self.grad_of_node(node)
    }

    /// Removes and returns a parameter gradient without cloning.
    pub fn take_param_grad(&self, name: &str) -> Option<Tensor<E>> {
        let mut st = self.state.borrow_mut();
        if !st.backward_done {
            return None;
        }
        let (node, _) = *st.params.get(name)?;
        let shape = st.nodes[node].shape.clone();
        Some(
            st.leaf_grads
                .remove(&node)
                .unwrap_or_else(|| Tensor::zeros(shape)),
        )
    }

    pub fn reset(&self) {
        let mut st = self.state.borrow_mut();
        st.nodes.clear();
        st.leaf_grads.clear();
        st.params.clear();
        st.backward_done = false;
    }
}

fn nodes_shape<E>(nodes: &[Node<E>], id: NodeId) -> &[usize] {
    &nodes[id].shape
}

/// A tensor value flowing through a [`Tape`].
#[derive(Clone)]
pub struct Var<'t, E: Element> {
    tape: &'t Tape<E>,
    value: Arc<Tensor<E>>,
    node: Option<NodeId>,
}

impl<'t, E: Element> Var<'t, E> {
    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn value(&self) -> &Tensor<E> {
        &self.value
    }

    pub fn value_arc(&self) -> Arc<Tensor<E>> {
        self.value.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn detach(&self) -> Var<'t, E> {
        self.tape.constant_arc(self.value.clone())
    }

    /// Takes the value out, cloning only when it is shared.
    pub fn into_value(self) -> Tensor<E> {
        Arc::try_unwrap(self.value).unwrap_or_else(|a| (*a).clone())
    }
}

impl<E: Element> std::fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("node", &self.node)
            .finish()
    }
}
