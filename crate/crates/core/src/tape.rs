use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Backward closure: maps the upstream gradient of the entry's output to
/// one gradient per input (None for inputs that receive no gradient).
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Entry<T> {
    #[allow(dead_code)]
    op: &'static str,
    inputs: Vec<NodeId>,
    output: NodeId,
    backward: BackwardFn<T>,
}

/// Define-by-run record of a forward pass. Nodes are appended in execution
/// order, so the entry list is already topologically sorted; backward walks
/// it once in reverse, accumulating gradients additively.
///
/// A tape is confined to a single execution context; tensors it holds are
/// immutable after recording.
pub struct Tape<T: Scalar> {
    values: Vec<Rc<Tensor<T>>>,
    entries: Vec<Entry<T>>,
    param_bindings: Vec<(ParamId, NodeId)>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            entries: Vec::new(),
            param_bindings: Vec::new(),
        }
    }

    /// Insert an input tensor as a leaf node.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        let id = self.values.len();
        self.values.push(Rc::new(value));
        id
    }

    /// Insert a parameter value as a leaf and remember the binding so its
    /// gradient can be routed back to the store after backward.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let node = self.leaf(store.get(id).value.clone());
        self.param_bindings.push((id, node));
        node
    }

    /// Record an operation: its output value plus the closure that turns the
    /// output gradient into input gradients.
    pub fn record(
        &mut self,
        op: &'static str,
        inputs: Vec<NodeId>,
        output: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> NodeId {
        self.record_rc(op, inputs, Rc::new(output), backward)
    }

    /// Like [`Tape::record`] but takes the output already wrapped in an `Rc`,
    /// so the backward closure can capture the same allocation.
    pub fn record_rc(
        &mut self,
        op: &'static str,
        inputs: Vec<NodeId>,
        output: Rc<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> NodeId {
        debug_assert!(inputs.iter().all(|&i| i < self.values.len()), "{op}: input from the future");
        let out_id = self.values.len();
        self.values.push(output);
        self.entries.push(Entry {
            op,
            inputs,
            output: out_id,
            backward,
        });
        out_id
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn value_rc(&self, id: NodeId) -> Rc<Tensor<T>> {
        Rc::clone(&self.values[id])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn param_bindings(&self) -> &[(ParamId, NodeId)] {
        &self.param_bindings
    }

    /// Reverse pass from a scalar loss node. Every entry's backward closure
    /// runs at most once; gradients accumulate additively into each node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if loss >= self.values.len() {
            return Err(Error::UnknownNode(loss));
        }
        let loss_value = &self.values[loss];
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.values.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::full(loss_value.shape().to_vec(), T::one()));

        for entry in self.entries.iter().rev() {
            let Some(out_grad) = grads[entry.output].clone() else {
                continue;
            };
            let input_grads = (entry.backward)(&out_grad);
            debug_assert_eq!(input_grads.len(), entry.inputs.len(), "{}: backward arity", entry.op);
            for (&input, grad) in entry.inputs.iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                debug_assert_eq!(
                    grad.shape(),
                    self.values[input].shape(),
                    "{}: gradient shape for input {input}",
                    entry.op
                );
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += *g;
                        }
                    }
                    slot => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradient of the loss with respect to every bound parameter, keyed by
    /// parameter name. Parameters never touched by the loss map to zeros.
    pub fn backward_params(
        &self,
        loss: NodeId,
        store: &ParamStore<T>,
    ) -> Result<BTreeMap<String, Tensor<T>>> {
        let grads = self.backward(loss)?;
        let mut map = BTreeMap::new();
        for &(pid, node) in &self.param_bindings {
            let name = store.get(pid).name.clone();
            let g = grads
                .get(node)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.get(pid).value.shape().to_vec()));
            match map.entry(name) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(g);
                }
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    let acc = e.get_mut();
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
            }
        }
        Ok(map)
    }

    /// Add this pass's parameter gradients into the store's accumulators.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for &(pid, node) in &self.param_bindings {
            if let Some(g) = grads.get(node) {
                let acc = &mut store.get_mut(pid).grad;
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward pass: one optional gradient per node id.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for a node, densified to the node's shape.
    pub fn dense(&self, tape: &Tape<T>, id: NodeId) -> Tensor<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape().to_vec()))
    }
}

/// Execution mode for layers with train/eval asymmetry (batch norm, dynamic
/// pooling renormalization).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Bundle of everything a layer forward needs: the tape being recorded, the
/// read-only parameter store, the execution mode, and a queue of state
/// updates (running stats, EMA ratios) to apply after the step. Keeping the
/// store immutable during forward lets independent contexts share it.
pub struct Ctx<'s, T: Scalar> {
    pub tape: Tape<T>,
    pub store: &'s ParamStore<T>,
    pub mode: Mode,
    pending: Vec<(ParamId, Tensor<T>)>,
}

impl<'s, T: Scalar> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            mode,
            pending: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.tape.param(self.store, id)
    }

    pub fn param_value(&self, id: ParamId) -> &Tensor<T> {
        &self.store.get(id).value
    }

    /// Queue a state write (applied by the owning trainer via [`Ctx::take_pending`]).
    pub fn push_pending(&mut self, id: ParamId, value: Tensor<T>) {
        self.pending.push((id, value));
    }

    pub fn take_pending(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.pending)
    }
}

/// Apply queued state writes to the store.
pub fn apply_pending<T: Scalar>(store: &mut ParamStore<T>, pending: Vec<(ParamId, Tensor<T>)>) {
    for (id, value) in pending {
        store.get_mut(id).value = value;
    }
}
