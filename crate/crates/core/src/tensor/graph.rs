use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::kernels::Exec;
use crate::{Error, Result, Scalar, Tensor};

pub type NodeId = usize;

/// Backward rule of one recorded operation.
///
/// `inputs` and `output` are the forward values; `grad` is the gradient of
/// the loss with respect to `output`. The rule returns one entry per input,
/// `None` where `needs[i]` is false.
pub trait Backward<T: Scalar> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    inputs: Vec<NodeId>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

struct Tape<T: Scalar> {
    epoch: u64,
    nodes: Vec<Node<T>>,
    params: HashMap<usize, NodeId>,
}

static EPOCHS: AtomicU64 = AtomicU64::new(1);

fn next_epoch() -> u64 {
    EPOCHS.fetch_add(1, Ordering::Relaxed)
}

/// Append-only differentiation tape. Nodes are stored in creation order,
/// which is also a topological order.
pub struct Graph<T: Scalar> {
    tape: RefCell<Tape<T>>,
    exec: Exec,
    fault: Cell<Option<&'static str>>,
}

/// Handle to a node on a [`Graph`].
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: NodeId,
    epoch: u64,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Graph {
            tape: RefCell::new(Tape {
                epoch: next_epoch(),
                nodes: Vec::new(),
                params: HashMap::new(),
            }),
            exec,
            fault: Cell::new(None),
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node; outstanding [`Var`]s become detached.
    pub fn reset(&self) {
        let mut tape = self.tape.borrow_mut();
        tape.nodes.clear();
        tape.params.clear();
        tape.epoch = next_epoch();
    }

    /// Scales every gradient produced by the named backward rule by 1.25.
    /// Negative control for the gradient checker; never set in normal use.
    #[doc(hidden)]
    pub fn corrupt_backward(&self, op: Option<&'static str>) {
        self.fault.set(op);
    }

    fn leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut tape = self.tape.borrow_mut();
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
        });
        Var {
            graph: self,
            id,
            epoch: tape.epoch,
        }
    }

    /// A value that takes no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(value), false)
    }

    /// A leaf that receives a gradient on [`Graph::backward`].
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(value), true)
    }

    /// Registers a trainable parameter under `key`. Repeated calls with the
    /// same key return the same node, so shared weights accumulate.
    pub fn param(&self, key: usize, value: &Arc<Tensor<T>>) -> Var<'_, T> {
        if let Some(&id) = self.tape.borrow().params.get(&key) {
            let epoch = self.tape.borrow().epoch;
            return Var {
                graph: self,
                id,
                epoch,
            };
        }
        let var = self.leaf(Arc::clone(value), true);
        self.tape.borrow_mut().params.insert(key, var.id);
        var
    }

    /// Records an operation. The output must be finite.
    pub fn push(
        &self,
        value: Tensor<T>,
        inputs: &[Var<'_, T>],
        op: impl Backward<T> + 'static,
    ) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let mut tape = self.tape.borrow_mut();
        let mut requires_grad = false;
        for v in inputs {
            if v.epoch != tape.epoch {
                return Err(Error::Detached);
            }
            requires_grad |= tape.nodes[v.id].requires_grad;
        }
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            value: Arc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            op: requires_grad.then(|| Box::new(op) as Box<dyn Backward<T>>),
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id,
            epoch: tape.epoch,
        })
    }

    /// Back-propagates from a scalar `loss`, seeding its gradient with 1.
    /// Gradients reaching a node along several paths are summed. The tape is
    /// reset afterwards.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.graph, self) {
            return Err(Error::Detached);
        }
        let mut tape = self.tape.borrow_mut();
        if loss.epoch != tape.epoch {
            return Err(Error::Detached);
        }
        let loss_shape = tape.nodes[loss.id].value.shape().to_vec();
        if tape.nodes[loss.id].value.len() != 1 {
            return Err(Error::NotScalar(loss_shape));
        }

        let n = loss.id + 1;
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        let mut leaves: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        leaves.resize_with(n, || None);
        grads[loss.id] = Some(vec![T::one()]);
        let fault = self.fault.get();

        for id in (0..n).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &tape.nodes[id];
            let Some(op) = node.op.as_ref() else {
                if node.requires_grad {
                    leaves[id] = Some(grad);
                }
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|&i| tape.nodes[i].value.as_ref()).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| tape.nodes[i].requires_grad)
                .collect();
            let mut contributions = op.backward(&inputs, &node.value, &grad, &needs);
            if fault == Some(op.name()) {
                let k = T::of(1.25);
                for g in contributions.iter_mut().flatten() {
                    g.iter_mut().for_each(|v| *v = *v * k);
                }
            }
            for (&input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(contribution) = contribution else {
                    continue;
                };
                debug_assert_eq!(contribution.len(), tape.nodes[input].value.len(), "{}", op.name());
                match &mut grads[input] {
                    Some(acc) => acc
                        .iter_mut()
                        .zip(&contribution)
                        .for_each(|(a, &c)| *a = *a + c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        let params = tape.params.iter().map(|(&k, &id)| (k, id)).collect();
        let shapes = tape.nodes[..n]
            .iter()
            .map(|node| node.value.shape().to_vec())
            .collect();
        let epoch = tape.epoch;
        tape.nodes.clear();
        tape.params.clear();
        tape.epoch = next_epoch();
        Ok(Gradients {
            epoch,
            grads: leaves,
            shapes,
            params,
        })
    }

    pub(crate) fn value_of(&self, id: NodeId) -> Arc<Tensor<T>> {
        Arc::clone(&self.tape.borrow().nodes[id].value)
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    fn check_live(&self) {
        assert_eq!(
            self.epoch,
            self.graph.tape.borrow().epoch,
            "use of a Var after its graph was reset"
        );
    }

    /// Forward value of this node.
    pub fn value(&self) -> Arc<Tensor<T>> {
        self.check_live();
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        let tape = self.graph.tape.borrow();
        if tape.epoch != self.epoch {
            return Vec::new();
        }
        tape.nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.check_live();
        self.graph.tape.borrow().nodes[self.id].requires_grad
    }
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients<T> {
    epoch: u64,
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(usize, NodeId)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created on the pass that produced these gradients.
    /// Leaves the loss does not depend on get a zero gradient.
    pub fn get(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        if var.epoch != self.epoch || var.id >= self.shapes.len() {
            return None;
        }
        self.by_id(var.id)
    }

    fn by_id(&self, id: NodeId) -> Option<Tensor<T>> {
        let shape = self.shapes[id].clone();
        let data = match &self.grads[id] {
            Some(g) => g.clone(),
            None => vec![T::zero(); crate::tensor::numel(&shape)],
        };
        Some(Tensor::new(shape, data).expect("gradient shape matches its node"))
    }

    /// Gradients of parameters registered with [`Graph::param`], keyed by
    /// the registration key. Parameters the loss does not reach get zeros.
    pub fn params(&self) -> impl Iterator<Item = (usize, Tensor<T>)> + '_ {
        self.params.iter().filter(|(_, id)| *id < self.shapes.len()).map(|&(key, id)| {
            (key, self.by_id(id).expect("registered parameter is on the tape"))
        })
    }
}
