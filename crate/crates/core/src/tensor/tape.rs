use super::{ParamId, ParamStore, Real, Result, Tensor, TensorError};
use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

/// Computes input gradients from `(grad_out, inputs, output)`.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

pub(crate) enum Value<T> {
    Owned(Rc<Tensor<T>>),
    Shared(Arc<Tensor<T>>),
}

impl<T> Value<T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

struct Node<T> {
    value: Value<T>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<HashMap<ParamId, usize>>,
    grad_enabled: bool,
    check_finite: Cell<bool>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A tape that records backward rules.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            grad_enabled: true,
            check_finite: Cell::new(false),
            consumed: Cell::new(false),
        }
    }

    /// A tape for inference: parameters are bound as constants and no
    /// backward closures are stored.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// When set, every op checks its output and fails with
    /// [`TensorError::NonFinite`] on NaN/Inf.
    pub fn set_check_finite(&self, on: bool) {
        self.check_finite.set(on);
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

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Value::Owned(Rc::new(value)),
            inputs: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// A constant bound without copying.
    pub fn constant_shared(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.push(Node {
            value: Value::Shared(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// A differentiable input that is not a stored parameter.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Value::Owned(Rc::new(value)),
            inputs: Vec::new(),
            backward: None,
            requires_grad: self.grad_enabled,
            param: None,
        })
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let var = self.push(Node {
            value: Value::Shared(store.value_arc(id)),
            inputs: Vec::new(),
            backward: None,
            requires_grad: self.grad_enabled,
            param: Some(id),
        });
        self.bound.borrow_mut().insert(id, var.id);
        var
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.get().clone()
    }

    pub(crate) fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(self.nodes.borrow()[id].value.get())
    }

    pub(crate) fn with_values<R>(&self, ids: &[usize], f: impl FnOnce(&[&Tensor<T>]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let vals: Vec<&Tensor<T>> = ids.iter().map(|&i| nodes[i].value.get()).collect();
        f(&vals)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Appends the result of an op. The backward rule is dropped when no
    /// input needs a gradient.
    pub(crate) fn record(
        &self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[usize],
        backward: BackwardFn<T>,
    ) -> Result<Var<'_, T>> {
        if self.check_finite.get() && !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| self.requires_grad(i));
        Ok(self.push(Node {
            value: Value::Owned(Rc::new(value)),
            inputs: inputs.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        }))
    }

    /// Reverse pass from a scalar loss. A tape supports a single backward.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let shape = loss.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        if self.consumed.replace(true) {
            return Err(TensorError::DoubleBackward);
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(&shape, T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| nodes[i].value.get()).collect();
            let input_grads = backward(&g, &inputs, node.value.get());
            for (&inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !nodes[inp].requires_grad {
                    continue;
                }
                match &mut grads[inp] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
            grads[id] = Some(g);
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a recorded value, if it was reached.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Adds parameter gradients into the store's grad slots.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.accumulate_grad(pid, g);
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        self.tape.with_value(self.id, f)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn item(&self) -> T {
        self.with_value(|t| t.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }
}
