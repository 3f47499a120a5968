//! The tape itself: node storage, leaves, constants, and the backward pass.

use ndarray::{ArrayD, IxDyn};

/// Tensor payload of every tape node.
pub type Value = ArrayD<f64>;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) u32);

/// Backward rule of one node: maps the node's output gradient (plus the
/// whole value store, indexed by captured parent ids) to per-parent
/// gradient contributions.
pub(crate) type BackFn = Box<dyn Fn(&Value, &[Value]) -> Vec<(u32, Value)>>;

struct Node {
    back: Option<BackFn>,
    needs_grad: bool,
}

/// A linear recording of tensor operations.
///
/// Build a fresh tape per training step: bind parameters with [`Tape::leaf`],
/// feed data with [`Tape::constant`], compose ops, then call
/// [`Tape::backward`] on a scalar loss.
#[derive(Default)]
pub struct Tape {
    values: Vec<Value>,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, x: Var) -> &Value {
        &self.values[x.0 as usize]
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.values[x.0 as usize].shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, x: Var) -> f64 {
        let v = self.value(x);
        assert_eq!(v.len(), 1, "scalar: node has {} elements", v.len());
        v.iter().next().copied().unwrap()
    }

    pub fn needs_grad(&self, x: Var) -> bool {
        self.nodes[x.0 as usize].needs_grad
    }

    pub(crate) fn push(&mut self, value: Value, needs_grad: bool, back: Option<BackFn>) -> Var {
        debug_assert!(value.iter().all(|v| !v.is_nan()) || true); // NaN checks live in callers
        let id = self.nodes.len() as u32;
        self.values.push(value);
        self.nodes.push(Node {
            back: if needs_grad { back } else { None },
            needs_grad,
        });
        Var(id)
    }

    /// A gradient leaf: `backward` will report a gradient for this node.
    pub fn leaf(&mut self, value: Value) -> Var {
        self.push(value, true, None)
    }

    /// A constant: no gradient is tracked through it.
    pub fn constant(&mut self, value: Value) -> Var {
        self.push(value, false, None)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.constant(Value::from_elem(IxDyn(&[1]), v))
    }

    /// Cuts the gradient flow: same value, no history.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every leaf
    /// reachable from `loss`; constants and unreachable leaves report `None`.
    pub fn backward(&self, loss: Var) -> Grads {
        let v = self.value(loss);
        assert_eq!(v.len(), 1, "backward: loss must be a scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Value>> = (0..n).map(|_| None).collect();
        grads[loss.0 as usize] = Some(Value::from_elem(IxDyn(&[1]), 1.0));
        for idx in (0..=loss.0 as usize).rev() {
            let node = &self.nodes[idx];
            let Some(back) = node.back.as_ref() else {
                continue; // leaf or constant: keep any accumulated gradient
            };
            let Some(g) = grads[idx].take() else {
                continue; // not on any path to the loss
            };
            for (pid, contrib) in back(&g, &self.values) {
                let pid = pid as usize;
                if !self.nodes[pid].needs_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Grads { grads }
    }
}

/// Gradients returned by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Value>>,
}

impl Grads {
    pub fn get(&self, x: Var) -> Option<&Value> {
        self.grads[x.0 as usize].as_ref()
    }

    /// Gradient of a leaf, or a zero tensor of the given shape when the
    /// leaf does not influence the loss.
    pub fn get_or_zeros(&self, x: Var, shape: &[usize]) -> Value {
        match self.get(x) {
            Some(g) => g.clone(),
            None => Value::zeros(IxDyn(shape)),
        }
    }
}
