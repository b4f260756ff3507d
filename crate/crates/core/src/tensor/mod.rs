//! Reverse-mode automatic differentiation over `f64` arrays.
//!
//! The engine is define-by-run: every operation eagerly computes its output
//! and, when any input participates in gradient computation, registers a
//! backward closure. Calling [`Tensor::backward`] on a scalar loss walks the
//! recorded graph in reverse topological order and accumulates gradients
//! per node.
//!
//! Everything is `f64` and single-threaded, so a fixed seed reproduces every
//! run bit for bit.

mod conv;
mod elementwise;
pub mod gradcheck;
mod linalg;
mod shape;
mod special;

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

/// Dynamic-dimensional `f64` array, the engine's only storage type.
pub type Arr = ArrayD<f64>;

thread_local! {
    static NEXT_ID: RefCell<u64> = const { RefCell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let mut c = c.borrow_mut();
        let id = *c;
        *c += 1;
        id
    })
}

type GradFn = Box<dyn Fn(&Arr, &mut Grads)>;

struct Node {
    id: u64,
    value: Arr,
    parents: Vec<Tensor>,
    grad_fn: Option<GradFn>,
    needs_grad: bool,
}

/// A node in the autodiff graph. Cheap to clone (reference counted).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.shape())
            .field("needs_grad", &self.inner.needs_grad)
            .finish()
    }
}

impl Tensor {
    /// Leaf tensor that does not require gradients.
    pub fn constant(value: Arr) -> Self {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        Tensor {
            inner: Rc::new(Node {
                id: fresh_id(),
                value,
                parents: Vec::new(),
                grad_fn: None,
                needs_grad: false,
            }),
        }
    }

    /// Leaf tensor that accumulates gradients during backward.
    pub fn leaf(value: Arr) -> Self {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        Tensor {
            inner: Rc::new(Node {
                id: fresh_id(),
                value,
                parents: Vec::new(),
                grad_fn: None,
                needs_grad: true,
            }),
        }
    }

    /// Scalar constant.
    pub fn scalar(v: f64) -> Self {
        Self::constant(Arr::from_elem(IxDyn(&[]), v))
    }

    pub(crate) fn from_op(
        value: Arr,
        parents: Vec<Tensor>,
        grad_fn: impl Fn(&Arr, &mut Grads) + 'static,
    ) -> Self {
        // Stored values are always standard layout so ops that reinterpret
        // memory (reshape) never see permuted strides.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        let needs_grad = parents.iter().any(|p| p.inner.needs_grad);
        Tensor {
            inner: Rc::new(Node {
                id: fresh_id(),
                value,
                parents,
                grad_fn: if needs_grad {
                    Some(Box::new(grad_fn))
                } else {
                    None
                },
                needs_grad,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn value(&self) -> &Arr {
        &self.inner.value
    }

    pub fn shape(&self) -> &[usize] {
        self.inner.value.shape()
    }

    pub fn len(&self) -> usize {
        self.inner.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.value.is_empty()
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }

    /// Extract the single element of a scalar (or one-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on tensor of len {}", self.len());
        *self.inner.value.iter().next().expect("empty tensor")
    }

    /// Cut the graph: same value, no gradient history.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.inner.value.clone())
    }

    pub fn has_nan(&self) -> bool {
        self.inner.value.iter().any(|v| !v.is_finite())
    }

    /// Run reverse-mode differentiation from a scalar output.
    ///
    /// Returns the gradient set for every node that required gradients.
    /// Panics if `self` is not a single-element tensor.
    pub fn backward(&self) -> Grads {
        assert_eq!(
            self.len(),
            1,
            "backward() requires a scalar output, got shape {:?}",
            self.shape()
        );
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        // Iterative DFS post-order over nodes that need gradients.
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.id());
        while let Some((node, pi)) = stack.pop() {
            let parents = &node.inner.parents;
            if pi < parents.len() {
                let next = parents[pi].clone();
                stack.push((node, pi + 1));
                if next.inner.needs_grad && !seen.contains(&next.id()) {
                    seen.insert(next.id());
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }

        let mut grads = Grads::default();
        grads
            .slots
            .insert(self.id(), Arr::from_elem(self.inner.value.raw_dim(), 1.0));
        for node in order.iter().rev() {
            if let Some(grad_fn) = &node.inner.grad_fn {
                if let Some(g) = grads.slots.get(&node.id()) {
                    let g = g.clone();
                    grad_fn(&g, &mut grads);
                }
            }
        }
        grads
    }
}

/// Gradients accumulated by [`Tensor::backward`], keyed by node id.
#[derive(Default)]
pub struct Grads {
    slots: HashMap<u64, Arr>,
}

impl Grads {
    pub(crate) fn accumulate(&mut self, target: &Tensor, grad: Arr) {
        debug_assert_eq!(
            grad.shape(),
            target.shape(),
            "gradient shape mismatch for node {}",
            target.id()
        );
        if !target.inner.needs_grad {
            return;
        }
        match self.slots.entry(target.id()) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                *e.get_mut() += &grad;
            }
            std::collections::hash_map::Entry::Vacant(v) => {
                v.insert(grad);
            }
        }
    }

    pub fn get(&self, t: &Tensor) -> Option<&Arr> {
        self.slots.get(&t.id())
    }

    pub fn get_by_id(&self, id: u64) -> Option<&Arr> {
        self.slots.get(&id)
    }
}

/// Broadcast shape of two operands under trailing-alignment rules.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `grad` down to `shape` by reducing broadcast axes.
pub(crate) fn reduce_to_shape(grad: &Arr, shape: &[usize]) -> Arr {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(ndarray::Axis(0));
    }
    for (axis, (&gd, &sd)) in g.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if gd != sd {
            debug_assert_eq!(sd, 1, "cannot reduce axis {axis} from {gd} to {sd}");
            let summed = g.sum_axis(ndarray::Axis(axis));
            g = summed.insert_axis(ndarray::Axis(axis));
        }
    }
    g
}
