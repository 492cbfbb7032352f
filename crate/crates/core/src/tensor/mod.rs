//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Tensors are immutable, reference-counted nodes of a computation graph that
//! is recorded while operations run. Calling [`Tensor::backward`] on a scalar
//! walks the graph in reverse topological order and returns a [`Grads`] map
//! keyed by node id. Nodes that do not (transitively) depend on a tensor with
//! `requires_grad` carry no backward closure, so frozen sub-networks cost
//! nothing on the way back.
//!
//! Everything is single-threaded and deterministic: the same sequence of
//! operations on the same inputs yields bitwise identical values and
//! gradients.

mod conv;
mod nn;
mod ops;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

pub use conv::ConvGeometry;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward closure: maps the gradient of a node to gradients of its parents
/// (one entry per parent, `None` where the parent needs no gradient).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct GradFn {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
    tag: Cell<Option<&'static str>>,
}

/// A node in the computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("tag", &self.0.tag.get())
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Constant tensor (never receives a gradient).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(
            data.len(),
            numel(shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor::leaf(data, shape.to_vec(), false)
    }

    /// Leaf tensor whose gradient is collected by [`Tensor::backward`].
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(data.len(), numel(shape));
        Tensor::leaf(data, shape.to_vec(), true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(vec![0.0; numel(shape)], shape)
    }

    pub fn full(value: f64, shape: &[usize]) -> Tensor {
        Tensor::new(vec![value; numel(shape)], shape)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(vec![value], &[])
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Node {
            id: fresh_id(),
            shape,
            data,
            requires_grad,
            grad_fn: None,
            tag: Cell::new(None),
        }))
    }

    /// Builds an op output. The backward closure is dropped when no parent
    /// requires a gradient.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape));
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then_some(GradFn { parents, backward });
        Tensor(Rc::new(Node {
            id: fresh_id(),
            shape,
            data,
            requires_grad,
            grad_fn,
            tag: Cell::new(None),
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dims(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        if !self.requires_grad() {
            return self.clone();
        }
        let t = Tensor::new(self.0.data.clone(), &self.0.shape);
        t.0.tag.set(self.0.tag.get());
        t
    }

    /// Attaches a provenance label to this node. Returns `self` for chaining.
    pub fn tagged(self, tag: &'static str) -> Tensor {
        self.0.tag.set(Some(tag));
        self
    }

    pub fn tag(&self) -> Option<&'static str> {
        self.0.tag.get()
    }

    /// Ids of the direct inputs of the op that produced this tensor.
    pub fn parent_ids(&self) -> Vec<u64> {
        self.0
            .grad_fn
            .as_ref()
            .map(|g| g.parents.iter().map(|p| p.id()).collect())
            .unwrap_or_default()
    }

    /// True when `other` is reachable from `self` through recorded ops
    /// (including `self == other`). Only differentiable paths are recorded.
    pub fn depends_on(&self, other: &Tensor) -> bool {
        let target = other.id();
        let mut stack = vec![self.clone()];
        let mut seen = std::collections::HashSet::new();
        while let Some(t) = stack.pop() {
            if t.id() == target {
                return true;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(g) = &t.0.grad_fn {
                stack.extend(g.parents.iter().cloned());
            }
        }
        false
    }

    /// Reverse-mode sweep from a scalar. Seeds the output gradient with 1.
    pub fn backward(&self) -> Grads {
        assert_eq!(self.numel(), 1, "backward() needs a scalar, got {:?}", self.shape());
        self.backward_with(vec![1.0])
    }

    /// Reverse-mode sweep with an explicit output gradient.
    pub fn backward_with(&self, seed: Vec<f64>) -> Grads {
        assert_eq!(seed.len(), self.numel());
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        if !self.requires_grad() {
            return Grads { grads };
        }
        let order = self.topo_order();
        grads.insert(self.id(), seed);
        for node in order.iter().rev() {
            let Some(gf) = &node.0.grad_fn else { continue };
            let Some(g) = grads.remove(&node.id()) else { continue };
            let parent_grads = (gf.backward)(&g);
            debug_assert_eq!(parent_grads.len(), gf.parents.len());
            for (parent, pg) in gf.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.numel());
                match grads.get_mut(&parent.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(parent.id(), pg);
                    }
                }
            }
        }
        Grads { grads }
    }

    fn topo_order(&self) -> Vec<Tensor> {
        // Iterative post-order DFS over nodes that require grad.
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(g) = &t.0.grad_fn {
                for p in &g.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Gradients produced by one backward sweep. Only leaves are retained.
#[derive(Debug, Default)]
pub struct Grads {
    grads: HashMap<u64, Vec<f64>>,
}

impl Grads {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    /// Gradient of `t`, or zeros when `t` did not influence the output.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()])
    }
}
