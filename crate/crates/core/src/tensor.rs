//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared handle to a node in a dynamically built
//! computation graph. Operations record their parents together with a
//! backward closure; [`Tensor::backward`] walks the graph in reverse
//! topological order and accumulates gradients into every node that
//! (transitively) depends on a leaf flagged with [`Tensor::with_grad`].
//!
//! Gradients accumulate additively, so a tensor consumed twice receives the
//! sum of both contributions. Graphs are rebuilt per training step; nothing
//! here is retained across steps except parameter leaves.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Backward closure: receives the upstream gradient of the node's output and
/// accumulates into the node's parents.
pub(crate) type BackwardFn<S> = Box<dyn Fn(&[S])>;

pub(crate) struct Node<S: Scalar> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<S>,
    pub(crate) grad: Option<Vec<S>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: &'static str,
    pub(crate) parents: Vec<Tensor<S>>,
    pub(crate) backward_fn: Option<BackwardFn<S>>,
}

/// Shared handle to a graph node. Cloning is cheap and aliases the same
/// storage; use [`Tensor::detach`] for an independent copy.
pub struct Tensor<S: Scalar> {
    pub(crate) inner: Rc<RefCell<Node<S>>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> Tensor<S> {
    fn from_node(node: Node<S>) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(node)),
        }
    }

    fn new_leaf(shape: Vec<usize>, data: Vec<S>) -> Self {
        Tensor::from_node(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            grad: None,
            requires_grad: false,
            op: "leaf",
            parents: Vec::new(),
            backward_fn: None,
        })
    }

    /// Leaf tensor from explicit shape and row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Dimension {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor::new_leaf(shape.to_vec(), data))
    }

    /// Zero-filled leaf.
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new_leaf(shape.to_vec(), vec![S::zero(); n])
    }

    /// Constant-filled leaf.
    pub fn full(shape: &[usize], value: S) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new_leaf(shape.to_vec(), vec![value; n])
    }

    /// Rank-1 single-element leaf.
    pub fn scalar(value: S) -> Self {
        Tensor::new_leaf(vec![1], vec![value])
    }

    /// Flag this leaf as differentiable. Must be called before the tensor is
    /// consumed by an op; ops snapshot the flag at construction time.
    pub fn with_grad(self) -> Self {
        self.inner.borrow_mut().requires_grad = true;
        self
    }

    /// Construct an op output node. `requires_grad` propagates from parents;
    /// the backward closure is dropped when no parent is differentiable.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        op: &'static str,
        backward_fn: BackwardFn<S>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.inner.borrow().requires_grad);
        Tensor::from_node(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            grad: None,
            requires_grad,
            op,
            parents,
            backward_fn: if requires_grad {
                Some(backward_fn)
            } else {
                None
            },
        })
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Copy of the forward values.
    pub fn data_vec(&self) -> Vec<S> {
        self.inner.borrow().data.clone()
    }

    /// Zero-copy read access to the forward values.
    pub fn with_data<R>(&self, f: impl FnOnce(&[S]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        let node = self.inner.borrow();
        if node.data.len() != 1 {
            return Err(Error::contract(
                "item",
                format!("expected 1 element, found {:?}", node.shape),
            ));
        }
        Ok(node.data[0])
    }

    /// Copy of the accumulated gradient, if any has been accumulated.
    pub fn grad_vec(&self) -> Option<Vec<S>> {
        self.inner.borrow().grad.clone()
    }

    /// Drop any accumulated gradient.
    pub fn clear_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// In-place update of the forward values (used by the optimizer).
    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [S])) {
        f(&mut self.inner.borrow_mut().data);
    }

    /// Overwrite the forward values, e.g. to load pretrained weights.
    /// Length must match; shape is unchanged.
    pub fn set_data(&self, values: &[S]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Dimension {
                op: "set_data",
                lhs: vec![self.len()],
                rhs: vec![values.len()],
            });
        }
        self.update_data(|d| d.copy_from_slice(values));
        Ok(())
    }

    /// Gradient accumulation; allocates a zero buffer on first use. No-op on
    /// non-differentiable nodes.
    pub(crate) fn accumulate_grad(&self, g: &[S]) {
        let mut node = self.inner.borrow_mut();
        if !node.requires_grad {
            return;
        }
        let len = node.data.len();
        debug_assert_eq!(g.len(), len);
        let grad = node.grad.get_or_insert_with(|| vec![S::zero(); len]);
        for (gi, &v) in grad.iter_mut().zip(g.iter()) {
            *gi += v;
        }
    }

    /// Independent constant leaf with copied values. The result does not
    /// participate in any existing graph.
    pub fn detach(&self) -> Tensor<S> {
        let node = self.inner.borrow();
        Tensor::new_leaf(node.shape.clone(), node.data.clone())
    }

    fn ptr(&self) -> *const () {
        Rc::as_ptr(&self.inner) as *const ()
    }

    /// Reverse topological order (inputs first, `self` last).
    fn topo_order(&self) -> Vec<Tensor<S>> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const ()> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr());
        while let Some((t, i)) = stack.pop() {
            let next_parent = {
                let node = t.inner.borrow();
                node.parents.get(i).cloned()
            };
            match next_parent {
                Some(p) => {
                    stack.push((t, i + 1));
                    if visited.insert(p.ptr()) {
                        stack.push((p, 0));
                    }
                }
                None => order.push(t),
            }
        }
        order
    }

    /// Reverse-mode sweep from a single-element tensor. Seeds the output
    /// gradient with 1 and accumulates into every differentiable ancestor.
    ///
    /// Calling this twice without clearing gradients accumulates twice.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("root must be a single element, found {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            // Constant graph: nothing depends on a differentiable leaf.
            return Ok(());
        }
        let order = self.topo_order();
        // Interior (op) gradients are scratch space for this sweep; only
        // leaves retain gradients across calls, so repeated backward calls
        // accumulate exactly one contribution per call into each leaf.
        for t in &order {
            let is_op = !t.inner.borrow().parents.is_empty();
            if is_op {
                t.clear_grad();
            }
        }
        self.accumulate_grad(&[S::one()]);
        for t in order.iter().rev() {
            let node = t.inner.borrow();
            if !node.requires_grad {
                continue;
            }
            let (Some(bf), Some(grad)) = (&node.backward_fn, node.grad.clone()) else {
                continue;
            };
            bf(&grad);
        }
        Ok(())
    }

    /// Structural view of the graph below this tensor, inputs first.
    pub fn graph(&self) -> Graph {
        let order = self.topo_order();
        let nodes = order
            .iter()
            .map(|t| {
                let node = t.inner.borrow();
                GraphNode {
                    id: node.id,
                    op: node.op,
                    shape: node.shape.clone(),
                    parents: node.parents.iter().map(|p| p.id()).collect(),
                    requires_grad: node.requires_grad,
                }
            })
            .collect();
        Graph { nodes }
    }
}

/// One node in a [`Graph`] snapshot.
#[derive(Debug, Clone)]
pub struct GraphNode {
    pub id: u64,
    pub op: &'static str,
    pub shape: Vec<usize>,
    pub parents: Vec<u64>,
    pub requires_grad: bool,
}

/// Immutable structural snapshot of a computation graph, in topological
/// order (inputs before consumers). Useful for debugging and for asserting
/// graph shapes in tests.
#[derive(Debug, Clone)]
pub struct Graph {
    pub nodes: Vec<GraphNode>,
}

impl Graph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Count of nodes carrying a given op name.
    pub fn count_op(&self, op: &str) -> usize {
        self.nodes.iter().filter(|n| n.op == op).count()
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let node = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("id", &node.id)
            .field("op", &node.op)
            .field("shape", &node.shape)
            .field("requires_grad", &node.requires_grad)
            .finish()
    }
}
