use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::ops::Op;

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op>,
    pub(crate) grad: RefCell<Option<Vec<f64>>>,
}

/// A node in a reverse-mode differentiation graph.
///
/// Values are immutable once created. Leaves created with
/// [`Tensor::param`] collect gradients when [`Tensor::backward`] runs on a
/// scalar that depends on them; intermediate results only carry the
/// operation and parent links needed to get there.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Node>);

/// Outcome of a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardReport {
    /// The loss had no differentiable ancestors; no gradient was written.
    pub detached: bool,
    pub nodes_visited: usize,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, op: Option<Op>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = op.is_some();
        Tensor(Rc::new(Node {
            id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            op,
            grad: RefCell::new(None),
        }))
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor(Rc::new(Node {
            id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            op: None,
            grad: RefCell::new(None),
        })))
    }

    /// Constant tensor; gradients never flow into it.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape.to_vec(), data, false)
    }

    /// Trainable leaf that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape.to_vec(), data, true)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::leaf(Vec::new(), vec![value], false).expect("rank-0 shape holds one value")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Self::leaf(shape.to_vec(), vec![value; numel(shape)], false).expect("length matches")
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Name of the operation that produced this tensor, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(Op::name)
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, no graph linkage.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.shape(), self.to_vec()).expect("same shape")
    }

    /// Propagates d(self)/d(leaf) into every trainable leaf reachable from
    /// `self`. Gradients accumulate across calls until [`Tensor::zero_grad`].
    ///
    /// Nodes are processed in decreasing creation order, which is a valid
    /// topological order because every parent is created before its child.
    pub fn backward(&self) -> Result<BackwardReport> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        if !self.requires_grad() {
            return Ok(BackwardReport {
                detached: true,
                nodes_visited: 0,
            });
        }

        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut order = Vec::new();
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = &t.0.op {
                for p in op.parents() {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_by_key(|t| Reverse(t.id()));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        let mut reached_leaf = false;
        for node in &order {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.op {
                None => {
                    reached_leaf = true;
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    for (parent, pg) in op.backward(node, &g) {
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(BackwardReport {
            detached: !reached_leaf,
            nodes_visited: order.len(),
        })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.values().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("id", &self.id())
            .field("shape", &self.shape())
            .field("op", &self.op_name())
            .field("requires_grad", &self.requires_grad())
            .field("values", &preview)
            .finish()
    }
}
