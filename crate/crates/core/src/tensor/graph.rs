//! The recording tape and the reverse sweep.

use super::Tensor;
use crate::error::{Error, Result};
use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

pub type NodeId = usize;

/// Backward closure: receives the output gradient and returns one optional
/// gradient contribution per parent, in parent order.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct Node {
    pub parents: Vec<NodeId>,
    pub backward: Option<BackwardFn>,
    pub len: usize,
}

static GRAPH_UID: AtomicU64 = AtomicU64::new(1);

/// A differentiation tape. Nodes are appended in execution order, which is
/// by construction a topological order, so the backward sweep is a single
/// reverse pass. Recording is single-writer; evaluation of disjoint graphs
/// may proceed on different threads.
pub struct Graph {
    uid: u64,
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph for training or gradient checks.
    pub fn new() -> Self {
        Graph {
            uid: GRAPH_UID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A non-recording graph: operations compute values only. Used for
    /// inference and metric evaluation.
    pub fn inference() -> Self {
        Graph {
            uid: GRAPH_UID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Register a leaf (parameter or differentiable input). Returns a copy
    /// of the tensor attached to this graph.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        if !self.recording {
            return t.detach();
        }
        let id = self.push_node(Vec::new(), None, t.len());
        t.detach().with_node(self.uid, id)
    }

    pub(crate) fn push_node(
        &self,
        parents: Vec<NodeId>,
        backward: Option<BackwardFn>,
        len: usize,
    ) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents,
            backward,
            len,
        });
        nodes.len() - 1
    }

    /// Node ids of the inputs that participate in this graph. Errors if a
    /// tensor carries a node id from a different graph.
    pub(crate) fn parent_ids(&self, inputs: &[&Tensor]) -> Result<Vec<Option<NodeId>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for t in inputs {
            match t.graph_node() {
                Some((uid, id)) if uid == self.uid => out.push(Some(id)),
                Some(_) => {
                    return Err(Error::contract(
                        "tensor belongs to a different graph; detach or re-register it",
                    ))
                }
                None => out.push(None),
            }
        }
        Ok(out)
    }

    /// True when recording and at least one input is attached to this graph.
    pub(crate) fn tracks(&self, parents: &[Option<NodeId>]) -> bool {
        self.recording && parents.iter().any(|p| p.is_some())
    }

    /// Record an operation node. `parents` holds the per-input node ids
    /// (None for constants); the backward closure must return contributions
    /// in the same order, with None in constant positions.
    pub(crate) fn record(
        &self,
        out: Tensor,
        parents: Vec<Option<NodeId>>,
        backward: BackwardFn,
    ) -> Tensor {
        if !self.tracks(&parents) {
            return out;
        }
        let present: Vec<NodeId> = parents.iter().flatten().copied().collect();
        let mask: Vec<bool> = parents.iter().map(|p| p.is_some()).collect();
        let len = out.len();
        let wrapped: BackwardFn = Box::new(move |g| {
            let full = backward(g);
            debug_assert_eq!(full.len(), mask.len());
            full.into_iter()
                .zip(&mask)
                .filter(|(_, m)| **m)
                .map(|(c, _)| c)
                .collect()
        });
        let id = self.push_node(present, Some(wrapped), len);
        out.with_node(self.uid, id)
    }

    /// Reverse-topological gradient accumulation from a scalar loss.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.len() != 1 {
            return Err(Error::contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let (uid, loss_id) = loss.graph_node().ok_or_else(|| {
            Error::contract("loss tensor is not attached to a graph; nothing to differentiate")
        })?;
        if uid != self.uid {
            return Err(Error::contract("loss belongs to a different graph"));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss_id] = Some(vec![1.0]);
        for id in (0..=loss_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let contribs = bw(&g);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (pid, c) in node.parents.iter().zip(contribs) {
                    if let Some(c) = c {
                        debug_assert_eq!(c.len(), nodes[*pid].len);
                        match &mut grads[*pid] {
                            Some(acc) => {
                                for (a, v) in acc.iter_mut().zip(&c) {
                                    *a += v;
                                }
                            }
                            slot @ None => *slot = Some(c),
                        }
                    }
                }
                // interior gradients are not retained
            } else {
                grads[id] = Some(g); // leaf: keep
            }
        }
        Ok(Gradients {
            graph_uid: self.uid,
            buffers: grads,
        })
    }
}

/// Gradient buffers produced by [`Graph::backward`], queryable per leaf.
pub struct Gradients {
    graph_uid: u64,
    buffers: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `t`, as a tensor of the same shape.
    /// Leaves the loss never touched get an all-zero gradient.
    pub fn wrt(&self, t: &Tensor) -> Result<Tensor> {
        let (uid, id) = t
            .graph_node()
            .ok_or_else(|| Error::contract("tensor is not registered on the graph"))?;
        if uid != self.graph_uid {
            return Err(Error::contract("tensor belongs to a different graph"));
        }
        match &self.buffers[id] {
            Some(buf) => Ok(Tensor::from_vec(t.shape().to_vec(), buf.clone())),
            None => Ok(Tensor::zeros(t.shape())),
        }
    }
}
