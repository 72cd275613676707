//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Everything learned in this crate is expressed through the operations on
//! [`Graph`]: a tape that records each forward operation together with a
//! backward closure. Tensors are immutable after creation; every operation
//! returns a fresh tensor, so there is no aliasing to reason about during
//! the backward sweep.
//!
//! Storage is row-major contiguous, 64-bit floats throughout.

mod fdcheck;
mod graph;
mod io;
mod ops_conv;
mod ops_elementwise;
mod ops_linalg;
mod ops_nn;
mod ops_shape;
mod shape;

pub use fdcheck::{finite_diff_check, finite_diff_check_h, finite_diff_check_norm, rel_error_inf};
pub use graph::{Gradients, Graph, NodeId};
pub use io::{read_tensor, write_tensor};
pub use ops_nn::Mode;
pub use shape::{broadcast_shape, strides};

use crate::error::Error;
use std::sync::Arc;

/// Dense n-dimensional array of `f64` in row-major order.
///
/// `node` is set when the tensor is a recorded result (or registered leaf)
/// of a [`Graph`]; detached tensors are plain values.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    node: Option<(u64, NodeId)>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "shape {:?} implies {} elements, got {}",
            shape,
            n,
            data.len()
        );
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), vec![0.0; n])
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), vec![1.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(vec![], vec![value])
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(rng: &mut impl rand::Rng, shape: &[usize], std: f64) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::from_vec(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node.map(|(_, id)| id)
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    /// Element by multi-dimensional index.
    pub fn at(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.rank());
        let st = strides(&self.shape);
        let flat: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    /// Detached copy: same data, no graph membership.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            node: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn with_node(mut self, graph_uid: u64, id: NodeId) -> Tensor {
        self.node = Some((graph_uid, id));
        self.requires_grad = true;
        self
    }

    pub(crate) fn graph_node(&self) -> Option<(u64, NodeId)> {
        self.node
    }
}

/// Max absolute difference between two tensors of identical shape.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub(crate) fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}
