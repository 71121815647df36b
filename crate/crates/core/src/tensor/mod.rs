//! Dense f32 tensors with reverse-mode differentiation.
//!
//! Tensors are immutable and cheap to clone. Every op that has at least one
//! input requiring gradients records a node holding its inputs and a
//! backward closure; [`backward`] walks that graph in reverse topological
//! order.

mod autograd;
pub mod checkpoint;
mod gemm;
pub mod ops;
pub mod optim;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

pub use autograd::{backward, Gradients};
pub(crate) use gemm::sgemm;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` without recording differentiation nodes.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

pub(crate) type BackwardFn = Box<dyn Fn(&[f32]) -> Vec<Option<Vec<f32>>> + Send + Sync>;

pub(crate) struct Node {
    pub(crate) op: &'static str,
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.node.as_ref().map(|n| n.op))
            .finish()
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, node: Option<Node>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            node,
        }))
    }

    /// A constant (non-differentiable) tensor.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        Self::checked(shape, data, false)
    }

    /// A leaf that gradients are computed for.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        Self::checked(shape, data, true)
    }

    fn checked(shape: &[usize], data: Vec<f32>, requires_grad: bool) -> Result<Tensor> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "new" });
        }
        Ok(Self::build(shape.to_vec(), data, requires_grad, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::build(shape.to_vec(), vec![0.0; shape.iter().product()], false, None)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        Self::build(shape.to_vec(), vec![value; shape.iter().product()], false, None)
    }

    pub fn scalar(value: f32) -> Tensor {
        Self::build(vec![1], vec![value], false, None)
    }

    pub fn randn(shape: &[usize], std: f32, rng: &mut crate::rng::RngStream) -> Tensor {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), rng.normal_vec(n, 0.0, std), false, None)
    }

    /// Output of an op; records a node when gradients are enabled and any
    /// input requires them.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        inputs: Vec<Tensor>,
        backward: impl Fn(&[f32]) -> Vec<Option<Vec<f32>>> + Send + Sync + 'static,
    ) -> Result<Tensor> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let track = grad_enabled() && inputs.iter().any(Tensor::requires_grad);
        let node = track.then(|| Node { op, inputs, backward: Box::new(backward) });
        Ok(Self::build(shape, data, track, node))
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

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.0.node.as_ref()
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Same values as a fresh differentiable leaf.
    pub fn as_param(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), true, None)
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        self.0.data[0]
    }

    /// SHA-256 over shape and little-endian payload.
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for &e in self.shape() {
            h.update((e as u64).to_le_bytes());
        }
        for v in self.data() {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

pub(crate) fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::ShapeMismatch { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
}
