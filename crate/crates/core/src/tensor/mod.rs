//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node. Operations that
//! consume tensors requiring gradients record a backward rule together with
//! their inputs, so the graph is the set of nodes reachable from a result.
//! [`Tensor::backward`] walks that graph in reverse creation order (node ids
//! are monotonically increasing, which is a valid reverse topological order)
//! and accumulates gradients into leaf tensors.
//!
//! Broadcasting is limited to one rule: a `[B, C, 1, 1]` operand broadcasts
//! over the spatial extents of a `[B, C, H, W]` operand in [`Tensor::add`]
//! and [`Tensor::mul`].

mod conv;
mod gradcheck;
mod linalg;
mod ops;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};

pub use conv::Conv2dOptions;
pub use gradcheck::{grad_check, rel_err, GradCheckReport, GRAD_CHECK_FLOOR, GRAD_CHECK_MAX_ELEMENTS};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRADIENT_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Enables a deliberately wrong gradient rule (for `sigmoid`) on the current
/// thread. Used to verify that the gradient checker detects broken rules.
pub fn set_gradient_fault(enabled: bool) {
    GRADIENT_FAULT.with(|f| f.set(enabled));
}

pub(crate) fn gradient_fault() -> bool {
    GRADIENT_FAULT.with(|f| f.get())
}

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct GradFn {
    op: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
    /// Accumulated gradient; only leaves that require gradients carry one.
    grad: Option<Mutex<Vec<f64>>>,
}

/// A dense n-dimensional array of `f64` values.
#[derive(Clone)]
pub struct Tensor {
    node: Arc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("op", &self.node.grad_fn.as_ref().map(|g| g.op))
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_parts(
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        requires_grad: bool,
        grad_fn: Option<GradFn>,
    ) -> Self {
        let grad = (requires_grad && grad_fn.is_none()).then(|| Mutex::new(vec![0.0; data.len()]));
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad_fn,
                grad,
            }),
        }
    }

    /// Creates a constant tensor. Rejects length mismatches and non-finite values.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel(shape),
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "tensor construction".into(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), Arc::new(data), false, None))
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(&[], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        Self::from_parts(shape.to_vec(), Arc::new(vec![value; numel(shape)]), false, None)
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::from_parts(shape.to_vec(), Arc::new(data), false, None)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..numel(shape)).map(|_| rng.random_range(lo..hi)).collect();
        Self::from_parts(shape.to_vec(), Arc::new(data), false, None)
    }

    /// Returns a fresh leaf sharing this tensor's values that accumulates
    /// gradients during [`Tensor::backward`].
    pub fn requires_grad(&self) -> Self {
        Self::from_parts(self.node.shape.clone(), self.node.data.clone(), true, None)
    }

    /// Returns a constant leaf sharing this tensor's values.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.node.shape.clone(), self.node.data.clone(), false, None)
    }

    /// Records an operation result. The backward closure receives the output
    /// gradient and returns one optional gradient per input.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        inputs: Vec<Tensor>,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "{op}: output length");
        if inputs.iter().any(|t| t.node.requires_grad) {
            let grad_fn = GradFn {
                op,
                inputs,
                backward: Box::new(backward),
            };
            Self::from_parts(shape, data, true, Some(grad_fn))
        } else {
            Self::from_parts(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        self.node.data.clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.as_ref().clone()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// The accumulated gradient of a leaf that requires gradients.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node
            .grad
            .as_ref()
            .map(|g| g.lock().expect("gradient lock poisoned").clone())
    }

    pub fn zero_grad(&self) {
        if let Some(g) = &self.node.grad {
            g.lock().expect("gradient lock poisoned").fill(0.0);
        }
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> Result<f64> {
        match self.node.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            ))),
        }
    }

    /// Destructures a rank-4 shape.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [b, c, h, w] => Ok((b, c, h, w)),
            ref s => Err(shape_err!("expected a rank-4 tensor, got shape {:?}", s)),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape() {
            [a, b, c] => Ok((a, b, c)),
            ref s => Err(shape_err!("expected a rank-3 tensor, got shape {:?}", s)),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(shape_err!(
                "max_abs_diff: {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Back-propagates from a scalar loss, accumulating (summing) gradients
    /// into every reachable leaf that requires them.
    pub fn backward(&self) -> Result<()> {
        if !self.shape().is_empty() {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.all_finite() {
            return Err(Error::NonFinite {
                context: "loss passed to backward".into(),
            });
        }
        if !self.node.requires_grad {
            return Ok(());
        }

        // Collect every tracked node reachable from the loss.
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.node.id) {
                continue;
            }
            if let Some(gf) = &t.node.grad_fn {
                stack.extend(gf.inputs.iter().filter(|i| i.node.requires_grad).cloned());
            }
            nodes.push(t);
        }
        nodes.sort_unstable_by_key(|n| std::cmp::Reverse(n.node.id));

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.node.id, vec![1.0]);
        for t in &nodes {
            let Some(g) = grads.remove(&t.node.id) else {
                continue;
            };
            match &t.node.grad_fn {
                None => {
                    if let Some(slot) = &t.node.grad {
                        let mut acc = slot.lock().expect("gradient lock poisoned");
                        acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d);
                    }
                }
                Some(gf) => {
                    let input_grads = (gf.backward)(&g);
                    debug_assert_eq!(input_grads.len(), gf.inputs.len(), "{}", gf.op);
                    for (input, ig) in gf.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.node.requires_grad {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.numel(), "{} gradient length", gf.op);
                        match grads.get_mut(&input.node.id) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, d)| *a += d),
                            None => {
                                grads.insert(input.node.id, ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
