//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node of a computation
//! graph. Operations on tensors that require gradients record a backward
//! rule together with references to their inputs; [`Tensor::backward`]
//! walks the graph in reverse creation order and accumulates gradients into
//! the leaves.
//!
//! Node ids grow monotonically, so every node is created after all of its
//! inputs. Sorting the reachable nodes by decreasing id therefore yields a
//! valid reverse topological order without an explicit graph traversal.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

mod conv;
mod elementwise;
mod norm;
mod reduce;
mod resize;
mod scalar;

pub use conv::conv2d_output_extent;
pub use reduce::PoolKind;
pub use scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward rules.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward rule of one recorded operation.
///
/// `backward` receives the op inputs, the forward output values and the
/// upstream gradient, and returns one entry per input. Entries for inputs
/// that do not require gradients may be `None`.
pub(crate) trait BackwardOp<T: Scalar> {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[Tensor<T>], output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>>;
}

struct GradFn<T: Scalar> {
    inputs: Vec<Tensor<T>>,
    op: Box<dyn BackwardOp<T>>,
}

struct Node<T: Scalar> {
    id: u64,
    data: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
    grad: RefCell<Option<Vec<T>>>,
}

/// N-dimensional row-major array participating in reverse-mode autodiff.
///
/// Cloning is cheap (reference count bump). The canonical image layout is
/// `batch × channel × height × width`.
pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad);
        if let Some(g) = &self.0.grad_fn {
            d.field("op", &g.op.name());
        }
        if self.0.data.len() <= 16 {
            d.field("data", &self.0.data);
        }
        d.finish()
    }
}

fn check_shape(len: usize, shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(format!(
            "shape {shape:?} holds {n} elements but data has {len}"
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn make(
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        grad_fn: Option<GradFn<T>>,
    ) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data,
            shape,
            requires_grad,
            grad_fn,
            grad: RefCell::new(None),
        }))
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(data.len(), shape)?;
        Ok(Self::make(data, shape.to_vec(), false, None))
    }

    /// Leaf tensor that accumulates a gradient during [`Tensor::backward`].
    pub fn leaf(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(data.len(), shape)?;
        Ok(Self::make(data, shape.to_vec(), true, None))
    }

    pub fn from_f64(values: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(values.iter().map(|&v| T::of(v)).collect(), shape)
    }

    pub fn full(value: T, shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(vec![value; n], shape)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(T::zero(), shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::make(vec![value], vec![1], false, None)
    }

    /// Tensor of independent `N(0, std²)` draws.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Result<Self> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self::new(data, shape)
    }

    /// Records the result of an operation. The backward rule is kept only if
    /// gradient recording is on and some input requires a gradient.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        inputs: Vec<Tensor<T>>,
        op: impl BackwardOp<T> + 'static,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            let grad_fn = GradFn {
                inputs,
                op: Box::new(op),
            };
            Self::make(data, shape, true, Some(grad_fn))
        } else {
            Self::make(data, shape, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.f64()).collect()
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

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Gradient stored by the most recent backward pass (leaves only).
    pub fn grad(&self) -> Option<Ref<'_, Vec<T>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn clear_grad(&self) {
        self.0.grad.replace(None);
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::make(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [b, c, h, w] => Ok((b, c, h, w)),
            ref s => Err(Error::shape(format!("expected a 4-D tensor, got {s:?}"))),
        }
    }

    /// Name of the op that produced this tensor, if recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.op.name())
    }

    /// Reverse-mode sweep from a scalar.
    ///
    /// Every reachable leaf with `requires_grad` receives `∂self/∂leaf`,
    /// summed over all paths. Intermediate gradients are discarded.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.is_finite() {
            return Err(Error::Numerical(format!(
                "backward from non-finite value {}",
                self.item()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Autodiff(
                "loss does not depend on any tensor that requires a gradient".into(),
            ));
        }

        let mut reachable: HashMap<u64, Tensor<T>> = HashMap::new();
        let mut stack = vec![self.clone()];
        reachable.insert(self.id(), self.clone());
        while let Some(t) = stack.pop() {
            if let Some(gf) = &t.0.grad_fn {
                for input in &gf.inputs {
                    if !input.requires_grad() {
                        continue;
                    }
                    if input.id() >= t.id() {
                        return Err(Error::Autodiff(format!(
                            "cycle: node {} consumes later node {}",
                            t.id(),
                            input.id()
                        )));
                    }
                    if !reachable.contains_key(&input.id()) {
                        reachable.insert(input.id(), input.clone());
                        stack.push(input.clone());
                    }
                }
            }
        }
        let mut order: Vec<Tensor<T>> = reachable.into_values().collect();
        order.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        let mut leaves = HashMap::new();

        for node in order {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                Some(gf) => {
                    let input_grads = gf.op.backward(&gf.inputs, node.data(), &grad);
                    debug_assert_eq!(input_grads.len(), gf.inputs.len(), "{}", gf.op.name());
                    for (input, g) in gf.inputs.iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), input.numel(), "{}", gf.op.name());
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                            None => {
                                pending.insert(input.id(), g);
                            }
                        }
                    }
                }
                None => {
                    node.0.grad.replace(Some(grad.clone()));
                    leaves.insert(node.id(), grad);
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    leaves: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.leaves.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
