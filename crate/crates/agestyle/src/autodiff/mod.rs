//! Reverse-mode automatic differentiation on dynamically shaped `ndarray`
//! tensors.
//!
//! The design is a classic tape: every operation appends a node holding its
//! value and a closure that, given the adjoint of the output, emits adjoints
//! for the inputs. The twist that the rest of the crate relies on is that
//! those closures build their results *with tape operations*, so the nodes
//! produced by [`Tape::grad`] are themselves differentiable. Calling `grad`
//! on an expression that contains earlier gradients yields second-order
//! derivatives, which is exactly what the R1 gradient penalty needs when the
//! discriminator is updated.
//!
//! Tensors are owned by the tape; user code passes around lightweight
//! [`Var`] handles. A tape lives for one forward/backward episode (one
//! training half-step, one evaluation) and is dropped afterwards.

mod conv;
pub mod numgrad;
mod ops;

pub use conv::{conv2d_dinput, conv2d_dkernel, conv2d_fwd};

use std::cell::RefCell;
use std::fmt;
use std::iter::Sum;

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssignOps};

/// Element type the tape can differentiate. Training uses `f32`; gradient
/// checks use `f64`.
pub trait Scalar:
    Float
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + Sum<Self>
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}
impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type VjpFn<T> = Box<dyn Fn(&Tape<T>, Var, &[Var], Var) -> Vec<Option<Var>>>;

struct Node<T> {
    value: ArrayD<T>,
    parents: Vec<Var>,
    requires_grad: bool,
    // None for leaves and for ops that are treated as constants of their
    // inputs (sign masks and the like).
    vjp: Option<VjpFn<T>>,
}

/// A recording of a computation. All operations live in [`ops`].
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a tensor that gradients should flow into (a parameter, or an
    /// input we want input-gradients for, as in R1).
    pub fn param(&self, value: ArrayD<T>) -> Var {
        self.push(value, vec![], true, None)
    }

    /// Insert a tensor treated as constant data.
    pub fn constant(&self, value: ArrayD<T>) -> Var {
        self.push(value, vec![], false, None)
    }

    pub fn scalar(&self, x: T) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Clone the value out of the tape.
    pub fn value(&self, v: Var) -> ArrayD<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Read a 0-d (or single-element) tensor as a scalar.
    pub fn scalar_value(&self, v: Var) -> T {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar_value on tensor of len {}", val.len());
        *val.iter().next().unwrap()
    }

    pub(crate) fn with_value<R>(&self, v: Var, f: impl FnOnce(&ArrayD<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub(crate) fn with_values2<R>(
        &self,
        a: Var,
        b: Var,
        f: impl FnOnce(&ArrayD<T>, &ArrayD<T>) -> R,
    ) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<T>,
        parents: Vec<Var>,
        requires_grad: bool,
        vjp: Option<VjpFn<T>>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            requires_grad,
            vjp,
        });
        Var(nodes.len() - 1)
    }

    pub(crate) fn push_op(&self, value: ArrayD<T>, parents: Vec<Var>, vjp: VjpFn<T>) -> Var {
        let requires = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        self.push(
            value,
            parents,
            requires,
            if requires { Some(vjp) } else { None },
        )
    }

    /// Reverse-mode gradient of a scalar `loss` with respect to `wrt`.
    ///
    /// Returns one entry per requested variable; `None` means the loss does
    /// not depend on it (the gradient is identically zero). The returned
    /// variables are ordinary tape nodes, so they can be combined into new
    /// losses and differentiated again.
    pub fn grad(&self, loss: Var, wrt: &[Var]) -> Vec<Option<Var>> {
        assert_eq!(
            self.with_value(loss, |v| v.len()),
            1,
            "grad expects a scalar loss"
        );
        let upper = loss.0 + 1;
        let mut adjoint: Vec<Option<Var>> = vec![None; upper];
        let seed_shape = self.shape(loss);
        adjoint[loss.0] = Some(self.constant(ArrayD::from_elem(IxDyn(&seed_shape), T::one())));

        for id in (0..upper).rev() {
            let Some(grad_out) = adjoint[id] else {
                continue;
            };
            let (parents, has_vjp, requires) = {
                let nodes = self.nodes.borrow();
                let n = &nodes[id];
                (n.parents.clone(), n.vjp.is_some(), n.requires_grad)
            };
            if !requires || !has_vjp {
                continue;
            }
            let contributions = {
                // The vjp closure may push nodes, so it must not hold the
                // borrow; take it out of the node temporarily.
                let vjp = self.nodes.borrow_mut()[id].vjp.take().expect("vjp");
                let out = vjp(self, grad_out, &parents, Var(id));
                self.nodes.borrow_mut()[id].vjp = Some(vjp);
                out
            };
            assert_eq!(contributions.len(), parents.len());
            for (parent, contrib) in parents.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                if !self.requires_grad(*parent) {
                    continue;
                }
                debug_assert_eq!(self.shape(c), self.shape(*parent));
                adjoint[parent.0] = Some(match adjoint[parent.0] {
                    Some(existing) => self.add(existing, c),
                    None => c,
                });
            }
        }

        wrt.iter()
            .map(|v| if v.0 < upper { adjoint[v.0] } else { None })
            .collect()
    }

    /// Like [`Tape::grad`] but materializes zero arrays for unreached inputs.
    pub fn grad_arrays(&self, loss: Var, wrt: &[Var]) -> Vec<ArrayD<T>> {
        self.grad(loss, wrt)
            .iter()
            .zip(wrt)
            .map(|(g, v)| match g {
                Some(g) => self.value(*g),
                None => ArrayD::zeros(IxDyn(&self.shape(*v))),
            })
            .collect()
    }
}
