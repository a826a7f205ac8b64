//! Define-by-run reverse-mode differentiation.
//!
//! Every op records its output value, its parent nodes and (when any parent
//! needs a gradient) a backward closure. The tape is rebuilt for each
//! forward pass, so graphs whose shape depends on the input (the unrolled
//! test-time-training loop) need no special handling.

mod gradcheck;
mod ops;

use std::cell::{Cell, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use gradcheck::{grad_check, rel_err, GradCheckReport, ParamCheck};
pub use ops::concat;

/// Forward mode. Forward values never depend on it; `Infer` only skips
/// recording backward rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Infer,
}

/// Backward rule: receives the output gradient and which parents need a
/// gradient, returns one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    op: &'static str,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    label: Option<String>,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    mode: Mode,
    strict: Cell<bool>,
    digest: Cell<u64>,
    nonfinite: Cell<Option<&'static str>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new(Mode::Train)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            mode,
            strict: Cell::new(false),
            digest: Cell::new(0xcbf2_9ce4_8422_2325),
            nonfinite: Cell::new(None),
        }
    }

    pub fn inference() -> Self {
        Self::new(Mode::Infer)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// In strict mode `backward` fails if a parameter leaf receives no gradient.
    pub fn set_strict(&self, strict: bool) {
        self.strict.set(strict);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool, label: Option<String>) -> Var<'_, T> {
        self.check_finite("leaf", &value);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: "leaf",
            value,
            requires_grad: requires_grad && self.mode == Mode::Train,
            parents: Vec::new(),
            backward: None,
            label,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true, None)
    }

    pub fn param_named(&self, name: &str, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true, Some(name.to_string()))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false, None)
    }

    pub(crate) fn push(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        self.check_finite(op, &value);
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.mode == Mode::Train && parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            op,
            value,
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
            label: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn check_finite(&self, op: &'static str, value: &Tensor<T>) {
        if cfg!(debug_assertions) && self.nonfinite.get().is_none() && !value.is_finite() {
            self.nonfinite.set(Some(op));
        }
    }

    /// First op that produced a NaN/Inf (debug builds only).
    pub fn first_nonfinite(&self) -> Option<&'static str> {
        self.nonfinite.get()
    }

    /// Folds a discrete decision (argmax index, pooling winner, kink side)
    /// into the tape digest. Gradient checking compares digests to detect
    /// perturbations that flip a discrete choice.
    pub fn record_choice(&self, v: u64) {
        let d = (self.digest.get() ^ v).wrapping_mul(0x0000_0100_0000_01b3);
        self.digest.set(d);
    }

    pub fn choice_digest(&self) -> u64 {
        self.digest.get()
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    /// Reverse sweep from a rank-0 `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.rank() != 0 {
            return Err(Error::NotScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape of op {}", node.op);
                grads[p] = Some(match grads[p].take() {
                    None => pg,
                    Some(mut acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                        acc
                    }
                });
            }
        }
        if self.strict.get() {
            for (id, node) in nodes.iter().enumerate() {
                if node.op == "leaf" && node.requires_grad && grads[id].is_none() {
                    let name = node.label.clone().unwrap_or_else(|| format!("leaf#{id}"));
                    return Err(Error::DisconnectedTape(name));
                }
            }
        }
        Ok(Grads { grads })
    }
}

/// Gradients from one backward sweep, indexed by node.
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero when `v` does not reach the loss.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}
