//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every value produced during a forward pass is kept on the tape together
//! with its parents and a vector-Jacobian product. `backward` walks the
//! record in reverse and accumulates gradients into the `ParamSet` whose
//! parameters were bound with [`Tape::param`].

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::autodiff::param::{Param, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inputs handed to a vector-Jacobian product during the reverse sweep.
pub struct VjpArgs<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor,
    /// Forward values of the parents, in the order they were recorded.
    pub inputs: &'a [Rc<Tensor>],
    /// Forward value of this node.
    pub output: &'a Tensor,
    /// Whether each parent needs a gradient at all.
    pub needs: &'a [bool],
}

pub(crate) type Vjp = Box<dyn Fn(&VjpArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    vjp: Option<Vjp>,
    binding: Option<String>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    signature: Cell<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("len", &self.len())
            .field("recording", &self.recording)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            signature: Cell::new(0xcbf2_9ce4_8422_2325),
        }
    }

    /// A tape that evaluates values only; nothing on it requires a gradient.
    pub fn no_grad() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            vjp: None,
            binding: None,
            requires_grad: false,
        })
    }

    /// Leaf bound to a parameter; `backward` accumulates into its grad.
    pub fn param(&self, param: &Param) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(param.value().clone()),
            parents: Vec::new(),
            vjp: None,
            binding: Some(param.name().to_owned()),
            requires_grad: self.recording,
        })
    }

    /// Shorthand for `param(set.get(name)?)`.
    pub fn param_named(&self, set: &ParamSet, name: &str) -> Result<Var<'_>> {
        Ok(self.param(set.get(name)?))
    }

    /// Record the result of a differentiable operation.
    pub(crate) fn push<F>(&self, value: Tensor, parents: &[Var<'_>], vjp: F) -> Var<'_>
    where
        F: Fn(&VjpArgs<'_>) -> Vec<Option<Tensor>> + 'static,
    {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = self.recording && {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_node(Node {
            value: Rc::new(value),
            parents: ids,
            vjp: if requires_grad { Some(Box::new(vjp)) } else { None },
            binding: None,
            requires_grad,
        })
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Fold a discrete branch decision (ReLU masks, argmax choices) into the
    /// tape signature. Two forwards with equal signatures took the same
    /// piecewise-smooth branch, which finite-difference checks rely on.
    pub(crate) fn mark_branch(&self, bits: impl IntoIterator<Item = u64>) {
        let mut h = self.signature.get();
        for b in bits {
            h ^= b;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        self.signature.set(h);
    }

    pub fn signature(&self) -> u64 {
        self.signature.get()
    }

    /// Propagate d(loss)/d(node) back to every bound parameter and add it to
    /// the matching entry of `params`. Grads accumulate across calls.
    pub fn backward(&self, loss: Var<'_>, params: &mut ParamSet) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::domain("backward", "loss was not recorded on this tape"));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::domain(
                "backward",
                format!("loss must be a scalar, got shape {:?}", root.value.shape()),
            ));
        }
        if !root.requires_grad {
            return Ok(());
        }

        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(name) = &node.binding {
                if let Ok(p) = params.get_mut(name) {
                    p.accumulate_grad(&grad);
                }
            }
            let Some(vjp) = &node.vjp else {
                continue;
            };
            let inputs: Vec<Rc<Tensor>> = node
                .parents
                .iter()
                .map(|&p| Rc::clone(&nodes[p].value))
                .collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = vjp(&VjpArgs {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            });
            for ((&pid, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value().shape())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the gradient flow.
    pub fn detach(&self) -> Var<'t> {
        let value = self.value();
        self.tape.push_node(Node {
            value,
            parents: Vec::new(),
            vjp: None,
            binding: None,
            requires_grad: false,
        })
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>) -> bool {
        std::ptr::eq(self.tape, other.tape)
    }
}
