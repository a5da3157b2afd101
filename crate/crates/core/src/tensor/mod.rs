//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Forward computations are recorded on a [`Tape`] as they execute. The
//! backward pass ([`backward_grad`]) is itself written in terms of recorded
//! operators, so with `create_graph = true` the returned gradients are tape
//! nodes and can be differentiated again. That is what lets the meta-learning
//! objective differentiate through an inner gradient step.
//!
//! ```
//! use metadg::tensor::{backward_grad, NdArray, ParamSet, Tape};
//!
//! let mut params = ParamSet::new();
//! params.insert("x", NdArray::scalar(2.0));
//! let tape = Tape::new();
//! let vars = tape.watch(&params);
//! let x = vars.get("x").unwrap();
//! let cube = x.mul(x).unwrap().mul(x).unwrap();
//! let g = backward_grad(&cube, &vars, true).unwrap();
//! let gg = backward_grad(&g.get("x").unwrap().clone(), &vars, false).unwrap();
//! assert_eq!(gg.get("x").unwrap().value().item(), 12.0);
//! ```

mod array;
mod conv;
mod grad;
mod ops;
mod params;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

pub use array::NdArray;
pub use grad::{backward_grad, finite_diff_grad, max_relative_error, relative_error};
pub use ops::OpKind;
pub use params::{ParamSet, ParamVars};

use crate::error::{Error, Result};

/// A recorded operation. Inputs hold values and (for tape nodes) ids, never
/// handles back to the tape, so a tape owns no reference cycles.
#[derive(Clone)]
pub(crate) struct Node {
    pub op: OpKind,
    pub inputs: Vec<NodeInput>,
    pub output: Rc<NdArray>,
}

#[derive(Clone)]
pub(crate) struct NodeInput {
    pub id: Option<usize>,
    pub value: Rc<NdArray>,
}

struct TapeInner {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

/// Append-only record of operations. Cloning shares the same tape.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { inner: Rc::new(TapeInner { nodes: RefCell::new(Vec::new()), recording: Cell::new(true) }) }
    }

    /// Registers `value` as a differentiable leaf.
    pub fn var(&self, value: NdArray) -> Tensor {
        let value = Rc::new(value);
        let id = self.push(Node { op: OpKind::Leaf, inputs: Vec::new(), output: value.clone() });
        Tensor { value, node: Some(NodeRef { tape: self.clone(), id }) }
    }

    /// Registers every entry of `params` as a leaf.
    pub fn watch(&self, params: &ParamSet) -> ParamVars {
        params.iter().map(|(name, value)| (name.clone(), self.var(value.clone()))).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn is_recording(&self) -> bool {
        self.inner.recording.get()
    }

    /// Sets the recording flag, returning the previous one.
    pub(crate) fn set_recording(&self, on: bool) -> bool {
        self.inner.recording.replace(on)
    }

    pub(crate) fn push(&self, node: Node) -> usize {
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    pub(crate) fn node(&self, id: usize) -> Node {
        self.inner.nodes.borrow()[id].clone()
    }

    pub(crate) fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub tape: Tape,
    pub id: usize,
}

/// An array value, optionally tied to a node on a [`Tape`].
///
/// Tensors without a node are constants: operations among constants produce
/// constants and record nothing.
#[derive(Clone)]
pub struct Tensor {
    value: Rc<NdArray>,
    node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.value.shape()).field("node", &self.node_id()).finish()
    }
}

impl Tensor {
    pub fn constant(value: NdArray) -> Self {
        Tensor { value: Rc::new(value), node: None }
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(NdArray::scalar(v))
    }

    pub fn value(&self) -> &NdArray {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor { value: self.value.clone(), node: None }
    }

    pub(crate) fn from_node(tape: &Tape, id: Option<usize>, value: Rc<NdArray>) -> Tensor {
        Tensor { value, node: id.map(|id| NodeRef { tape: tape.clone(), id }) }
    }

    /// Evaluates `op` on `inputs`, recording a node when any input lives on a
    /// recording tape.
    pub fn apply(op: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
        let mut tape: Option<&Tape> = None;
        for t in inputs {
            if let Some(n) = &t.node {
                match tape {
                    None => tape = Some(&n.tape),
                    Some(existing) if !existing.same(&n.tape) => return Err(Error::TapeMismatch(op.name())),
                    _ => {}
                }
            }
        }
        let values: Vec<&NdArray> = inputs.iter().map(|t| t.value.as_ref()).collect();
        let out = Rc::new(op.forward(&values)?);
        match tape {
            Some(tape) if tape.is_recording() => {
                let node = Node {
                    op,
                    inputs: inputs.iter().map(|t| NodeInput { id: t.node_id(), value: t.value.clone() }).collect(),
                    output: out.clone(),
                };
                let id = tape.push(node);
                Ok(Tensor { value: out, node: Some(NodeRef { tape: tape.clone(), id }) })
            }
            _ => Ok(Tensor { value: out, node: None }),
        }
    }
}
