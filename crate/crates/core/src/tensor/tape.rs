use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Backward rule of one node: receives the upstream gradient and, for each
/// parent, whether that parent wants a gradient. Returns one entry per parent.
pub(crate) type BackwardFn<F> = Box<dyn Fn(&[F], &[bool]) -> Vec<Option<Vec<F>>>>;

struct Node<F: Scalar> {
    value: Rc<Tensor<F>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<F>>,
    grad: Option<Tensor<F>>,
}

/// Ordered record of executed operations.
///
/// A tape is a single-threaded unit of work; build a fresh one per forward
/// pass.
pub struct Tape<F: Scalar = f32> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> fmt::Debug for Tape<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Scalar = f32> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Scalar> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<F: Scalar> Tape<F> {
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

    /// Registers an input. Gradients are collected for it only when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        self.push(Rc::new(value), requires_grad, Vec::new(), None)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, false)
    }

    fn push(
        &self,
        value: Rc<Tensor<F>>,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn<F>>,
    ) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an operation result. The backward rule is dropped when no
    /// parent requires a gradient, so detached sub-graphs cost nothing.
    pub(crate) fn op(
        &self,
        value: Tensor<F>,
        parents: &[Var<'_, F>],
        backward: BackwardFn<F>,
    ) -> Var<'_, F> {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let ids = parents.iter().map(|p| p.id).collect();
        let backward = if requires_grad { Some(backward) } else { None };
        self.push(Rc::new(value), requires_grad, ids, backward)
    }

    /// Reverse pass from a scalar root. Leaf gradients accumulate across
    /// calls.
    pub fn backward(&self, root: Var<'_, F>) -> Result<()> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::Usage("backward root belongs to another tape".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes[root.id].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        if !nodes[root.id].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![F::one()]);
        let mut leaf_grads = Vec::new();
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                None => {
                    if node.requires_grad && node.parents.is_empty() {
                        leaf_grads.push((id, g));
                    }
                }
                Some(rule) => {
                    let needs: Vec<bool> = node
                        .parents
                        .iter()
                        .map(|&p| nodes[p].requires_grad)
                        .collect();
                    let parent_grads = rule(&g, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), nodes[p].value.len());
                        match &mut grads[p] {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        for (id, g) in leaf_grads {
            let node = &mut nodes[id];
            match &mut node.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, b)| *a += *b),
                slot @ None => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<F>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self) -> Option<Tensor<F>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, F> {
        let value = self.value();
        self.tape.push(value, false, Vec::new(), None)
    }
}
