use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Gradient contributions for each parent, in parent order. `None` means the
/// parent receives nothing (it was not tracked or the op is constant in it).
pub(crate) type ParentGrads<F> = Vec<Option<Vec<F>>>;
type BackwardFn<F> = Box<dyn Fn(&[F], &[bool]) -> ParentGrads<F>>;

struct Node<F: Real> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<F>>,
}

/// Ordered record of differentiable operations.
///
/// Node ids are assigned in creation order, which is a topological order, so
/// the reverse pass is a single descending sweep that visits each node once.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
    grads: RefCell<HashMap<usize, Vec<F>>>,
    recording: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(HashMap::new()),
            recording: true,
        }
    }

    /// A tape that records nothing; every value it produces is a constant.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
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

    /// Registers a tensor whose gradient is wanted.
    pub fn leaf(&self, t: Tensor<F>) -> Var<'_, F> {
        let id = if self.recording {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: vec![],
                backward: None,
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        let (shape, data) = (t.shape, t.data);
        Var {
            tape: self,
            id,
            shape,
            data: Rc::new(data),
        }
    }

    /// Wraps a tensor that never receives gradient.
    pub fn constant(&self, t: Tensor<F>) -> Var<'_, F> {
        Var {
            tape: self,
            id: None,
            shape: t.shape,
            data: Rc::new(t.data),
        }
    }

    pub(crate) fn push<'t>(
        &'t self,
        shape: Vec<usize>,
        data: Rc<Vec<F>>,
        parents: &[&Var<'t, F>],
        backward: impl Fn(&[F], &[bool]) -> ParentGrads<F> + 'static,
    ) -> Var<'t, F> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let tracked = self.recording && parents.iter().any(|p| p.id.is_some());
        let id = if tracked {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: parents.iter().map(|p| p.id).collect(),
                backward: Some(Box::new(backward)),
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            tape: self,
            id,
            shape,
            data,
        }
    }

    /// Reverse pass from a scalar loss. Leaf gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&self, loss: &Var<'_, F>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        let root = loss
            .id
            .ok_or_else(|| Error::Invalid("loss is not connected to the tape".into()))?;
        let nodes = self.nodes.borrow();
        let mut pending: Vec<Option<Vec<F>>> = Vec::with_capacity(root + 1);
        pending.resize_with(root + 1, || None);
        pending[root] = Some(vec![F::one()]);
        let mut leaf_grads = self.grads.borrow_mut();
        for id in (0..=root).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            match &node.backward {
                None => accumulate(leaf_grads.entry(id).or_default(), g),
                Some(bw) => {
                    let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
                    let contributions = bw(&g, &needs);
                    debug_assert_eq!(contributions.len(), node.parents.len());
                    for (parent, pg) in node.parents.iter().zip(contributions) {
                        if let (Some(pid), Some(pg)) = (parent, pg) {
                            match &mut pending[*pid] {
                                Some(acc) => accumulate(acc, pg),
                                slot => *slot = Some(pg),
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if it received any.
    pub fn grad(&self, v: &Var<'_, F>) -> Option<Tensor<F>> {
        let id = v.id?;
        self.grads.borrow().get(&id).map(|g| Tensor {
            shape: v.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }
}

fn accumulate<F: Real>(acc: &mut Vec<F>, g: Vec<F>) {
    if acc.is_empty() {
        *acc = g;
    } else {
        for (a, b) in acc.iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t, F: Real> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) id: Option<usize>,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Rc<Vec<F>>,
}

impl<'t, F: Real> Var<'t, F> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn to_tensor(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.as_ref().clone(),
        }
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Same value, cut off from the tape.
    pub fn detach(&self) -> Var<'t, F> {
        Var {
            id: None,
            ..self.clone()
        }
    }
}

impl<F: Real> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish()
    }
}
