//! The gradient tape: one per forward pass.
//!
//! Nodes are recorded in deterministic insertion order; `backward` visits
//! them in exact reverse order and frees each activation gradient as soon
//! as it has been consumed. Leaf gradients survive in the returned
//! [`GradStore`] so the optimizer can read them after the tape is dropped.

use std::rc::Rc;

use crate::error::CoreError;
use crate::scalar::Scalar;
use crate::tensor::PTensor;
use crate::Result;

pub type NodeId = usize;

pub(crate) type BackFn<E> = Box<dyn Fn(&BackCtx<'_, E>, &[E], &mut GradBufs<E>)>;

pub(crate) struct Node<E: Scalar> {
    pub op: &'static str,
    pub shape: Vec<usize>,
    pub data: Rc<Vec<E>>,
    pub needs_grad: bool,
    pub back: Option<BackFn<E>>,
}

pub struct Tape<E: Scalar> {
    pub(crate) nodes: Vec<Node<E>>,
    grad_enabled: bool,
    /// Staged parameter leaves keyed by buffer address, so staging the
    /// same parameter twice yields one node and the optimizer can map
    /// parameters back to their gradients.
    leaves: Vec<(*const E, NodeId)>,
}

/// Read-only view of already-recorded nodes, handed to backward closures.
pub(crate) struct BackCtx<'a, E: Scalar> {
    nodes: &'a [Node<E>],
    needs: &'a [bool],
}

impl<'a, E: Scalar> BackCtx<'a, E> {
    pub fn val(&self, id: NodeId) -> &'a [E] {
        &self.nodes[id].data
    }
    #[allow(dead_code)]
    pub fn shape(&self, id: NodeId) -> &'a [usize] {
        &self.nodes[id].shape
    }
    pub fn needs(&self, id: NodeId) -> bool {
        self.needs[id]
    }
}

/// Gradient buffers keyed by node id; allocated lazily on first accumulation.
pub(crate) struct GradBufs<E: Scalar> {
    bufs: Vec<Option<Vec<E>>>,
}

impl<E: Scalar> GradBufs<E> {
    /// Accumulation target for node `id`, zero-filled on first touch.
    pub fn acc(&mut self, id: NodeId, numel: usize) -> &mut [E] {
        self.bufs[id].get_or_insert_with(|| vec![E::ZERO; numel])
    }
}

pub struct GradStore<E: Scalar> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Scalar> GradStore<E> {
    pub fn get(&self, id: NodeId) -> Option<&[E]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<E>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new(grad_enabled: bool) -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            grad_enabled,
            leaves: Vec::new(),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn value(&self, id: NodeId) -> &[E] {
        &self.nodes[id].data
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id].op
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, id: NodeId) -> E {
        debug_assert_eq!(self.nodes[id].data.len(), 1);
        self.nodes[id].data[0]
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Stage a parameter onto the tape as a leaf. Staging the same buffer
    /// again returns the existing node, so gradients accumulate in one
    /// place per parameter.
    pub fn leaf(&mut self, p: &PTensor<E>) -> NodeId {
        let ptr = Rc::as_ptr(&p.data) as *const E;
        if let Some(&(_, id)) = self.leaves.iter().find(|(q, _)| *q == ptr) {
            return id;
        }
        let needs = self.grad_enabled && p.trainable;
        let id = self.push("leaf", p.shape.clone(), Rc::clone(&p.data), needs, None);
        self.leaves.push((ptr, id));
        id
    }

    /// Node id of a previously staged parameter, if any.
    pub fn leaf_id(&self, p: &PTensor<E>) -> Option<NodeId> {
        let ptr = Rc::as_ptr(&p.data) as *const E;
        self.leaves
            .iter()
            .find(|(q, _)| *q == ptr)
            .map(|&(_, id)| id)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<E>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push("const", shape, Rc::new(data), false, None)
    }

    pub(crate) fn push(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        data: Rc<Vec<E>>,
        needs_grad: bool,
        back: Option<BackFn<E>>,
    ) -> NodeId {
        let needs = needs_grad && self.grad_enabled;
        self.nodes.push(Node {
            op,
            shape,
            data,
            needs_grad: needs,
            back: if needs { back } else { None },
        });
        self.nodes.len() - 1
    }

    /// Whether an op whose inputs are `ids` should record a backward fn.
    pub(crate) fn any_needs(&self, ids: &[NodeId]) -> bool {
        self.grad_enabled && ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Reverse pass from a scalar loss. Gradients of interior nodes are
    /// freed as soon as consumed; leaf gradients are kept and returned.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradStore<E>> {
        let lnode = &self.nodes[loss];
        if lnode.data.len() != 1 {
            return Err(CoreError::NonScalarLoss {
                shape: lnode.shape.clone(),
            });
        }
        let needs: Vec<bool> = self.nodes.iter().map(|n| n.needs_grad).collect();
        let mut bufs = GradBufs {
            bufs: self.nodes.iter().map(|_| None).collect(),
        };
        bufs.bufs[loss] = Some(vec![E::ONE]);

        for i in (0..=loss).rev() {
            if bufs.bufs[i].is_none() {
                continue;
            }
            let (head, tail) = self.nodes.split_at(i);
            let node = &tail[0];
            match &node.back {
                Some(back) => {
                    let g = bufs.bufs[i].take().expect("checked above");
                    let ctx = BackCtx {
                        nodes: head,
                        needs: &needs,
                    };
                    back(&ctx, &g, &mut bufs);
                }
                None => {
                    // Leaf (or constant that somehow accumulated): keep it.
                }
            }
        }
        Ok(GradStore { grads: bufs.bufs })
    }

    /// First op, in insertion order, whose output contains a non-finite
    /// value. Used for NaN diagnostics after a bad loss.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.nodes
            .iter()
            .find(|n| n.data.iter().any(|v| !v.is_finite()))
            .map(|n| n.op)
    }
}
