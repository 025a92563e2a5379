use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use super::Tensor;
use crate::error::{bail, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

/// Backward rule of a recorded operation.
///
/// `backward` returns one entry per input: `None` when the input does not
/// need a gradient (see `needs_grad`) or receives no contribution.
pub trait Backward {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    rule: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// Append-only record of a forward pass.
///
/// Nodes are stored in creation order, so every node's inputs precede it and
/// a reverse sweep is a valid topological order.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> Var {
        let index = u32::try_from(self.nodes.len()).expect("tape overflow");
        self.nodes.push(node);
        Var {
            tape: self.id,
            index,
        }
    }

    /// Adds a leaf; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(Node {
            value: tensor,
            inputs: Vec::new(),
            rule: None,
            requires_grad,
        })
    }

    /// Adds a differentiable leaf regardless of the tensor's flag.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.leaf(tensor.clone().with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn owns(&self, v: Var) -> bool {
        v.tape == self.id && v.index() < self.nodes.len()
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if !self.owns(v) {
            bail!(
                Tape,
                "variable {:?} was not recorded on tape {}",
                v,
                self.id
            );
        }
        Ok(())
    }

    /// Value of a recorded variable.
    ///
    /// # Panics
    /// If `v` belongs to another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        assert!(self.owns(v), "variable {:?} is not on this tape", v);
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.owns(v) && self.nodes[v.index()].requires_grad
    }

    /// Records an operation result with its backward rule.
    pub fn record<B: Backward + 'static>(
        &mut self,
        value: Tensor,
        inputs: &[Var],
        rule: B,
    ) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index()].requires_grad);
        let value = value.with_requires_grad(requires_grad);
        Ok(self.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.index()).collect(),
            rule: if requires_grad {
                Some(Box::new(rule))
            } else {
                None
            },
            requires_grad,
        }))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let root = loss.index();
        let loss_value = &self.nodes[root].value;
        if loss_value.numel() != 1 {
            bail!(
                Shape,
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            );
        }

        let mut pending: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        let mut leaf_grads: Vec<Option<Tensor>> = self
            .nodes
            .iter()
            .map(|n| {
                (n.rule.is_none() && n.inputs.is_empty() && n.requires_grad)
                    .then(|| Tensor::zeros(n.value.shape()).expect("recorded shapes are valid"))
            })
            .collect();

        if self.nodes[root].requires_grad {
            pending[root] = Some(vec![1.0]);
        }

        for i in (0..=root).rev() {
            let Some(grad) = pending[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let Some(rule) = node.rule.as_ref() else {
                if let Some(slot) = leaf_grads[i].as_mut() {
                    for (dst, g) in slot.data_mut().iter_mut().zip(&grad) {
                        *dst += g;
                    }
                }
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| self.nodes[j].requires_grad)
                .collect();
            let grads = rule.backward(&inputs, &node.value, &grad, &needs);
            assert_eq!(
                grads.len(),
                node.inputs.len(),
                "{}: backward returned wrong number of gradients",
                rule.name()
            );
            for ((&j, g), need) in node.inputs.iter().zip(grads).zip(needs) {
                let (Some(g), true) = (g, need) else {
                    continue;
                };
                assert_eq!(
                    g.len(),
                    self.nodes[j].value.numel(),
                    "{}: gradient length mismatch",
                    rule.name()
                );
                match pending[j].as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => pending[j] = Some(g),
                }
            }
        }

        Ok(Gradients {
            tape: self.id,
            grads: leaf_grads,
        })
    }
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; zero-filled if the leaf did not feed the loss.
    /// `None` for constants, intermediate nodes and foreign variables.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index()).and_then(Option::take)
    }
}
