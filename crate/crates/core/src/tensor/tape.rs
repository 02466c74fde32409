use std::fmt;
use std::sync::Arc;

use super::Tensor;
use crate::error::{ensure, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one recorded primitive.
///
/// `parents` are the forward inputs in the order they were recorded, `out` is
/// the forward result and `grad` is d(loss)/d(out). Implementations return one
/// entry per parent and may leave an entry `None` when `needs` is false.
pub trait Backward: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        parents: &[&Tensor],
        out: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

type BackwardFn =
    dyn Fn(&[&Tensor], &Tensor, &[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync;

struct FnBackward {
    name: &'static str,
    f: Box<BackwardFn>,
}

impl Backward for FnBackward {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(
        &self,
        parents: &[&Tensor],
        out: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        (self.f)(parents, out, grad, needs)
    }
}

struct Node {
    value: Arc<Tensor>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<Var>,
    op: Option<Box<dyn Backward>>,
}

/// Append-only record of primitive applications.
///
/// Nodes are numbered in creation order and every node's parents precede it,
/// so walking the list backwards is a reverse topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Records a leaf without copying the tensor (used for parameters).
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            parents: Vec::new(),
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Value of `v` with its accumulated gradient attached.
    pub fn export(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = (*node.value).clone().with_requires_grad(node.requires_grad);
        t.grad = node.grad.clone();
        t
    }

    /// Records a primitive. The backward rule is kept only when some parent
    /// requires a gradient.
    pub fn push(&mut self, value: Tensor, parents: &[Var], op: impl Backward + 'static) -> Var {
        let requires_grad = self.any_requires_grad(parents);
        self.nodes.push(Node {
            value: Arc::new(value),
            grad: None,
            requires_grad,
            parents: parents.to_vec(),
            op: if requires_grad {
                Some(Box::new(op))
            } else {
                None
            },
        });
        Var(self.nodes.len() - 1)
    }

    /// [`Tape::push`] with a closure as the backward rule.
    pub fn push_fn<F>(&mut self, name: &'static str, value: Tensor, parents: &[Var], f: F) -> Var
    where
        F: Fn(&[&Tensor], &Tensor, &[f64], &[bool]) -> Vec<Option<Vec<f64>>>
            + Send
            + Sync
            + 'static,
    {
        self.push(
            value,
            parents,
            FnBackward {
                name,
                f: Box::new(f),
            },
        )
    }

    /// Back-propagates from a scalar `root` seeded with 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        ensure!(
            self.value(root).len() == 1,
            "Tape::backward",
            "root must be a scalar, got shape {:?}",
            self.value(root).shape()
        );
        self.backward_with(root, vec![1.0])
    }

    /// Back-propagates an arbitrary cotangent from `root`.
    pub fn backward_with(&mut self, root: Var, seed: Vec<f64>) -> Result<()> {
        ensure!(
            seed.len() == self.value(root).len(),
            "Tape::backward_with",
            "seed length {} does not match value length {}",
            seed.len(),
            self.value(root).len()
        );
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(seed);
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = node.grad.as_ref() else { continue };
            let parents: Vec<&Tensor> = node.parents.iter().map(|p| &*before[p.0].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| before[p.0].requires_grad).collect();
            let grads = op.backward(&parents, &node.value, grad, &needs);
            debug_assert_eq!(grads.len(), node.parents.len(), "{}", op.name());
            for (p, g) in node.parents.iter().zip(grads) {
                let (Some(g), true) = (g, before[p.0].requires_grad) else {
                    continue;
                };
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: format!("gradient produced by {}", op.name()),
                    });
                }
                match &mut before[p.0].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            // Intermediate gradients are no longer needed once propagated.
            if !node.parents.is_empty() {
                node.grad = None;
            }
        }
        Ok(())
    }
}
