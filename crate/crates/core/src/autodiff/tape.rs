//! Reverse-mode tape.
//!
//! Every operation appends one node holding its output value and a backward
//! rule. Nodes only ever reference earlier nodes, so the append order is a
//! topological order and the backward sweep is a single reverse scan.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn node_id(self) -> usize {
        self.idx
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// `inputs` are the values of the operation's inputs in recording order,
/// `needs[i]` tells whether input `i` wants a gradient at all. Entries of the
/// returned vector for inputs that do not need one may be `None`.
pub trait Backward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Node {
        inputs: Vec<Var>,
        rule: Box<dyn Backward>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    /// Leaf flag: accumulate into `grad` during backward.
    requires_grad: bool,
    /// Some path from a `requires_grad` leaf reaches this node.
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

pub struct Tape {
    id: u64,
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

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
            grad: None,
        })
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records an operation whose forward value has already been computed.
    pub fn record(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn Backward>) -> Var {
        for v in inputs {
            self.check(*v);
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.idx].needs_grad);
        self.push(Node {
            value,
            op: Op::Node {
                inputs: inputs.to_vec(),
                rule,
            },
            requires_grad: false,
            needs_grad,
            grad: None,
        })
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) {
        assert!(
            v.tape == self.id && v.idx < self.nodes.len(),
            "variable {v:?} does not belong to tape {}",
            self.id
        );
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v);
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.check(v);
        self.nodes[v.idx].needs_grad
    }

    /// Accumulated gradient of a `requires_grad` leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.check(v);
        self.nodes[v.idx].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Propagates d`loss`/d(leaf) into every reachable `requires_grad` leaf.
    /// Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss);
        let root = loss.idx;
        if !self.nodes[root].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        self.backward_seeded(loss, vec![1.0])
    }

    /// Backward sweep from an arbitrary node with an explicit output cotangent.
    pub fn backward_seeded(&mut self, root: Var, seed: Vec<f64>) -> Result<()> {
        self.check(root);
        if seed.len() != self.nodes[root.idx].value.numel() {
            return Err(Error::dim(
                "backward seed",
                self.nodes[root.idx].value.shape(),
                &[seed.len()],
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.idx + 1);
        adj.resize_with(root.idx + 1, || None);
        adj[root.idx] = Some(seed);

        for i in (0..=root.idx).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    if node.requires_grad {
                        match &mut node.grad {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => node.grad = Some(g),
                        }
                    }
                }
                Op::Node { inputs, rule } => {
                    let values: Vec<&Tensor> =
                        inputs.iter().map(|v| &self.nodes[v.idx].value).collect();
                    let needs: Vec<bool> = inputs
                        .iter()
                        .map(|v| self.nodes[v.idx].needs_grad)
                        .collect();
                    let grads = rule.backward(&values, &self.nodes[i].value, &g, &needs);
                    debug_assert_eq!(grads.len(), inputs.len());
                    for ((v, gi), need) in inputs.iter().zip(grads).zip(&needs) {
                        let (Some(gi), true) = (gi, *need) else {
                            continue;
                        };
                        debug_assert_eq!(gi.len(), self.nodes[v.idx].value.numel());
                        match &mut adj[v.idx] {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                            slot => *slot = Some(gi),
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
