use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels;
use super::primitive::Primitive;
use super::tensor::{NodeId, Tensor};
use crate::error::{Error, Result};

enum NodeOp {
    Leaf,
    Apply(Primitive),
}

struct Node {
    op: NodeOp,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Append-only record of taped operations.
///
/// A node is only recorded when at least one input already lives on this
/// tape, so evaluating constants through a tape costs nothing extra.
/// Inputs always precede their consumers, which makes the node order a
/// topological order.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

impl Default for Tape {
    fn default() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }
}

/// Gradients of a scalar root with respect to every node that influenced it.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        t.node().and_then(|id| self.by_id(id))
    }

    pub fn by_id(&self, id: NodeId) -> Option<&[f64]> {
        if id.tape != self.tape {
            return None;
        }
        self.grads.get(id.index).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor of `t`'s shape; zeros when `t` did not influence the root.
    pub fn tensor_for(&self, t: &Tensor) -> Tensor {
        match self.get(t) {
            Some(g) => Tensor::raw(t.shape().to_vec(), g.to_vec()),
            None => Tensor::zeros(t.shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers `value` as a differentiable input.
    pub fn var(&self, value: &Tensor) -> Tensor {
        let value = value.detach();
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId {
            tape: self.id,
            index: nodes.len(),
        };
        nodes.push(Node {
            op: NodeOp::Leaf,
            inputs: Vec::new(),
            output: value.clone(),
        });
        value.with_node(id)
    }

    fn owns(&self, t: &Tensor) -> bool {
        t.node().is_some_and(|id| id.tape == self.id)
    }

    /// Evaluates `prim` and records it when any input is on this tape.
    pub fn apply(&self, prim: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
        let out = kernels::forward(&prim, inputs)?;
        if !inputs.iter().any(|t| self.owns(t)) {
            return Ok(out);
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId {
            tape: self.id,
            index: nodes.len(),
        };
        nodes.push(Node {
            op: NodeOp::Apply(prim),
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            output: out.clone(),
        });
        Ok(out.with_node(id))
    }

    /// Reverse sweep from a scalar root. Accumulators start at zero on every call.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        if root.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root.shape()
            )));
        }
        let Some(root_id) = root.node().filter(|_| self.owns(root)) else {
            return Err(Error::Contract("backward root is not on this tape".into()));
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root_id.index + 1];
        grads[root_id.index] = Some(vec![1.0]);
        for idx in (0..=root_id.index).rev() {
            let node = &nodes[idx];
            let NodeOp::Apply(prim) = &node.op else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|t| self.owns(t)).collect();
            let input_grads = kernels::backward(prim, &node.inputs, &node.output, &g, &needs);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let (Some(id), Some(ig)) = (input.node().filter(|id| id.tape == self.id), ig) else {
                    continue;
                };
                match &mut grads[id.index] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn softmax(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Softmax, &[x])
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn abs(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Abs, &[x])
    }

    pub fn max_const(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.apply(Primitive::MaxConst(c), &[x])
    }

    pub fn min_over_sets(&self, x: &Tensor, sets: Arc<Vec<Vec<usize>>>) -> Result<Tensor> {
        self.apply(Primitive::MinOverSets(sets), &[x])
    }

    pub fn sum(&self, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
        self.apply(Primitive::Sum(axes.to_vec()), &[x])
    }

    pub fn sum_all(&self, x: &Tensor) -> Result<Tensor> {
        self.sum(x, &(0..x.rank()).collect::<Vec<_>>())
    }

    pub fn mean(&self, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
        self.apply(Primitive::Mean(axes.to_vec()), &[x])
    }

    pub fn mean_all(&self, x: &Tensor) -> Result<Tensor> {
        self.mean(x, &(0..x.rank()).collect::<Vec<_>>())
    }

    pub fn gather(&self, x: &Tensor, axis: usize, indices: &[usize]) -> Result<Tensor> {
        self.apply(
            Primitive::Gather {
                axis,
                indices: Arc::new(indices.to_vec()),
            },
            &[x],
        )
    }

    /// Gather with a shared index list (avoids copying large lists every step).
    pub fn gather_shared(&self, x: &Tensor, axis: usize, indices: &Arc<Vec<usize>>) -> Result<Tensor> {
        self.apply(
            Primitive::Gather {
                axis,
                indices: indices.clone(),
            },
            &[x],
        )
    }

    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn dropout(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Dropout, &[x, mask])
    }

    pub fn compose(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::TransformCompose, &[a, b])
    }

    pub fn quat_normalize(&self, q: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::QuatNormalize, &[q])
    }

    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if x.shape() == shape {
            return Ok(x.clone());
        }
        self.apply(Primitive::Reshape(shape.to_vec()), &[x])
    }

    pub fn transpose(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Transpose, &[x])
    }

    pub fn scale_shift(&self, x: &Tensor, scale: f64, shift: f64) -> Result<Tensor> {
        self.apply(Primitive::ScaleShift { scale, shift }, &[x])
    }

    pub fn scale(&self, x: &Tensor, scale: f64) -> Result<Tensor> {
        self.scale_shift(x, scale, 0.0)
    }

    /// `x ⊙ x`.
    pub fn square(&self, x: &Tensor) -> Result<Tensor> {
        self.mul(x, x)
    }
}
