use std::cell::RefCell;
use std::sync::Arc;

use super::ops::{self, Input, OpKind, Saved};
use super::{invalid, Result, Tensor, TensorError};

pub(crate) struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    requires_grad: bool,
    record: Option<Record>,
}

struct Record {
    kind: OpKind,
    inputs: Vec<usize>,
    saved: Saved,
}

/// Ordered record of executed ops.
///
/// Ops whose inputs all lack gradients are evaluated but not recorded, so a
/// frozen sub-network costs no backward work.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value living on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
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

    /// Registers a leaf. It is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.shared_data(),
            requires_grad: tensor.requires_grad(),
            record: None,
        })
    }

    /// A non-differentiable leaf built from raw parts.
    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn check_owner(&self, v: Var<'_>) -> Result<()> {
        if !std::ptr::eq(self, v.tape) {
            return Err(invalid("tape", "variable belongs to a different tape"));
        }
        Ok(())
    }

    /// Runs `kind` on `inputs` and records it when any input needs a gradient.
    pub fn apply(&self, kind: OpKind, inputs: &[Var<'_>]) -> Result<Var<'_>> {
        for v in inputs {
            self.check_owner(*v)?;
        }
        let (shape, value, saved, requires_grad) = {
            let nodes = self.nodes.borrow();
            let ins: Vec<Input<'_>> = inputs
                .iter()
                .map(|v| {
                    let n = &nodes[v.id];
                    Input {
                        shape: &n.shape,
                        data: &n.value,
                        requires_grad: n.requires_grad,
                    }
                })
                .collect();
            let (shape, value, saved) = ops::forward(&kind, &ins)?;
            let rg = ins.iter().any(|i| i.requires_grad);
            (shape, value, saved, rg)
        };
        let record = requires_grad.then(|| Record {
            kind,
            inputs: inputs.iter().map(|v| v.id).collect(),
            saved,
        });
        Ok(self.push(Node {
            shape,
            value: Arc::new(value),
            requires_grad,
            record,
        }))
    }

    /// Records an externally evaluated scalar function of `input` whose
    /// gradient with respect to `input` is already known.
    pub fn scalar_fn<'t>(&'t self, input: Var<'t>, value: f64, local_grad: Vec<f64>) -> Result<Var<'t>> {
        self.check_owner(input)?;
        let (numel, requires_grad) = {
            let nodes = self.nodes.borrow();
            (nodes[input.id].value.len(), nodes[input.id].requires_grad)
        };
        if local_grad.len() != numel {
            return Err(TensorError::ShapeMismatch {
                op: "scalar_fn",
                lhs: vec![numel],
                rhs: vec![local_grad.len()],
            });
        }
        let record = requires_grad.then(|| Record {
            kind: OpKind::ScalarFn,
            inputs: vec![input.id],
            saved: Saved::Vec(local_grad),
        });
        Ok(self.push(Node {
            shape: vec![],
            value: Arc::new(vec![value]),
            requires_grad,
            record,
        }))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        self.check_owner(loss)?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if !root.requires_grad {
            return Ok(Grads { grads });
        }
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let Some(rec) = &node.record else {
                grads[id] = Some(g);
                continue;
            };
            let ins: Vec<Input<'_>> = rec
                .inputs
                .iter()
                .map(|&i| Input {
                    shape: &nodes[i].shape,
                    data: &nodes[i].value,
                    requires_grad: nodes[i].requires_grad,
                })
                .collect();
            let contribs = ops::backward(&rec.kind, &ins, &node.value, &rec.saved, &g)?;
            for (&src, contrib) in rec.inputs.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                match &mut grads[src] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Grads { grads })
    }

    fn with_node<R>(&self, id: usize, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.nodes.borrow()[id])
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of the loss with respect to a differentiable leaf.
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Vec<f64>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

macro_rules! unary {
    ($($name:ident => $kind:expr),* $(,)?) => {
        $(pub fn $name(self) -> Result<Var<'t>> {
            self.tape.apply($kind, &[self])
        })*
    };
}

macro_rules! binary {
    ($($name:ident => $kind:expr),* $(,)?) => {
        $(pub fn $name(self, other: Var<'t>) -> Result<Var<'t>> {
            self.tape.apply($kind, &[self, other])
        })*
    };
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_node(self.id, |n| n.shape.clone())
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.tape.with_node(self.id, |n| n.shape[axis])
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.with_node(self.id, |n| n.requires_grad)
    }

    pub fn value(&self) -> Arc<Vec<f64>> {
        self.tape.with_node(self.id, |n| Arc::clone(&n.value))
    }

    /// Detached copy of the current value.
    pub fn to_tensor(&self) -> Tensor {
        self.tape
            .with_node(self.id, |n| Tensor::from_shared(n.shape.clone(), Arc::clone(&n.value)))
    }

    pub fn item(&self) -> Result<f64> {
        self.to_tensor().item()
    }

    unary! {
        sigmoid => OpKind::Sigmoid,
        relu => OpKind::Relu,
        sum => OpKind::Sum,
        mean => OpKind::Mean,
    }

    binary! {
        add => OpKind::Add,
        sub => OpKind::Sub,
        mul => OpKind::Mul,
        matmul => OpKind::MatMul,
        prelu => OpKind::Prelu,
        pointwise_conv2d => OpKind::PointwiseConv2d,
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Scale(factor), &[self])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Reshape(shape.to_vec()), &[self])
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn transpose(self, perm: &[usize]) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Transpose(perm.to_vec()), &[self])
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.tape.apply(OpKind::Softmax(axis), &[self])
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        self.tape.apply(OpKind::LogSoftmax(axis), &[self])
    }

    /// Picks `indices` along `axis` (repeats and reordering allowed).
    pub fn select(self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        self.tape.apply(
            OpKind::Select {
                axis,
                indices: indices.to_vec(),
            },
            &[self],
        )
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.select(axis, &idx)
    }

    /// Normalizes over every axis from `axis` on, then applies `gamma`/`beta`
    /// broadcast against those trailing axes.
    pub fn layer_norm(self, axis: usize, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.tape.apply(OpKind::LayerNorm { axis, eps }, &[self, gamma, beta])
    }

    /// `(B, Cin, L) * (Cout, Cin/groups, K) -> (B, Cout, L')`.
    pub fn conv1d(
        self,
        weight: Var<'t>,
        stride: usize,
        dilation: usize,
        groups: usize,
        padding: (usize, usize),
    ) -> Result<Var<'t>> {
        self.tape.apply(
            OpKind::Conv1d {
                stride,
                dilation,
                groups,
                padding,
            },
            &[self, weight],
        )
    }
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| invalid("concat", "no inputs"))?;
    first.tape.apply(OpKind::Concat(axis), parts)
}

impl<'t> Var<'t> {
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        concat(parts, axis)
    }
}
