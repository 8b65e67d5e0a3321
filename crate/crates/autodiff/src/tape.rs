use crate::backward::op_backward;
use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive identifiers, used in reports and error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Relu,
    Exp,
    Log,
    Abs,
    Softplus,
    Sum,
    Mean,
    MeanAxis,
    Reshape,
    Permute,
    Matmul,
    BiasAdd,
    Conv2d,
    BatchNorm,
    Softmax,
    Renormalize,
    UpsampleNearest,
    UpsampleBilinear,
    AvgPool,
    GlobalAvgPool,
    Concat,
}

impl OpKind {
    /// Every differentiable primitive (excludes leaves and constants).
    pub const PRIMITIVES: &'static [OpKind] = &[
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Relu,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Abs,
        OpKind::Softplus,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MeanAxis,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Matmul,
        OpKind::BiasAdd,
        OpKind::Conv2d,
        OpKind::BatchNorm,
        OpKind::Softmax,
        OpKind::Renormalize,
        OpKind::UpsampleNearest,
        OpKind::UpsampleBilinear,
        OpKind::AvgPool,
        OpKind::GlobalAvgPool,
        OpKind::Concat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Abs => "abs",
            OpKind::Softplus => "softplus",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MeanAxis => "mean_axis",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Matmul => "matmul",
            OpKind::BiasAdd => "bias_add",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Softmax => "softmax",
            OpKind::Renormalize => "renormalize",
            OpKind::UpsampleNearest => "upsample_nearest",
            OpKind::UpsampleBilinear => "upsample_bilinear",
            OpKind::AvgPool => "avg_pool",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Concat => "concat",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        std::iter::once(OpKind::Leaf)
            .chain(std::iter::once(OpKind::Constant))
            .chain(Self::PRIMITIVES.iter().copied())
            .find(|k| k.name() == name)
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Geometry of a 2-D convolution, resolved at record time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// `(outer, axis length, inner)` factorization of a shape around one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct AxisSplit {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl AxisSplit {
    pub fn new(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

/// Recorded operation with whatever the backward rule needs.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Released,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Relu,
    Exp,
    Log { eps: f64 },
    Abs,
    Softplus,
    Sum,
    Mean,
    MeanAxis(AxisSplit),
    Reshape,
    Permute { axes: Vec<usize> },
    Matmul { batch: usize, m: usize, k: usize, n: usize },
    BiasAdd(AxisSplit),
    Conv2d { geom: ConvGeom, has_bias: bool },
    BatchNorm {
        split: AxisSplit,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Softmax(AxisSplit),
    Renormalize { split: AxisSplit, sums: Vec<f64> },
    UpsampleNearest { planes: usize, h: usize, w: usize, factor: usize },
    UpsampleBilinear { planes: usize, h: usize, w: usize, factor: usize },
    AvgPool { planes: usize, h: usize, w: usize, k: usize },
    GlobalAvgPool { planes: usize, hw: usize },
    Concat { outer: usize, inner: usize, sizes: Vec<usize> },
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant | Op::Released => OpKind::Constant,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::AddScalar => OpKind::AddScalar,
            Op::Relu => OpKind::Relu,
            Op::Exp => OpKind::Exp,
            Op::Log { .. } => OpKind::Log,
            Op::Abs => OpKind::Abs,
            Op::Softplus => OpKind::Softplus,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::MeanAxis(_) => OpKind::MeanAxis,
            Op::Reshape => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::BiasAdd(_) => OpKind::BiasAdd,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Renormalize { .. } => OpKind::Renormalize,
            Op::UpsampleNearest { .. } => OpKind::UpsampleNearest,
            Op::UpsampleBilinear { .. } => OpKind::UpsampleBilinear,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Concat { .. } => OpKind::Concat,
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    /// Kind as recorded, kept after the op payload is dropped.
    pub kind: OpKind,
    pub inputs: Vec<Var>,
    pub requires_grad: bool,
}

/// Ordered record of a forward computation, replayed in reverse by
/// [`Tape::backward`].
///
/// A tape is single-use: after `backward` the intermediate values are
/// released and only leaf values and gradients remain readable.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    spent: bool,
    visited: usize,
    fault: Option<OpKind>,
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

    pub fn is_spent(&self) -> bool {
        self.spent
    }

    /// Kinds of every recorded node, in recording order.
    pub fn recorded_ops(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.kind).collect()
    }

    /// Number of nodes whose backward rule ran in the last backward pass.
    pub fn last_backward_visits(&self) -> usize {
        self.visited
    }

    /// Corrupts the backward rule of one primitive kind (input gradients
    /// scaled by 1.5). Used as a negative control for gradient checks.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let mut value = tensor;
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            kind: OpKind::Leaf,
            inputs: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Copy of `a` cut off from the graph (stop-gradient).
    pub fn detach(&mut self, a: Var) -> Var {
        let value = Tensor::from_parts(self.shape(a).to_vec(), self.value(a).values().to_vec());
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Tape::backward`]; zero for unused leaves.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// The kind of the node behind `v`.
    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].kind
    }

    pub(crate) fn ensure_live(&self) -> Result<()> {
        if self.spent {
            Err(AutodiffError::TapeSpent)
        } else {
            Ok(())
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let kind = op.kind();
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            kind,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// First recorded node holding a NaN or infinity, by kind.
    pub fn first_non_finite(&self) -> Option<OpKind> {
        self.nodes
            .iter()
            .find(|n| n.value.values().iter().any(|x| !x.is_finite()))
            .map(|n| n.kind)
    }

    /// Which side of its kink every ReLU and absolute-value input sits on.
    ///
    /// Two evaluations with equal signatures lie in the same smooth piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if matches!(node.kind, OpKind::Relu | OpKind::Abs) {
                let input = &self.nodes[node.inputs[0].0].value;
                sig.extend(input.values().iter().map(|&x| x > 0.0));
                if node.kind == OpKind::Abs {
                    sig.extend(input.values().iter().map(|&x| x == 0.0));
                }
            }
        }
        sig
    }

    /// Reverse sweep from a scalar `loss`, populating every grad-requiring
    /// leaf. Intermediate values are released afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.ensure_live()?;
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_shape));
        }
        let n = self.nodes.len();
        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; n];
        adjoint[loss.0] = Some(vec![1.0]);
        let mut visited = 0;

        for i in (0..=loss.0).rev() {
            let Some(g) = adjoint[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                adjoint[i] = Some(g);
                continue;
            }
            visited += 1;
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let mut grads = op_backward(&node.op, &node.value, &inputs, &needs, &g)?;
            if self.fault == Some(node.kind) {
                for gi in grads.iter_mut().flatten() {
                    gi.iter_mut().for_each(|x| *x *= 1.5);
                }
            }
            for (input, gi) in node.inputs.iter().zip(grads) {
                let Some(gi) = gi else { continue };
                match &mut adjoint[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            match node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        let g = adjoint[i]
                            .take()
                            .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                        node.value.set_grad(g)?;
                    }
                }
                _ => {
                    node.value.release();
                    node.op = Op::Released;
                }
            }
        }
        self.visited = visited;
        self.spent = true;
        Ok(())
    }
}
