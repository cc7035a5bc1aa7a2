//! Dense f32 tensors and a tape-based reverse-mode autodiff engine.
//!
//! Every operation appends a node to a [`Graph`]; because inputs always
//! precede outputs, node order is already topological and a single reverse
//! sweep over the tape propagates gradients. All arithmetic is f32 and
//! single-threaded, so identical inputs produce bit-identical outputs and
//! gradients.

mod attention;
mod conv;
mod cosine;
mod elementwise;
mod linalg;
mod norm;
mod reduce;
mod shape;

use std::error::Error as StdError;
use std::fmt;

/// Errors raised by tensor construction and graph operations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TensorError {
    /// Operand shapes are incompatible; `detail` names the offending dims.
    Shape { op: &'static str, detail: String },
    /// A structural parameter (head count, eps, lambda, ...) is invalid.
    Config { op: &'static str, detail: String },
    /// Numerically degenerate input, e.g. a zero-norm embedding.
    Degenerate { op: &'static str, detail: String },
    /// The operation was called in a state it does not support.
    InvalidCall { op: &'static str, detail: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::Shape { op, detail } => write!(f, "{op}: invalid shape: {detail}"),
            TensorError::Config { op, detail } => write!(f, "{op}: invalid config: {detail}"),
            TensorError::Degenerate { op, detail } => {
                write!(f, "{op}: degenerate input: {detail}")
            }
            TensorError::InvalidCall { op, detail } => write!(f, "{op}: invalid call: {detail}"),
        }
    }
}

impl StdError for TensorError {}

/// An n-dimensional f32 array, row-major, with an optional gradient buffer.
///
/// An empty `dims` list denotes a scalar (one element).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    /// Build a tensor from dims and row-major data. Rejects zero-sized dims
    /// and any length mismatch between `data` and `product(dims)`.
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(TensorError::Shape {
                op: "Tensor::new",
                detail: format!("dims must be positive, got {dims:?}"),
            });
        }
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(TensorError::Shape {
                op: "Tensor::new",
                detail: format!("data length {} != product of dims {:?} = {}", data.len(), dims, n),
            });
        }
        Ok(Tensor { dims, data, requires_grad: false, grad: None })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n: usize = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn ones(dims: &[usize]) -> Self {
        Tensor::full(dims, 1.0)
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        let n: usize = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { dims: Vec::new(), data: vec![value], requires_grad: false, grad: None }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    /// Gradient buffer, if one was populated by a backward pass.
    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, factor: f32 },
    AddScalar { a: TensorId },
    Relu { a: TensorId },
    Gelu { a: TensorId },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    Reshape { a: TensorId },
    Permute { a: TensorId, axes: Vec<usize> },
    GlobalAvgPool { a: TensorId },
    Linear { input: TensorId, weight: TensorId, bias: Option<TensorId> },
    MatmulBatched { a: TensorId, b: TensorId },
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    LayerNorm { input: TensorId, gamma: TensorId, beta: TensorId, eps: f32 },
    Softmax { a: TensorId },
    CosineSim { a: TensorId, b: TensorId },
    CosineRowwise { a: TensorId, b: TensorId },
    L2NormalizeRows { a: TensorId },
    SoftmaxCrossEntropy { logits: TensorId, targets: Vec<usize> },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Recorded computation: an append-only tape of tensors and their producing
/// operations. Dropping the graph drops all intermediates; long-lived values
/// (model parameters) are copied in as leaves each step and gradients are
/// read back out by id.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Number of recorded nodes (leaves included).
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Insert a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let mut tensor = tensor;
        tensor.grad = None;
        self.nodes.push(Node { tensor, op: Op::Leaf });
        TensorId(self.nodes.len() - 1)
    }

    /// Insert a tensor as a non-differentiable constant.
    pub fn constant(&mut self, tensor: Tensor) -> TensorId {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn dims(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.dims
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].tensor.data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].tensor.grad()
    }

    /// Copy a node's value out of the graph as a plain tensor.
    pub fn detach(&self, id: TensorId) -> Tensor {
        let t = &self.nodes[id.0].tensor;
        Tensor {
            dims: t.dims.clone(),
            data: t.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn push(&mut self, dims: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            tensor: Tensor { dims, data, requires_grad, grad: None },
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    /// Add `contrib` into the gradient buffer of `id`, allocating it lazily.
    /// No-op for nodes that do not require grad, so gradients never leak
    /// into frozen tensors.
    fn accumulate(&mut self, id: TensorId, contrib: &[f32]) {
        let node = &mut self.nodes[id.0];
        if !node.tensor.requires_grad {
            return;
        }
        let grad = node
            .tensor
            .grad
            .get_or_insert_with(|| vec![0.0; node.tensor.data.len()]);
        debug_assert_eq!(grad.len(), contrib.len());
        for (g, c) in grad.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
    /// across graph fan-out; callers zero grads between steps by building a
    /// fresh graph.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        let node = &self.nodes[loss.0].tensor;
        if node.numel() != 1 {
            return Err(TensorError::InvalidCall {
                op: "backward",
                detail: format!("loss must be a scalar, got dims {:?}", node.dims),
            });
        }
        if !node.requires_grad {
            // Loss is detached from every trainable tensor; nothing to do.
            return Ok(());
        }
        {
            let node = &mut self.nodes[loss.0].tensor;
            let n = node.data.len();
            let grad = node.grad.get_or_insert_with(|| vec![0.0; n]);
            grad[0] += 1.0;
        }
        for idx in (0..=loss.0).rev() {
            self.backward_step(idx);
        }
        Ok(())
    }

    fn backward_step(&mut self, idx: usize) {
        if !self.nodes[idx].tensor.requires_grad {
            return;
        }
        let Some(gout) = self.nodes[idx].tensor.grad.clone() else {
            return; // not on any path to the loss
        };
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(a, &gout);
                self.accumulate(b, &gout);
            }
            Op::Sub { a, b } => {
                self.accumulate(a, &gout);
                let neg: Vec<f32> = gout.iter().map(|g| -g).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul { a, b } => {
                let ga: Vec<f32> =
                    gout.iter().zip(self.data(b)).map(|(g, x)| g * x).collect();
                let gb: Vec<f32> =
                    gout.iter().zip(self.data(a)).map(|(g, x)| g * x).collect();
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::Scale { a, factor } => {
                let ga: Vec<f32> = gout.iter().map(|g| g * factor).collect();
                self.accumulate(a, &ga);
            }
            Op::AddScalar { a } => {
                self.accumulate(a, &gout);
            }
            Op::Relu { a } => self.relu_backward(a, &gout),
            Op::Gelu { a } => self.gelu_backward(a, &gout),
            Op::SumAll { a } => {
                let ga = vec![gout[0]; self.data(a).len()];
                self.accumulate(a, &ga);
            }
            Op::MeanAll { a } => {
                let n = self.data(a).len();
                let ga = vec![gout[0] / n as f32; n];
                self.accumulate(a, &ga);
            }
            Op::Reshape { a } => {
                // Row-major layout is unchanged; the gradient passes through.
                self.accumulate(a, &gout);
            }
            Op::Permute { a, axes } => self.permute_backward(a, &axes, &gout),
            Op::GlobalAvgPool { a } => self.global_avg_pool_backward(a, &gout),
            Op::Linear { input, weight, bias } => {
                self.linear_backward(input, weight, bias, &gout);
            }
            Op::MatmulBatched { a, b } => self.matmul_batched_backward(a, b, &gout),
            Op::Conv2d { input, weight, bias, stride, padding, groups } => {
                self.conv2d_backward(input, weight, bias, stride, padding, groups, &gout);
            }
            Op::LayerNorm { input, gamma, beta, eps } => {
                self.layer_norm_backward(input, gamma, beta, eps, &gout);
            }
            Op::Softmax { a } => self.softmax_backward(idx, a, &gout),
            Op::CosineSim { a, b } => self.cosine_sim_backward(a, b, gout[0]),
            Op::CosineRowwise { a, b } => self.cosine_rowwise_backward(a, b, &gout),
            Op::L2NormalizeRows { a } => self.l2_normalize_rows_backward(idx, a, &gout),
            Op::SoftmaxCrossEntropy { logits, targets } => {
                self.softmax_cross_entropy_backward(logits, &targets, gout[0]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_new_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6][..]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[3]).with_requires_grad(true));
        let y = g.relu(x);
        let err = g.backward(y).unwrap_err();
        assert!(matches!(err, TensorError::InvalidCall { .. }));
    }

    #[test]
    fn detached_loss_leaves_grad_absent() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[4]).with_requires_grad(true));
        let c = g.constant(Tensor::ones(&[4]));
        let loss = g.sum_all(c);
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn no_grad_leakage_through_mixed_ops() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_requires_grad(true));
        let frozen = g.constant(Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap());
        let prod = g.mul(x, frozen).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 5.0, 6.0][..]);
        assert!(g.grad(frozen).is_none());
    }

    #[test]
    fn gradient_accumulates_across_fanout() {
        // loss = sum(x) + sum(x) => grad = 2 everywhere
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[5]).with_requires_grad(true));
        let s1 = g.sum_all(x);
        let s2 = g.sum_all(x);
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 5][..]);
    }
}
