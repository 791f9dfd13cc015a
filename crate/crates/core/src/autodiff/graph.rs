use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::rc::Rc;

use super::kernels::{gemm, sigmoid};
use super::{Array, AutodiffError};

/// Index of a node inside its [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed linear map applied to a node value (framing, fixed bases).
///
/// Implementations must provide the exact transpose so gradients are
/// `mapᵀ · g`.
pub trait LinearMap {
    fn name(&self) -> &'static str;
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, AutodiffError>;
    fn apply(&self, input: &[f64], output: &mut [f64]);
    /// Accumulates `mapᵀ · cotangent` into `grad_input`.
    fn apply_transpose(&self, cotangent: &[f64], grad_input: &mut [f64]);
}

/// An opaque differentiable function with a hand-written vector-Jacobian
/// product. Used for recomputation-based checkpointing of reverse steps.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Array]) -> Result<Array, AutodiffError>;
    /// Returns one cotangent per input, each shaped like that input.
    fn vjp(
        &self,
        inputs: &[&Array],
        output: &Array,
        cotangent: &Array,
    ) -> Result<Vec<Array>, AutodiffError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Silu,
}

#[derive(Clone)]
pub enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId, f64),
    MatMul(NodeId, NodeId),
    Activation(NodeId, Activation),
    Sum(NodeId),
    Mean(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Linear(NodeId, Rc<dyn LinearMap>),
    Custom(Vec<NodeId>, Rc<dyn CustomOp>),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul(..) => "matmul",
            Op::Activation(_, Activation::Tanh) => "tanh",
            Op::Activation(_, Activation::Silu) => "silu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::Linear(_, m) => m.name(),
            Op::Custom(_, c) => c.name(),
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Shift(a, _)
            | Op::Activation(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Log(a)
            | Op::Abs(a)
            | Op::Linear(a, _) => vec![*a],
            Op::Custom(inputs, _) => inputs.clone(),
        }
    }
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:?}", self.kind(), self.parents())
    }
}

struct Node {
    op: Op,
    value: Array,
}

/// Gradients of a scalar root with respect to the requested leaves.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<NodeId, Array>,
}

impl GradientMap {
    pub fn get(&self, leaf: NodeId) -> Option<&Array> {
        self.grads.get(&leaf)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.grads.keys().copied()
    }

    pub fn into_inner(self) -> BTreeMap<NodeId, Array> {
        self.grads
    }
}

/// Define-by-run expression graph.
///
/// Nodes are appended in topological order and their values are computed
/// eagerly. Leaves can be rebound with [`Graph::set_leaf`] and the graph
/// re-run with [`Graph::evaluate`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Shape rule for elementwise binary ops: identical shapes, or a rhs that
/// matches the trailing dimension of a 2-D lhs (row broadcast, used for
/// bias vectors).
fn binary_shape(op: &'static str, a: &Array, b: &Array) -> Result<(), AutodiffError> {
    if a.shape() == b.shape() {
        return Ok(());
    }
    Err(AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })
}

fn is_row_broadcast(a: &Array, b: &Array) -> bool {
    a.shape().len() == 2 && b.shape().len() == 1 && a.shape()[1] == b.shape()[0]
}

/// Interprets operands of a matmul as `m×k` and `k×n` matrices; 1-D lhs is a
/// row vector and yields a 1-D output.
fn matmul_dims(a: &Array, b: &Array) -> Result<(usize, usize, usize, Vec<usize>), AutodiffError> {
    let mismatch = || AutodiffError::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if b.shape().len() != 2 {
        return Err(mismatch());
    }
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    match a.shape() {
        [k] if *k == k2 => Ok((1, *k, n, vec![n])),
        [m, k] if *k == k2 => Ok((*m, *k, n, vec![*m, n])),
        _ => Err(mismatch()),
    }
}

fn forward(op: &Op, nodes: &[Node]) -> Result<Array, AutodiffError> {
    let val = |id: &NodeId| &nodes[id.0].value;
    let elementwise = |a: &Array, f: &dyn Fn(f64) -> f64| a.map(f);
    let out = match op {
        Op::Leaf => unreachable!("leaves are bound, not computed"),
        Op::Add(a, b) | Op::Sub(a, b) => {
            let (a, b) = (val(a), val(b));
            let sign = if matches!(op, Op::Add(..)) { 1.0 } else { -1.0 };
            if is_row_broadcast(a, b) {
                let cols = b.len();
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + sign * b.data()[i % cols])
                    .collect();
                Array::new(a.shape().to_vec(), data)?
            } else {
                binary_shape(op.kind(), a, b)?;
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| x + sign * y)
                    .collect();
                Array::new(a.shape().to_vec(), data)?
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let (a, b) = (val(a), val(b));
            binary_shape(op.kind(), a, b)?;
            let data = if matches!(op, Op::Mul(..)) {
                a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect()
            } else {
                a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect()
            };
            Array::new(a.shape().to_vec(), data)?
        }
        Op::Scale(a, c) => elementwise(val(a), &|x| c * x),
        Op::Shift(a, c) => elementwise(val(a), &|x| x + c),
        Op::MatMul(a, b) => {
            let (a, b) = (val(a), val(b));
            let (m, k, n, shape) = matmul_dims(a, b)?;
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
            Array::new(shape, out)?
        }
        Op::Activation(a, Activation::Tanh) => elementwise(val(a), &f64::tanh),
        Op::Activation(a, Activation::Silu) => elementwise(val(a), &|x| x * sigmoid(x)),
        Op::Sum(a) => Array::scalar(val(a).data().iter().sum()),
        Op::Mean(a) => {
            let a = val(a);
            Array::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
        }
        Op::Square(a) => elementwise(val(a), &|x| x * x),
        Op::Sqrt(a) => elementwise(val(a), &f64::sqrt),
        Op::Log(a) => elementwise(val(a), &f64::ln),
        Op::Abs(a) => elementwise(val(a), &f64::abs),
        Op::Linear(a, map) => {
            let a = val(a);
            let shape = map.output_shape(a.shape())?;
            let mut out = vec![0.0; shape.iter().product()];
            map.apply(a.data(), &mut out);
            Array::new(shape, out)?
        }
        Op::Custom(inputs, custom) => {
            let args: Vec<&Array> = inputs.iter().map(val).collect();
            custom.forward(&args)?
        }
    };
    if !out.all_finite() {
        return Err(AutodiffError::NonFinite { op: op.kind() });
    }
    Ok(out)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Binds a new leaf. Leaves are the only nodes gradients can target.
    pub fn leaf(&mut self, value: Array) -> Result<NodeId, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Binds a leaf the caller already knows to be finite, such as frozen
    /// weights validated at load time.
    pub(crate) fn trusted_leaf(&mut self, value: Array) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    fn check(&self, id: NodeId) -> Result<(), AutodiffError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(id.0))
        }
    }

    fn push(&mut self, op: Op) -> Result<NodeId, AutodiffError> {
        for p in op.parents() {
            self.check(p)?;
        }
        let value = forward(&op, &self.nodes)?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Div(a, b))
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.push(Op::Scale(a, c))
    }
    pub fn shift(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.push(Op::Shift(a, c))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::MatMul(a, b))
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Activation(a, Activation::Tanh))
    }
    pub fn silu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Activation(a, Activation::Silu))
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Mean(a))
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Square(a))
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Sqrt(a))
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Log(a))
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Abs(a))
    }
    pub fn linear(&mut self, a: NodeId, map: Rc<dyn LinearMap>) -> Result<NodeId, AutodiffError> {
        self.push(Op::Linear(a, map))
    }
    pub fn custom(
        &mut self,
        inputs: &[NodeId],
        op: Rc<dyn CustomOp>,
    ) -> Result<NodeId, AutodiffError> {
        self.push(Op::Custom(inputs.to_vec(), op))
    }

    /// Rebinds a leaf value; downstream values are stale until
    /// [`Graph::evaluate`] runs.
    pub fn set_leaf(&mut self, leaf: NodeId, value: Array) -> Result<(), AutodiffError> {
        self.check(leaf)?;
        let node = &mut self.nodes[leaf.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(AutodiffError::NotALeaf(leaf.0));
        }
        if node.value.shape() != value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "set_leaf",
                lhs: node.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        node.value = value;
        Ok(())
    }

    /// Recomputes every non-leaf node up to and including `root` from the
    /// current leaf bindings and returns the root value.
    pub fn evaluate(&mut self, root: NodeId) -> Result<Array, AutodiffError> {
        self.check(root)?;
        for i in 0..=root.0 {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = forward(&self.nodes[i].op, &self.nodes[..i])?;
            self.nodes[i].value = value;
        }
        Ok(self.nodes[root.0].value.clone())
    }

    /// Reverse-mode gradients of a scalar `root` with respect to `wrt`.
    pub fn backward(&self, root: NodeId, wrt: &[NodeId]) -> Result<GradientMap, AutodiffError> {
        self.check(root)?;
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(root_value.shape().to_vec()));
        }
        self.backward_with_cotangent(root, &Array::filled(root_value.shape(), 1.0), wrt)
    }

    /// Vector-Jacobian product: propagates `cotangent` (shaped like `root`)
    /// back to the leaves in `wrt`.
    pub fn backward_with_cotangent(
        &self,
        root: NodeId,
        cotangent: &Array,
        wrt: &[NodeId],
    ) -> Result<GradientMap, AutodiffError> {
        self.check(root)?;
        if cotangent.shape() != self.nodes[root.0].value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "backward",
                lhs: self.nodes[root.0].value.shape().to_vec(),
                rhs: cotangent.shape().to_vec(),
            });
        }
        let targets: BTreeSet<NodeId> = wrt.iter().copied().collect();
        for &leaf in &targets {
            self.check(leaf)?;
            if !matches!(self.nodes[leaf.0].op, Op::Leaf) {
                return Err(AutodiffError::NotALeaf(leaf.0));
            }
        }

        // Only nodes downstream of a requested leaf carry gradient.
        let mut live = vec![false; root.0 + 1];
        for i in 0..=root.0 {
            live[i] = targets.contains(&NodeId(i))
                || self.nodes[i].op.parents().iter().any(|p| live[p.0]);
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if live[root.0] {
            grads[root.0] = Some(cotangent.to_vec());
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if targets.contains(&NodeId(i)) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &live, &mut grads)?;
        }

        let mut out = BTreeMap::new();
        for &leaf in &targets {
            let shape = self.nodes[leaf.0].value.shape().to_vec();
            let value = match grads.get_mut(leaf.0).and_then(Option::take) {
                Some(g) => Array::new(shape, g)?,
                None => Array::zeros(&shape),
            };
            out.insert(leaf, value);
        }
        Ok(GradientMap { grads: out })
    }

    fn propagate(
        &self,
        i: usize,
        g: &[f64],
        live: &[bool],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<(), AutodiffError> {
        let node = &self.nodes[i];
        let val = |id: &NodeId| &self.nodes[id.0].value;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !live[id.0] {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Add(..)) { 1.0 } else { -1.0 };
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                let broadcast = is_row_broadcast(val(a), val(b));
                let cols = val(b).len();
                acc(*b, &mut |s| {
                    if broadcast {
                        for (idx, gv) in g.iter().enumerate() {
                            s[idx % cols] += sign * gv;
                        }
                    } else {
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += sign * g);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * av[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / bv[k];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)),
            Op::Shift(a, _) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::MatMul(a, b) => {
                let (m, k, n, _) = matmul_dims(val(a), val(b))?;
                let (av, bv) = (val(a).data(), val(b).data());
                // dA = G · Bᵀ, dB = Aᵀ · G
                acc(*a, &mut |s| gemm(m, n, k, g, false, bv, true, s, true));
                acc(*b, &mut |s| gemm(k, m, n, av, true, g, false, s, true));
            }
            Op::Activation(a, act) => {
                let (x, y) = (val(a).data(), node.value.data());
                let act = *act;
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        let d = match act {
                            Activation::Tanh => 1.0 - y[k] * y[k],
                            Activation::Silu => {
                                let sg = sigmoid(x[k]);
                                sg * (1.0 + x[k] * (1.0 - sg))
                            }
                        };
                        s[k] += g[k] * d;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = val(a).len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n))
            }
            Op::Square(a) => {
                let x = val(a).data();
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += 2.0 * x[k] * g[k];
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / (2.0 * y[k]);
                    }
                });
            }
            Op::Log(a) => {
                let x = val(a).data();
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / x[k];
                    }
                });
            }
            Op::Abs(a) => {
                let x = val(a).data();
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        let sign = if x[k] > 0.0 {
                            1.0
                        } else if x[k] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        s[k] += sign * g[k];
                    }
                });
            }
            Op::Linear(a, map) => acc(*a, &mut |s| map.apply_transpose(g, s)),
            Op::Custom(inputs, custom) => {
                if inputs.iter().any(|p| live[p.0]) {
                    let args: Vec<&Array> = inputs.iter().map(val).collect();
                    let cot = Array::new(node.value.shape().to_vec(), g.to_vec())?;
                    let parts = custom.vjp(&args, &node.value, &cot)?;
                    for (input, part) in inputs.iter().zip(parts) {
                        let pd = part.data();
                        acc(*input, &mut |s| s.iter_mut().zip(pd).for_each(|(s, p)| *s += p));
                    }
                }
            }
        }
        Ok(())
    }
}
