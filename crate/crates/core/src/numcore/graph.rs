use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn};
use super::{NumError, Tensor};

/// Segment id that drops a row in [`Graph::segment_sum`].
pub const SKIP: usize = usize::MAX;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    ScaleRows(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    LeakyRelu(NodeId, f64),
    Log(NodeId),
    LogSigmoid(NodeId),
    Softmax {
        input: NodeId,
        groups: Arc<[usize]>,
        n_groups: usize,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Dot(NodeId, NodeId),
    RowDot(NodeId, NodeId),
    Sum(NodeId),
    Norm(NodeId),
    Gather {
        input: NodeId,
        index: Arc<[usize]>,
    },
    SegmentSum {
        input: NodeId,
        segments: Arc<[usize]>,
        n_out: usize,
    },
    Select {
        input: NodeId,
        index: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::ScaleRows(..) => "scale_rows",
            Op::Scale(..) => "scale",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Log(..) => "log",
            Op::LogSigmoid(..) => "log_sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Dot(..) => "dot",
            Op::RowDot(..) => "row_dot",
            Op::Sum(..) => "sum",
            Op::Norm(..) => "norm",
            Op::Gather { .. } => "gather",
            Op::SegmentSum { .. } => "segment_sum",
            Op::Select { .. } => "select",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::ScaleRows(a, b)
            | Op::Dot(a, b)
            | Op::RowDot(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::LeakyRelu(a, _)
            | Op::Log(a)
            | Op::LogSigmoid(a)
            | Op::Sum(a)
            | Op::Norm(a) => vec![*a],
            Op::Softmax { input, .. }
            | Op::Gather { input, .. }
            | Op::SegmentSum { input, .. }
            | Op::Select { input, .. } => vec![*input],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    requires_grad: bool,
}

/// A recorded computation. Nodes are appended in topological order; values
/// are computed lazily by [`Graph::forward`] and cached until a leaf changes.
///
/// A graph is owned by one thread at a time. Independent graphs built over
/// the same parameter snapshot can be evaluated concurrently.
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    /// Gradient for `leaf`. Panics if `leaf` is not a trainable leaf of the
    /// graph the gradients came from.
    pub fn get(&self, leaf: NodeId) -> &Tensor {
        self.grads
            .get(&leaf)
            .unwrap_or_else(|| panic!("no gradient recorded for node {}", leaf.0))
    }

    pub fn try_get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    pub fn take(&mut self, leaf: NodeId) -> Option<Tensor> {
        self.grads.remove(&leaf)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.grads.iter()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient from [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Some(value),
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf: no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Some(value),
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Replaces a leaf value and invalidates the cached values that depend on it.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<(), NumError> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(NumError::NotALeaf(id.0));
        }
        node.value = Some(value);
        // nodes are stored in topological order
        let mut dirty = vec![false; self.nodes.len()];
        dirty[id.0] = true;
        for i in id.0 + 1..self.nodes.len() {
            if self.nodes[i].op.inputs().iter().any(|x| dirty[x.0]) {
                dirty[i] = true;
                self.nodes[i].value = None;
            }
        }
        Ok(())
    }

    pub fn is_trainable_leaf(&self, id: NodeId) -> bool {
        let n = &self.nodes[id.0];
        matches!(n.op, Op::Leaf) && n.requires_grad
    }

    /// Cached value of a node; `None` before it has been evaluated.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].value.as_ref()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// `a * b^T` for row-major `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    /// Adds vector `b: [n]` to every row of `a: [m, n]`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::AddRow(a, b))
    }

    /// Multiplies row `i` of `a: [m, n]` by `s[i]`.
    pub fn scale_rows(&mut self, a: NodeId, s: NodeId) -> NodeId {
        self.push(Op::ScaleRows(a, s))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.push(Op::LeakyRelu(a, slope))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    /// Numerically stable `ln σ(x)`.
    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSigmoid(a))
    }

    /// Softmax of a vector, normalised independently within each group.
    /// `groups[i]` is the group of element `i`.
    pub fn softmax(&mut self, a: NodeId, groups: Arc<[usize]>, n_groups: usize) -> NodeId {
        self.push(Op::Softmax {
            input: a,
            groups,
            n_groups,
        })
    }

    /// Plain softmax over a whole vector.
    pub fn softmax_all(&mut self, a: NodeId, len: usize) -> NodeId {
        self.softmax(a, vec![0; len].into(), 1)
    }

    /// Concatenation along axis 0 (rows, or vector elements) or axis 1 (columns).
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> NodeId {
        self.push(Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        })
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Dot(a, b))
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::RowDot(a, b))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Norm(a))
    }

    /// Row gather: output row `j` is input row `index[j]`.
    pub fn gather(&mut self, a: NodeId, index: Arc<[usize]>) -> NodeId {
        self.push(Op::Gather { input: a, index })
    }

    /// Scatter-add of rows into `n_out` segments; rows tagged [`SKIP`] are dropped.
    pub fn segment_sum(&mut self, a: NodeId, segments: Arc<[usize]>, n_out: usize) -> NodeId {
        self.push(Op::SegmentSum {
            input: a,
            segments,
            n_out,
        })
    }

    /// Slice `index` along the first axis.
    pub fn select(&mut self, a: NodeId, index: usize) -> NodeId {
        self.push(Op::Select { input: a, index })
    }

    /// Evaluates `root` and everything it depends on. Values cached from an
    /// earlier call are reused; each stale node is computed exactly once.
    pub fn forward(&mut self, root: NodeId) -> Result<&Tensor, NumError> {
        let needed = self.ancestors(root);
        for i in 0..=root.0 {
            if !needed[i] || self.nodes[i].value.is_some() {
                continue;
            }
            let out = self.compute(i)?;
            if !out.is_finite() {
                return Err(NumError::NonFinite {
                    op: self.nodes[i].op.name(),
                    node: i,
                });
            }
            self.nodes[i].value = Some(out);
        }
        Ok(self.nodes[root.0].value.as_ref().expect("root evaluated"))
    }

    fn ancestors(&self, root: NodeId) -> Vec<bool> {
        let mut needed = vec![false; root.0 + 1];
        needed[root.0] = true;
        for i in (0..=root.0).rev() {
            if needed[i] {
                for inp in self.nodes[i].op.inputs() {
                    needed[inp.0] = true;
                }
            }
        }
        needed
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("inputs are evaluated before their consumers")
    }

    fn compute(&self, i: usize) -> Result<Tensor, NumError> {
        let op = &self.nodes[i].op;
        let shape_err = |detail: String| NumError::ShapeMismatch {
            op: op.name(),
            node: i,
            detail,
        };
        let out = match op {
            Op::Leaf => unreachable!("leaves always hold a value"),
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.rank() != 2 || !(1..=2).contains(&b.rank()) || a.shape()[1] != b.shape()[0] {
                    return Err(shape_err(format!("{:?} x {:?}", a.shape(), b.shape())));
                }
                let (m, k) = (a.shape()[0], a.shape()[1]);
                if b.rank() == 1 {
                    let mut c = vec![0.0; m];
                    gemm_nn(a.data(), b.data(), &mut c, m, k, 1);
                    Tensor::vector(c)
                } else {
                    let n = b.shape()[1];
                    let mut c = vec![0.0; m * n];
                    gemm_nn(a.data(), b.data(), &mut c, m, k, n);
                    Tensor::new(vec![m, n], c)?
                }
            }
            Op::MatMulT(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
                    return Err(shape_err(format!("{:?} x {:?}^T", a.shape(), b.shape())));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
                let mut c = vec![0.0; m * n];
                gemm_nt(a.data(), b.data(), &mut c, m, k, n);
                Tensor::new(vec![m, n], c)?
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if x.shape() != y.shape() {
                    return Err(shape_err(format!("{:?} vs {:?}", x.shape(), y.shape())));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |p, q| p + q,
                    Op::Sub(..) => |p, q| p - q,
                    _ => |p, q| p * q,
                };
                let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
                Tensor::new(x.shape().to_vec(), data)?
            }
            Op::AddRow(a, b) => {
                let (x, r) = (self.val(*a), self.val(*b));
                let n = x.cols();
                if r.rank() != 1 || r.len() != n || x.rank() != 2 {
                    return Err(shape_err(format!("{:?} + row {:?}", x.shape(), r.shape())));
                }
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(n.max(1)) {
                    for (o, v) in row.iter_mut().zip(r.data()) {
                        *o += v;
                    }
                }
                out
            }
            Op::ScaleRows(a, s) => {
                let (x, s) = (self.val(*a), self.val(*s));
                if x.rank() != 2 || s.rank() != 1 || s.len() != x.rows() {
                    return Err(shape_err(format!("{:?} scaled by {:?}", x.shape(), s.shape())));
                }
                let n = x.cols();
                let mut out = x.clone();
                for (r, &c) in s.data().iter().enumerate() {
                    for v in &mut out.data_mut()[r * n..(r + 1) * n] {
                        *v *= c;
                    }
                }
                out
            }
            Op::Scale(a, c) => self.val(*a).map(|v| v * c),
            Op::Tanh(a) => self.val(*a).map(f64::tanh),
            Op::Sigmoid(a) => self.val(*a).map(sigmoid),
            Op::LeakyRelu(a, s) => {
                let s = *s;
                self.val(*a).map(|v| if v > 0.0 { v } else { s * v })
            }
            Op::Log(a) => {
                let x = self.val(*a);
                if let Some(bad) = x.data().iter().find(|v| **v <= 0.0) {
                    return Err(NumError::Domain {
                        op: "log",
                        node: i,
                        value: *bad,
                    });
                }
                x.map(f64::ln)
            }
            Op::LogSigmoid(a) => self.val(*a).map(log_sigmoid),
            Op::Softmax {
                input,
                groups,
                n_groups,
            } => {
                let x = self.val(*input);
                if x.rank() != 1 || groups.len() != x.len() {
                    return Err(shape_err(format!(
                        "input {:?} with {} group labels",
                        x.shape(),
                        groups.len()
                    )));
                }
                if let Some(g) = groups.iter().find(|g| **g >= *n_groups) {
                    return Err(shape_err(format!("group {g} >= {n_groups}")));
                }
                let mut max = vec![f64::NEG_INFINITY; *n_groups];
                for (v, &g) in x.data().iter().zip(groups.iter()) {
                    max[g] = max[g].max(*v);
                }
                let mut denom = vec![0.0; *n_groups];
                let mut e: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(groups.iter())
                    .map(|(v, &g)| {
                        let ev = (v - max[g]).exp();
                        denom[g] += ev;
                        ev
                    })
                    .collect();
                for (ev, &g) in e.iter_mut().zip(groups.iter()) {
                    *ev /= denom[g];
                }
                Tensor::vector(e)
            }
            Op::Concat { inputs, axis } => {
                let parts: Vec<&Tensor> = inputs.iter().map(|i| self.val(*i)).collect();
                concat(&parts, *axis).map_err(shape_err)?
            }
            Op::Dot(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if x.len() != y.len() {
                    return Err(shape_err(format!("{:?} . {:?}", x.shape(), y.shape())));
                }
                Tensor::scalar(x.dot(y))
            }
            Op::RowDot(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if x.shape() != y.shape() || x.rank() != 2 {
                    return Err(shape_err(format!("{:?} vs {:?}", x.shape(), y.shape())));
                }
                let n = x.cols();
                let out = (0..x.rows())
                    .map(|r| {
                        x.data()[r * n..(r + 1) * n]
                            .iter()
                            .zip(&y.data()[r * n..(r + 1) * n])
                            .map(|(p, q)| p * q)
                            .sum()
                    })
                    .collect();
                Tensor::vector(out)
            }
            Op::Sum(a) => Tensor::scalar(self.val(*a).data().iter().sum()),
            Op::Norm(a) => Tensor::scalar(self.val(*a).norm()),
            Op::Gather { input, index } => {
                let x = self.val(*input);
                if x.rank() == 0 {
                    return Err(shape_err("gather from a scalar".into()));
                }
                let rows = x.rows();
                let c = x.cols();
                let mut data = Vec::with_capacity(index.len() * c);
                for &r in index.iter() {
                    if r >= rows {
                        return Err(shape_err(format!("row {r} out of {rows}")));
                    }
                    data.extend_from_slice(&x.data()[r * c..(r + 1) * c]);
                }
                let mut shape = x.shape().to_vec();
                shape[0] = index.len();
                Tensor::new(shape, data)?
            }
            Op::SegmentSum {
                input,
                segments,
                n_out,
            } => {
                let x = self.val(*input);
                if x.rank() == 0 || segments.len() != x.rows() {
                    return Err(shape_err(format!(
                        "{:?} with {} segment labels",
                        x.shape(),
                        segments.len()
                    )));
                }
                let c = x.cols();
                let mut shape = x.shape().to_vec();
                shape[0] = *n_out;
                let mut out = Tensor::zeros(&shape);
                for (r, &s) in segments.iter().enumerate() {
                    if s == SKIP {
                        continue;
                    }
                    if s >= *n_out {
                        return Err(shape_err(format!("segment {s} >= {n_out}")));
                    }
                    let src = &x.data()[r * c..(r + 1) * c];
                    for (o, v) in out.data_mut()[s * c..(s + 1) * c].iter_mut().zip(src) {
                        *o += v;
                    }
                }
                out
            }
            Op::Select { input, index } => {
                let x = self.val(*input);
                if x.rank() == 0 || *index >= x.shape()[0] {
                    return Err(shape_err(format!("select {index} from {:?}", x.shape())));
                }
                x.slice0(*index)
            }
        };
        Ok(out)
    }

    /// Reverse-mode sweep from `root`, seeded with ones. Gradients accumulate
    /// additively over every use of a leaf; trainable leaves that `root` does
    /// not depend on receive zeros. Cached forward values are left untouched.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, NumError> {
        let root_val = self.nodes[root.0]
            .value
            .as_ref()
            .ok_or(NumError::BackwardBeforeForward(root.0))?;
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_val.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            if !node.requires_grad {
                continue;
            }
            self.backprop(i, &g, &mut grads)?;
        }

        let mut out = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf) && n.requires_grad {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(n.value.as_ref().expect("leaf").shape()));
                out.insert(NodeId(i), g);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), NumError> {
        let node = &self.nodes[i];
        let out = node.value.as_ref().ok_or(NumError::BackwardBeforeForward(i))?;
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let acc = |id: NodeId, t: Tensor, grads: &mut [Option<Tensor>]| match &mut grads[id.0] {
            Some(existing) => existing.axpy(1.0, &t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = if bv.rank() == 1 { 1 } else { bv.shape()[1] };
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g.data(), bv.data(), &mut da, m, n, k);
                    acc(*a, Tensor::new(av.shape().to_vec(), da)?, grads);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(av.data(), g.data(), &mut db, m, k, n);
                    acc(*b, Tensor::new(bv.shape().to_vec(), db)?, grads);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(g.data(), bv.data(), &mut da, m, n, k);
                    acc(*a, Tensor::new(av.shape().to_vec(), da)?, grads);
                }
                if wants(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(g.data(), av.data(), &mut db, m, n, k);
                    acc(*b, Tensor::new(bv.shape().to_vec(), db)?, grads);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone(), grads);
                }
                if wants(*b) {
                    acc(*b, g.clone(), grads);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone(), grads);
                }
                if wants(*b) {
                    acc(*b, g.map(|v| -v), grads);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if wants(*a) {
                    acc(*a, zip_map(g, bv, |x, y| x * y), grads);
                }
                if wants(*b) {
                    acc(*b, zip_map(g, av, |x, y| x * y), grads);
                }
            }
            Op::AddRow(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone(), grads);
                }
                if wants(*b) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n.max(1)) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::vector(db), grads);
                }
            }
            Op::ScaleRows(a, s) => {
                let (av, sv) = (self.val(*a), self.val(*s));
                let n = av.cols();
                if wants(*a) {
                    let mut da = g.clone();
                    for (r, &c) in sv.data().iter().enumerate() {
                        for v in &mut da.data_mut()[r * n..(r + 1) * n] {
                            *v *= c;
                        }
                    }
                    acc(*a, da, grads);
                }
                if wants(*s) {
                    let ds = (0..sv.len())
                        .map(|r| {
                            g.data()[r * n..(r + 1) * n]
                                .iter()
                                .zip(&av.data()[r * n..(r + 1) * n])
                                .map(|(p, q)| p * q)
                                .sum()
                        })
                        .collect();
                    acc(*s, Tensor::vector(ds), grads);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(*a, g.map(|v| v * c), grads);
            }
            Op::Tanh(a) => acc(*a, zip_map(g, out, |d, y| d * (1.0 - y * y)), grads),
            Op::Sigmoid(a) => acc(*a, zip_map(g, out, |d, y| d * y * (1.0 - y)), grads),
            Op::LeakyRelu(a, s) => {
                let s = *s;
                let x = self.val(*a);
                acc(*a, zip_map(g, x, |d, v| if v > 0.0 { d } else { d * s }), grads);
            }
            Op::Log(a) => acc(*a, zip_map(g, self.val(*a), |d, v| d / v), grads),
            Op::LogSigmoid(a) => {
                acc(*a, zip_map(g, self.val(*a), |d, v| d * sigmoid(-v)), grads);
            }
            Op::Softmax {
                input,
                groups,
                n_groups,
            } => {
                let mut inner = vec![0.0; *n_groups];
                for ((y, d), &grp) in out.data().iter().zip(g.data()).zip(groups.iter()) {
                    inner[grp] += y * d;
                }
                let dx = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .zip(groups.iter())
                    .map(|((y, d), &grp)| y * (d - inner[grp]))
                    .collect();
                acc(*input, Tensor::vector(dx), grads);
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for inp in inputs {
                        let v = self.val(*inp);
                        let len = v.len();
                        if wants(*inp) {
                            let part = Tensor::new(
                                v.shape().to_vec(),
                                g.data()[offset..offset + len].to_vec(),
                            )?;
                            acc(*inp, part, grads);
                        }
                        offset += len;
                    }
                } else {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut col = 0;
                    for inp in inputs {
                        let v = self.val(*inp);
                        let c = v.cols();
                        if wants(*inp) {
                            let mut part = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                part.extend_from_slice(&g.data()[r * total + col..r * total + col + c]);
                            }
                            acc(*inp, Tensor::new(v.shape().to_vec(), part)?, grads);
                        }
                        col += c;
                    }
                }
            }
            Op::Dot(a, b) => {
                let d = g.item();
                let (av, bv) = (self.val(*a), self.val(*b));
                if wants(*a) {
                    acc(*a, bv.map(|v| v * d), grads);
                }
                if wants(*b) {
                    acc(*b, av.map(|v| v * d), grads);
                }
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let n = av.cols();
                let scale = |src: &Tensor| {
                    let mut t = src.clone();
                    for (r, d) in g.data().iter().enumerate() {
                        for v in &mut t.data_mut()[r * n..(r + 1) * n] {
                            *v *= d;
                        }
                    }
                    t
                };
                if wants(*a) {
                    acc(*a, scale(bv), grads);
                }
                if wants(*b) {
                    acc(*b, scale(av), grads);
                }
            }
            Op::Sum(a) => {
                let d = g.item();
                acc(*a, Tensor::full(self.val(*a).shape(), d), grads);
            }
            Op::Norm(a) => {
                let d = g.item();
                let n = out.item();
                let x = self.val(*a);
                let t = if n > 0.0 { x.map(|v| d * v / n) } else { Tensor::zeros(x.shape()) };
                acc(*a, t, grads);
            }
            Op::Gather { input, index } => {
                let x = self.val(*input);
                let c = x.cols();
                let mut dx = Tensor::zeros(x.shape());
                for (j, &r) in index.iter().enumerate() {
                    let src = &g.data()[j * c..(j + 1) * c];
                    for (o, v) in dx.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src) {
                        *o += v;
                    }
                }
                acc(*input, dx, grads);
            }
            Op::SegmentSum {
                input, segments, ..
            } => {
                let x = self.val(*input);
                let c = x.cols();
                let mut dx = Tensor::zeros(x.shape());
                for (r, &s) in segments.iter().enumerate() {
                    if s == SKIP {
                        continue;
                    }
                    dx.data_mut()[r * c..(r + 1) * c].copy_from_slice(&g.data()[s * c..(s + 1) * c]);
                }
                acc(*input, dx, grads);
            }
            Op::Select { input, index } => {
                let x = self.val(*input);
                let inner = g.len();
                let mut dx = Tensor::zeros(x.shape());
                dx.data_mut()[index * inner..(index + 1) * inner].copy_from_slice(g.data());
                acc(*input, dx, grads);
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor, String> {
    let first = parts.first().ok_or("concat of nothing")?;
    match axis {
        0 => {
            let trailing = &first.shape()[1.min(first.rank())..];
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                if p.rank() != first.rank() || &p.shape()[1.min(p.rank())..] != trailing {
                    return Err(format!("{:?} vs {:?}", first.shape(), p.shape()));
                }
                rows += p.shape().first().copied().unwrap_or(1);
                data.extend_from_slice(p.data());
            }
            let mut shape = first.shape().to_vec();
            if shape.is_empty() {
                shape.push(rows);
            } else {
                shape[0] = rows;
            }
            Tensor::new(shape, data).map_err(|e| e.to_string())
        }
        1 => {
            let rows = first.rows();
            if parts.iter().any(|p| p.rank() != 2 || p.rows() != rows) {
                return Err("column concat needs matrices with equal row counts".into());
            }
            let total: usize = parts.iter().map(|p| p.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(p.row(r));
                }
            }
            Tensor::new(vec![rows, total], data).map_err(|e| e.to_string())
        }
        a => Err(format!("unsupported axis {a}")),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}
