use thiserror::Error;

use super::tensor::{Tensor, TensorError};

/// Guard inside the row-normalization square root; keeps zero rows finite.
pub const L2_NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("{op}: invalid input shape {shape:?}")]
    InvalidShape { op: &'static str, shape: (usize, usize) },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },
    #[error("{op}: slice [{r0}..{r1}, {c0}..{c1}] out of bounds for {shape:?}")]
    InvalidSlice { op: &'static str, r0: usize, r1: usize, c0: usize, c1: usize, shape: (usize, usize) },
    #[error("{op} produced a non-finite value: {source}")]
    NonFinite { op: &'static str, source: TensorError },
    #[error("backward requires a scalar (1x1) root, got {shape:?}")]
    NonScalarRoot { shape: (usize, usize) },
    #[error("layer {layer}: input width {input} does not match weight rows {rows}")]
    DimensionChain { layer: usize, input: usize, rows: usize },
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
}

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// The primitive set. `apply` dispatches on this; typed methods on [`Graph`]
/// are the usual entry points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Matmul,
    Add,
    Mul,
    Relu,
    Exp,
    Log,
    Sum,
    Mean,
    L2NormalizeRows,
    LogSumExpRows,
    SoftmaxRows,
    Transpose,
    Slice { row_start: usize, row_end: usize, col_start: usize, col_end: usize },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::L2NormalizeRows => "l2_normalize_rows",
            Primitive::LogSumExpRows => "log_sum_exp_rows",
            Primitive::SoftmaxRows => "softmax_rows",
            Primitive::Transpose => "transpose",
            Primitive::Slice { .. } => "slice",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    L2NormalizeRows(NodeId),
    LogSumExpRows(NodeId),
    SoftmaxRows(NodeId),
    Transpose(NodeId),
    Slice { input: NodeId, r0: usize, r1: usize, c0: usize, c1: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation graph. Inputs always precede their consumers, so
/// reverse creation order is a valid topological order for backward.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradient map produced by [`Graph::backward`]. Trainable leaves that the
/// root does not depend on hold zero tensors.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf; gradient tracking follows the tensor's flag.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let requires_grad = value.requires_grad();
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Inserts a non-trainable leaf regardless of the tensor's flag.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::filled(1, 1, value))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<(), AutodiffError> {
        if id.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode(id.0));
        }
        Ok(())
    }

    /// Generic dispatch over the primitive set.
    pub fn apply(&mut self, op: Primitive, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let need = match op {
            Primitive::Matmul | Primitive::Add | Primitive::Mul => 2,
            _ => 1,
        };
        if inputs.len() != need {
            return Err(AutodiffError::Arity { op: op.name(), expected: need, got: inputs.len() });
        }
        match op {
            Primitive::Matmul => self.matmul(inputs[0], inputs[1]),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Mul => self.mul(inputs[0], inputs[1]),
            Primitive::Relu => self.relu(inputs[0]),
            Primitive::Exp => self.exp(inputs[0]),
            Primitive::Log => self.log(inputs[0]),
            Primitive::Sum => self.sum(inputs[0]),
            Primitive::Mean => self.mean(inputs[0]),
            Primitive::L2NormalizeRows => self.l2_normalize_rows(inputs[0]),
            Primitive::LogSumExpRows => self.log_sum_exp_rows(inputs[0]),
            Primitive::SoftmaxRows => self.softmax_rows(inputs[0]),
            Primitive::Transpose => self.transpose(inputs[0]),
            Primitive::Slice { row_start, row_end, col_start, col_end } => {
                self.slice(inputs[0], row_start..row_end, col_start..col_end)
            }
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.value(a).shape();
        let (k2, n) = self.value(b).shape();
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", lhs: (m, k), rhs: (k2, n) });
        }
        let out = matmul_values(self.value(a), self.value(b));
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::Matmul(a, b), out, rg))
    }

    /// Elementwise add. The right operand may broadcast: a 1xC row is added
    /// to every row, a 1x1 scalar to every entry.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        let compatible = (ar, ac) == (br, bc) || (br == 1 && bc == ac) || (br == 1 && bc == 1);
        if !compatible {
            return Err(AutodiffError::ShapeMismatch { op: "add", lhs: (ar, ac), rhs: (br, bc) });
        }
        let av = self.value(a).data();
        let bv = self.value(b);
        let mut out = Vec::with_capacity(ar * ac);
        for i in 0..ar {
            for j in 0..ac {
                let bval = if (br, bc) == (ar, ac) {
                    bv.get(i, j)
                } else if bc == ac {
                    bv.get(0, j)
                } else {
                    bv.get(0, 0)
                };
                out.push(av[i * ac + j] + bval);
            }
        }
        let out = Tensor::checked(ar, ac, out)
            .map_err(|source| AutodiffError::NonFinite { op: "add", source })?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    /// Elementwise product. Either operand may be a 1x1 scalar.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        let same = (ar, ac) == (br, bc);
        let a_scalar = ar == 1 && ac == 1;
        let b_scalar = br == 1 && bc == 1;
        if !(same || a_scalar || b_scalar) {
            return Err(AutodiffError::ShapeMismatch { op: "mul", lhs: (ar, ac), rhs: (br, bc) });
        }
        let (rows, cols) = if a_scalar { (br, bc) } else { (ar, ac) };
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let x = if a_scalar { av.get(0, 0) } else { av.get(i, j) };
                let y = if b_scalar { bv.get(0, 0) } else { bv.get(i, j) };
                out.push(x * y);
            }
        }
        let out = Tensor::checked(rows, cols, out)
            .map_err(|source| AutodiffError::NonFinite { op: "mul", source })?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    pub fn mul_scalar(&mut self, a: NodeId, scalar: f64) -> Result<NodeId, AutodiffError> {
        let s = self.constant_scalar(scalar);
        self.mul(a, s)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(x, "relu", Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(x, "exp", Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(x, "log", Op::Log(x), f64::ln)
    }

    fn unary(
        &mut self,
        x: NodeId,
        name: &'static str,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId, AutodiffError> {
        self.check(x)?;
        let v = self.value(x);
        let (rows, cols) = v.shape();
        let out: Vec<f64> = v.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::checked(rows, cols, out)
            .map_err(|source| AutodiffError::NonFinite { op: name, source })?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(op, out, rg))
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(x)?;
        let total: f64 = self.value(x).data().iter().sum();
        let out = Tensor::checked(1, 1, vec![total])
            .map_err(|source| AutodiffError::NonFinite { op: "sum", source })?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Sum(x), out, rg))
    }

    /// Mean of all entries, as a 1x1 tensor.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(x)?;
        let v = self.value(x);
        let n = (v.rows() * v.cols()) as f64;
        if n == 0.0 {
            return Err(AutodiffError::InvalidShape { op: "mean", shape: v.shape() });
        }
        let total: f64 = v.data().iter().sum();
        let out = Tensor::checked(1, 1, vec![total / n])
            .map_err(|source| AutodiffError::NonFinite { op: "mean", source })?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Mean(x), out, rg))
    }

    /// Scales every row to unit Euclidean norm, with [`L2_NORMALIZE_EPS`]
    /// inside the square root.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(x)?;
        let v = self.value(x);
        let (rows, cols) = v.shape();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = v.row(i);
            let sq: f64 = row.iter().map(|a| a * a).sum();
            let inv = 1.0 / (sq + L2_NORMALIZE_EPS).sqrt();
            out.extend(row.iter().map(|a| a * inv));
        }
        let out = Tensor::checked(rows, cols, out)
            .map_err(|source| AutodiffError::NonFinite { op: "l2_normalize_rows", source })?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::L2NormalizeRows(x), out, rg))
    }

    /// Row-wise log-sum-exp with the max-shift trick; output is Nx1.
    pub fn log_sum_exp_rows(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(x)?;
        let v = self.value(x);
        let (rows, cols) = v.shape();
        if cols == 0 {
            return Err(AutodiffError::InvalidShape { op: "log_sum_exp_rows", shape: (rows, cols) });
        }
        let mut out = Vec::with_capacity(rows);
        for i in 0..rows {
            out.push(log_sum_exp(v.row(i)));
        }
        let out = Tensor::checked(rows, 1, out)
            .map_err(|source| AutodiffError::NonFinite { op: "log_sum_exp_rows", source })?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::LogSumExpRows(x), out, rg))
    }

    /// Row-wise softmax, computed through the shifted log-sum-exp.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(x)?;
        let v = self.value(x);
        let (rows, cols) = v.shape();
        if cols == 0 {
            return Err(AutodiffError::InvalidShape { op: "softmax_rows", shape: (rows, cols) });
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = v.row(i);
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|&a| (a - lse).exp()));
        }
        let out = Tensor::checked(rows, cols, out)
            .map_err(|source| AutodiffError::NonFinite { op: "softmax_rows", source })?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::SoftmaxRows(x), out, rg))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(x)?;
        let v = self.value(x);
        let (rows, cols) = v.shape();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = v.get(i, j);
            }
        }
        let out = Tensor::checked(cols, rows, out)
            .map_err(|source| AutodiffError::NonFinite { op: "transpose", source })?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Transpose(x), out, rg))
    }

    /// Rectangular sub-block `x[rows, cols]` (half-open ranges).
    pub fn slice(
        &mut self,
        x: NodeId,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<NodeId, AutodiffError> {
        self.check(x)?;
        let v = self.value(x);
        let shape = v.shape();
        let (r0, r1, c0, c1) = (rows.start, rows.end, cols.start, cols.end);
        if r0 >= r1 || c0 >= c1 || r1 > shape.0 || c1 > shape.1 {
            return Err(AutodiffError::InvalidSlice { op: "slice", r0, r1, c0, c1, shape });
        }
        let mut out = Vec::with_capacity((r1 - r0) * (c1 - c0));
        for i in r0..r1 {
            out.extend_from_slice(&v.row(i)[c0..c1]);
        }
        let out = Tensor::checked(r1 - r0, c1 - c0, out)
            .map_err(|source| AutodiffError::NonFinite { op: "slice", source })?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Slice { input: x, r0, r1, c0, c1 }, out, rg))
    }

    /// Reverse-mode sweep from a scalar root. Pure: repeated calls on the
    /// same graph return bit-identical gradients.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, AutodiffError> {
        self.check(root)?;
        let root_shape = self.value(root).shape();
        if root_shape != (1, 1) {
            return Err(AutodiffError::NonScalarRoot { shape: root_shape });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else { continue };
            self.propagate(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }

        // Untouched trainable leaves get explicit zeros.
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let bt = transpose_values(self.value(*b));
                    accumulate(grads, a.0, matmul_values(grad, &bt));
                }
                if self.nodes[b.0].requires_grad {
                    let at = transpose_values(self.value(*a));
                    accumulate(grads, b.0, matmul_values(&at, grad));
                }
            }
            Op::Add(a, b) => {
                let (ar, ac) = self.value(*a).shape();
                let (br, bc) = self.value(*b).shape();
                if self.nodes[a.0].requires_grad {
                    accumulate(grads, a.0, grad.clone());
                }
                if self.nodes[b.0].requires_grad {
                    accumulate(grads, b.0, reduce_to_shape(grad, (ar, ac), (br, bc)));
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.nodes[a.0].requires_grad {
                    let raw = broadcast_product(grad, bv);
                    accumulate(grads, a.0, reduce_to_shape(&raw, raw.shape(), av.shape()));
                }
                if self.nodes[b.0].requires_grad {
                    let raw = broadcast_product(grad, av);
                    accumulate(grads, b.0, reduce_to_shape(&raw, raw.shape(), bv.shape()));
                }
            }
            Op::Relu(x) => {
                if self.nodes[x.0].requires_grad {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(grads, x.0, raw_tensor(xv.rows(), xv.cols(), data));
                }
            }
            Op::Exp(x) => {
                if self.nodes[x.0].requires_grad {
                    let yv = &self.nodes[idx].value;
                    let data = yv.data().iter().zip(grad.data()).map(|(&y, &g)| y * g).collect();
                    accumulate(grads, x.0, raw_tensor(yv.rows(), yv.cols(), data));
                }
            }
            Op::Log(x) => {
                if self.nodes[x.0].requires_grad {
                    let xv = self.value(*x);
                    let data = xv.data().iter().zip(grad.data()).map(|(&x, &g)| g / x).collect();
                    accumulate(grads, x.0, raw_tensor(xv.rows(), xv.cols(), data));
                }
            }
            Op::Sum(x) => {
                if self.nodes[x.0].requires_grad {
                    let xv = self.value(*x);
                    let g = grad.get(0, 0);
                    accumulate(grads, x.0, Tensor::filled(xv.rows(), xv.cols(), g));
                }
            }
            Op::Mean(x) => {
                if self.nodes[x.0].requires_grad {
                    let xv = self.value(*x);
                    let n = (xv.rows() * xv.cols()) as f64;
                    let g = grad.get(0, 0) / n;
                    accumulate(grads, x.0, Tensor::filled(xv.rows(), xv.cols(), g));
                }
            }
            Op::L2NormalizeRows(x) => {
                if self.nodes[x.0].requires_grad {
                    let xv = self.value(*x);
                    let (rows, cols) = xv.shape();
                    let mut data = Vec::with_capacity(rows * cols);
                    for i in 0..rows {
                        let row = xv.row(i);
                        let grow = grad.row(i);
                        let s: f64 = row.iter().map(|a| a * a).sum::<f64>() + L2_NORMALIZE_EPS;
                        let inv = 1.0 / s.sqrt();
                        let dot: f64 = row.iter().zip(grow).map(|(&a, &g)| a * g).sum();
                        data.extend(row.iter().zip(grow).map(|(&a, &g)| inv * (g - dot * a / s)));
                    }
                    accumulate(grads, x.0, raw_tensor(rows, cols, data));
                }
            }
            Op::LogSumExpRows(x) => {
                if self.nodes[x.0].requires_grad {
                    let xv = self.value(*x);
                    let (rows, cols) = xv.shape();
                    let mut data = Vec::with_capacity(rows * cols);
                    for i in 0..rows {
                        let row = xv.row(i);
                        let lse = log_sum_exp(row);
                        let g = grad.get(i, 0);
                        data.extend(row.iter().map(|&a| g * (a - lse).exp()));
                    }
                    accumulate(grads, x.0, raw_tensor(rows, cols, data));
                }
            }
            Op::SoftmaxRows(x) => {
                if self.nodes[x.0].requires_grad {
                    let yv = &self.nodes[idx].value;
                    let (rows, cols) = yv.shape();
                    let mut data = Vec::with_capacity(rows * cols);
                    for i in 0..rows {
                        let yrow = yv.row(i);
                        let grow = grad.row(i);
                        let dot: f64 = yrow.iter().zip(grow).map(|(&y, &g)| y * g).sum();
                        data.extend(yrow.iter().zip(grow).map(|(&y, &g)| y * (g - dot)));
                    }
                    accumulate(grads, x.0, raw_tensor(rows, cols, data));
                }
            }
            Op::Transpose(x) => {
                if self.nodes[x.0].requires_grad {
                    accumulate(grads, x.0, transpose_values(grad));
                }
            }
            Op::Slice { input, r0, r1, c0, c1 } => {
                if self.nodes[input.0].requires_grad {
                    let xv = self.value(*input);
                    let (rows, cols) = xv.shape();
                    let mut data = vec![0.0; rows * cols];
                    for (gi, i) in (*r0..*r1).enumerate() {
                        for (gj, j) in (*c0..*c1).enumerate() {
                            data[i * cols + j] = grad.get(gi, gj);
                        }
                    }
                    accumulate(grads, input.0, raw_tensor(rows, cols, data));
                }
            }
        }
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&a| (a - max).exp()).sum();
    max + sum.ln()
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.shape();
    let (_, n) = b.shape();
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    raw_tensor(m, n, out)
}

fn transpose_values(x: &Tensor) -> Tensor {
    let (rows, cols) = x.shape();
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x.get(i, j);
        }
    }
    raw_tensor(cols, rows, out)
}

/// Elementwise product where either side may be 1x1.
fn broadcast_product(a: &Tensor, b: &Tensor) -> Tensor {
    let a_scalar = a.is_scalar();
    let b_scalar = b.is_scalar();
    let (rows, cols) = if a_scalar { b.shape() } else { a.shape() };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let x = if a_scalar { a.get(0, 0) } else { a.get(i, j) };
            let y = if b_scalar { b.get(0, 0) } else { b.get(i, j) };
            out.push(x * y);
        }
    }
    raw_tensor(rows, cols, out)
}

/// Sums a gradient of `from` shape down to the broadcast operand's `to` shape.
fn reduce_to_shape(grad: &Tensor, from: (usize, usize), to: (usize, usize)) -> Tensor {
    if from == to {
        return grad.clone();
    }
    if to == (1, 1) {
        let total: f64 = grad.data().iter().sum();
        return raw_tensor(1, 1, vec![total]);
    }
    // Row vector broadcast over rows: sum the rows.
    let (rows, cols) = from;
    debug_assert_eq!(to, (1, cols));
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j] += grad.get(i, j);
        }
    }
    raw_tensor(1, cols, out)
}

/// Builds a tensor from backward intermediates without the finiteness scan;
/// gradients of finite forward values stay finite for this primitive set.
fn raw_tensor(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::raw(rows, cols, data)
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, contribution: Tensor) {
    match &mut grads[idx] {
        Some(existing) => {
            let data = existing.data_mut();
            for (d, c) in data.iter_mut().zip(contribution.data()) {
                *d += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(1, 3, &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(1, 2, &[3.0, 4.0]));
        let y = g.l2_normalize_rows(x).unwrap();
        let v = g.value(y);
        assert!((v.get(0, 0) - 0.6).abs() < 1e-12);
        assert!((v.get(0, 1) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_of_two_zeros_is_ln_two() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(1, 2, &[0.0, 0.0]));
        let y = g.log_sum_exp_rows(x).unwrap();
        assert!((g.value(y).get(0, 0) - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn grad_of_sum_relu_is_step_mask() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(1, 2, &[2.0, 5.0]).with_grad());
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn grad_of_log_sum_exp_is_softmax() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(1, 3, &[0.3, -1.2, 2.0]).with_grad());
        let l = g.log_sum_exp_rows(x).unwrap();
        let s = g.sum(l).unwrap();
        let grads = g.backward(s).unwrap();

        let mut g2 = Graph::new();
        let x2 = g2.leaf(tensor(1, 3, &[0.3, -1.2, 2.0]));
        let sm = g2.softmax_rows(x2).unwrap();
        for (a, b) in grads.get(x).unwrap().data().iter().zip(g2.value(sm).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_primitive_and_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(tensor(2, 3, &[0.0; 6]));
        let b = g.leaf(tensor(2, 2, &[0.0; 4]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("(2, 3)") && err.contains("(2, 2)"), "{err}");
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(1, 2, &[1.0, 2.0]).with_grad());
        assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarRoot { .. })));
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(1, 2, &[1.0, 2.0]).with_grad());
        let unused = g.leaf(tensor(2, 2, &[1.0; 4]).with_grad());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn backward_twice_is_bit_identical() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(2, 2, &[0.5, -0.3, 1.1, 0.9]).with_grad());
        let e = g.exp(x).unwrap();
        let n = g.l2_normalize_rows(e).unwrap();
        let s = g.sum(n).unwrap();
        let g1 = g.backward(s).unwrap();
        let g2 = g.backward(s).unwrap();
        assert_eq!(g1.get(x).unwrap().data(), g2.get(x).unwrap().data());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(2, 4, &[0.1, -3.0, 2.0, 0.7, 100.0, 100.0, 100.0, 100.0]));
        let y = g.softmax_rows(x).unwrap();
        for i in 0..2 {
            let s: f64 = g.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(g.value(y).row(i).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn slice_extracts_block_and_scatters_grad() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).with_grad());
        let s = g.slice(x, 1..3, 0..2).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 5.0, 7.0, 8.0]);
        let total = g.sum(s).unwrap();
        let grads = g.backward(total).unwrap();
        assert_eq!(
            grads.get(x).unwrap().data(),
            &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0]
        );
    }

    #[test]
    fn exp_overflow_is_reported() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(1, 1, &[800.0]));
        assert!(matches!(g.exp(x), Err(AutodiffError::NonFinite { op: "exp", .. })));
    }
}
