use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[m, n] + [n]` broadcast over rows.
    AddRow(Var, Var),
    /// `[m, n] * [n]` broadcast over rows.
    MulRow(Var, Var),
    /// Row `i` of `[m, n]` scaled by element `i` of an `m`-element tensor.
    ScaleRows(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    MaskedSoftmax {
        x: Var,
        excluded: Vec<bool>,
    },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        eps: f64,
    },
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    GatherRows {
        x: Var,
        indices: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        indices: Vec<usize>,
        rows: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        end: usize,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b)
            | ScaleRows(a, b) => vec![*a, *b],
            Scale(x, _) | Relu(x) | Sigmoid(x) | LogSoftmax(x) | Sum(x) | Mean(x)
            | Transpose(x) => vec![*x],
            Softmax { x, .. }
            | MaskedSoftmax { x, .. }
            | LayerNorm { x, .. }
            | GatherRows { x, .. }
            | ScatterRows { x, .. }
            | SliceCols { x, .. } => vec![*x],
            ConcatRows(xs) | ConcatCols(xs) => xs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations. Recording order is a topological order,
/// so `backward` simply walks the nodes in reverse.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradient buffers produced by [`Graph::backward`], one per recorded node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn is_reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap();
    (shape.iter().product::<usize>() / cols, cols)
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

    /// Records a leaf. Gradients are tracked when the tensor's `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
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

    /// Which ReLU inputs are positive, over every ReLU on the graph in
    /// recording order. Two evaluations of the same computation with equal
    /// patterns lie on the same smooth piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.nodes[x.0].value.data().iter().map(|v| *v > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && value.numel() > 0;
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
            requires_grad,
        });
        Var(id)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = self.evaluate(&op, |v| &self.nodes[v.0].value)?;
        let rg = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    /// Computes the forward value of `op` from parent values looked up by `get`.
    fn evaluate<'a>(&'a self, op: &Op, get: impl Fn(Var) -> &'a Tensor) -> Result<Tensor> {
        use Op::*;
        let out = match op {
            Leaf => unreachable!("leaves have no forward rule"),
            MatMul(a, b) => {
                let (a, b) = (get(*a), get(*b));
                let (m, k) = two_d("matmul", a)?;
                let (k2, n) = two_d("matmul", b)?;
                if k != k2 {
                    return Err(Error::dim(
                        "matmul",
                        format!("{:?} x {:?}: inner dimensions differ", a.shape(), b.shape()),
                    ));
                }
                Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))
            }
            Add(a, b) | Sub(a, b) | Mul(a, b) => {
                let (a, b) = (get(*a), get(*b));
                if a.shape() != b.shape() {
                    return Err(Error::dim(
                        "elementwise",
                        format!("{:?} vs {:?}", a.shape(), b.shape()),
                    ));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Add(..) => |x, y| x + y,
                    Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            AddRow(a, b) | MulRow(a, b) => {
                let (a, b) = (get(*a), get(*b));
                let (_, cols) = rows_cols(a.shape());
                if b.numel() != cols {
                    return Err(Error::dim(
                        "row broadcast",
                        format!("{:?} with row {:?}", a.shape(), b.shape()),
                    ));
                }
                let add = matches!(op, AddRow(..));
                let data = a
                    .data()
                    .chunks(cols)
                    .flat_map(|row| {
                        row.iter()
                            .zip(b.data())
                            .map(move |(&x, &y)| if add { x + y } else { x * y })
                    })
                    .collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            ScaleRows(a, s) => {
                let (a, s) = (get(*a), get(*s));
                let (rows, cols) = rows_cols(a.shape());
                if s.numel() != rows {
                    return Err(Error::dim(
                        "scale_rows",
                        format!("{:?} rows scaled by {:?}", a.shape(), s.shape()),
                    ));
                }
                let data = a
                    .data()
                    .chunks(cols)
                    .zip(s.data())
                    .flat_map(|(row, &k)| row.iter().map(move |&x| x * k))
                    .collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            Scale(x, k) => map(get(*x), |v| v * k),
            Relu(x) => map(get(*x), |v| v.max(0.0)),
            Sigmoid(x) => map(get(*x), kernels::sigmoid),
            Softmax { x, axis } => {
                let x = get(*x);
                if *axis >= x.ndim() {
                    return Err(Error::dim(
                        "softmax",
                        format!("axis {axis} out of range for {:?}", x.shape()),
                    ));
                }
                Tensor::from_parts(
                    x.shape().to_vec(),
                    kernels::softmax(x.data(), x.shape(), *axis),
                )
            }
            MaskedSoftmax { x, excluded } => {
                let x = get(*x);
                let (_, cols) = rows_cols(x.shape());
                if excluded.len() != cols {
                    return Err(Error::dim(
                        "masked_softmax",
                        format!("mask of {} for {:?}", excluded.len(), x.shape()),
                    ));
                }
                if excluded.iter().all(|&m| m) {
                    return Err(Error::contract("every key is masked"));
                }
                Tensor::from_parts(
                    x.shape().to_vec(),
                    kernels::masked_softmax_rows(x.data(), cols, excluded),
                )
            }
            LogSoftmax(x) => {
                let x = get(*x);
                let (_, cols) = rows_cols(x.shape());
                Tensor::from_parts(x.shape().to_vec(), kernels::log_softmax_rows(x.data(), cols))
            }
            LayerNorm { x, eps } => {
                let x = get(*x);
                let (_, cols) = rows_cols(x.shape());
                Tensor::from_parts(
                    x.shape().to_vec(),
                    kernels::layer_norm_rows(x.data(), cols, *eps),
                )
            }
            Sum(x) => Tensor::scalar(get(*x).data().iter().sum()),
            Mean(x) => {
                let x = get(*x);
                Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
            }
            Transpose(x) => {
                let x = get(*x);
                let (r, c) = two_d("transpose", x)?;
                Tensor::from_parts(vec![c, r], kernels::transpose(x.data(), r, c))
            }
            GatherRows { x, indices } => {
                let x = get(*x);
                let (rows, cols) = two_d("gather_rows", x)?;
                if indices.is_empty() {
                    return Err(Error::dim("gather_rows", "no rows requested"));
                }
                if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
                    return Err(Error::dim(
                        "gather_rows",
                        format!("row {bad} out of range for {:?}", x.shape()),
                    ));
                }
                let data = indices.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
                Tensor::from_parts(vec![indices.len(), cols], data)
            }
            ScatterRows { x, indices, rows } => {
                let x = get(*x);
                let (r, cols) = two_d("scatter_rows", x)?;
                if indices.len() != r {
                    return Err(Error::dim(
                        "scatter_rows",
                        format!("{} indices for {:?}", indices.len(), x.shape()),
                    ));
                }
                if let Some(&bad) = indices.iter().find(|&&i| i >= *rows) {
                    return Err(Error::dim(
                        "scatter_rows",
                        format!("row {bad} out of range for {rows} rows"),
                    ));
                }
                let mut data = vec![0.0; rows * cols];
                for (src, &dst) in indices.iter().enumerate() {
                    for j in 0..cols {
                        data[dst * cols + j] += x.data()[src * cols + j];
                    }
                }
                Tensor::from_parts(vec![*rows, cols], data)
            }
            ConcatRows(xs) => {
                let parts: Vec<&Tensor> = xs.iter().map(|v| get(*v)).collect();
                let cols = two_d("concat_rows", parts[0])?.1;
                let mut rows = 0;
                let mut data = Vec::new();
                for p in &parts {
                    let (r, c) = two_d("concat_rows", p)?;
                    if c != cols {
                        return Err(Error::dim(
                            "concat_rows",
                            format!("{:?} vs {cols} columns", p.shape()),
                        ));
                    }
                    rows += r;
                    data.extend_from_slice(p.data());
                }
                Tensor::from_parts(vec![rows, cols], data)
            }
            ConcatCols(xs) => {
                let parts: Vec<&Tensor> = xs.iter().map(|v| get(*v)).collect();
                let rows = two_d("concat_cols", parts[0])?.0;
                let mut widths = Vec::with_capacity(parts.len());
                for p in &parts {
                    let (r, c) = two_d("concat_cols", p)?;
                    if r != rows {
                        return Err(Error::dim(
                            "concat_cols",
                            format!("{:?} vs {rows} rows", p.shape()),
                        ));
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(rows * total);
                for i in 0..rows {
                    for (p, &w) in parts.iter().zip(&widths) {
                        data.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
                    }
                }
                Tensor::from_parts(vec![rows, total], data)
            }
            SliceCols { x, start, end } => {
                let x = get(*x);
                let (rows, cols) = two_d("slice_cols", x)?;
                if start >= end || *end > cols {
                    return Err(Error::dim(
                        "slice_cols",
                        format!("columns {start}..{end} of {:?}", x.shape()),
                    ));
                }
                let w = end - start;
                let mut data = Vec::with_capacity(rows * w);
                for i in 0..rows {
                    data.extend_from_slice(&x.data()[i * cols + start..i * cols + end]);
                }
                Tensor::from_parts(vec![rows, w], data)
            }
        };
        Ok(out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.record(Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.record(Op::MulRow(a, row))
    }

    pub fn scale_rows(&mut self, a: Var, factors: Var) -> Result<Var> {
        self.record(Op::ScaleRows(a, factors))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.record(Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sigmoid(a))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.record(Op::Softmax { x, axis })
    }

    /// Softmax over the last axis; columns flagged in `excluded` receive zero weight.
    pub fn masked_softmax(&mut self, x: Var, excluded: &[bool]) -> Result<Var> {
        self.record(Op::MaskedSoftmax {
            x,
            excluded: excluded.to_vec(),
        })
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.record(Op::LogSoftmax(x))
    }

    /// Layer normalisation over the last axis with no gain or bias.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract(format!("layer norm eps must be positive, got {eps}")));
        }
        self.record(Op::LayerNorm { x, eps })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Mean(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Transpose(x))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        self.record(Op::GatherRows {
            x,
            indices: indices.to_vec(),
        })
    }

    /// Places row `i` of `x` at row `indices[i]` of a zero `rows x C` matrix.
    pub fn scatter_rows(&mut self, x: Var, indices: &[usize], rows: usize) -> Result<Var> {
        self.record(Op::ScatterRows {
            x,
            indices: indices.to_vec(),
            rows,
        })
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::dim("concat_rows", "nothing to concatenate"));
        }
        self.record(Op::ConcatRows(xs.to_vec()))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::dim("concat_cols", "nothing to concatenate"));
        }
        self.record(Op::ConcatCols(xs.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let indices: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &indices)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.record(Op::SliceCols { x, start, end })
    }

    /// `x W + b`
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add_row(xw, bias)
    }

    /// Recomputes every node from the recorded leaves, in recording order.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => {
                    let vals = &values;
                    self.evaluate(op, |v| &vals[v.0])?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only nodes that track gradients keep a buffer.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        use Op::*;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let y = node.value.data();
        match &node.op {
            Leaf => {}
            MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if wants(*a) {
                    acc(*a, kernels::matmul_bt(gout, bv.data(), m, n, k));
                }
                if wants(*b) {
                    acc(*b, kernels::matmul_at(av.data(), gout, m, k, n));
                }
            }
            Add(a, b) => {
                acc(*a, gout.to_vec());
                acc(*b, gout.to_vec());
            }
            Sub(a, b) => {
                acc(*a, gout.to_vec());
                acc(*b, gout.iter().map(|g| -g).collect());
            }
            Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    acc(*a, gout.iter().zip(bv).map(|(g, x)| g * x).collect());
                }
                if wants(*b) {
                    acc(*b, gout.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            AddRow(a, b) => {
                let cols = val(*b).numel();
                acc(*a, gout.to_vec());
                if wants(*b) {
                    let mut gb = vec![0.0; cols];
                    for row in gout.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                    acc(*b, gb);
                }
            }
            MulRow(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let cols = bv.len();
                if wants(*a) {
                    let ga = gout
                        .chunks(cols)
                        .flat_map(|row| row.iter().zip(bv).map(|(g, k)| g * k))
                        .collect();
                    acc(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; cols];
                    for (grow, arow) in gout.chunks(cols).zip(av.chunks(cols)) {
                        for j in 0..cols {
                            gb[j] += grow[j] * arow[j];
                        }
                    }
                    acc(*b, gb);
                }
            }
            ScaleRows(a, s) => {
                let (av, sv) = (val(*a).data(), val(*s).data());
                let cols = av.len() / sv.len();
                if wants(*a) {
                    let ga = gout
                        .chunks(cols)
                        .zip(sv)
                        .flat_map(|(row, &k)| row.iter().map(move |g| g * k))
                        .collect();
                    acc(*a, ga);
                }
                if wants(*s) {
                    let gs = gout
                        .chunks(cols)
                        .zip(av.chunks(cols))
                        .map(|(g, x)| g.iter().zip(x).map(|(g, x)| g * x).sum())
                        .collect();
                    acc(*s, gs);
                }
            }
            Scale(x, k) => acc(*x, gout.iter().map(|g| g * k).collect()),
            Relu(x) => {
                let xv = val(*x).data();
                acc(
                    *x,
                    gout.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect(),
                );
            }
            Sigmoid(x) => acc(*x, gout.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()),
            Softmax { x, axis } => {
                let (outer, len, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| gout[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (gout[at(j)] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            MaskedSoftmax { x, excluded } => {
                let cols = excluded.len();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), dst) in y.chunks(cols).zip(gout.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, gx);
            }
            LogSoftmax(x) => {
                let cols = *node.value.shape().last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), dst) in y.chunks(cols).zip(gout.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..cols {
                        dst[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                acc(*x, gx);
            }
            LayerNorm { x, eps } => {
                let xv = val(*x).data();
                let cols = *node.value.shape().last().unwrap();
                let n = cols as f64;
                let mut gx = vec![0.0; y.len()];
                for (((xr, yr), gr), dst) in xv
                    .chunks(cols)
                    .zip(y.chunks(cols))
                    .zip(gout.chunks(cols))
                    .zip(gx.chunks_mut(cols))
                {
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean = gr.iter().sum::<f64>() / n;
                    let gymean = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                    for j in 0..cols {
                        dst[j] = inv * (gr[j] - gmean - yr[j] * gymean);
                    }
                }
                acc(*x, gx);
            }
            Sum(x) => acc(*x, vec![gout[0]; val(*x).numel()]),
            Mean(x) => {
                let n = val(*x).numel();
                acc(*x, vec![gout[0] / n as f64; n]);
            }
            Transpose(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                acc(*x, kernels::transpose(gout, c, r));
            }
            GatherRows { x, indices } => {
                let xv = val(*x);
                let cols = xv.shape()[1];
                let mut gx = vec![0.0; xv.numel()];
                for (src, &dst) in indices.iter().enumerate() {
                    for j in 0..cols {
                        gx[dst * cols + j] += gout[src * cols + j];
                    }
                }
                acc(*x, gx);
            }
            ScatterRows { x, indices, .. } => {
                let cols = val(*x).shape()[1];
                let gx = indices
                    .iter()
                    .flat_map(|&r| gout[r * cols..(r + 1) * cols].iter().copied())
                    .collect();
                acc(*x, gx);
            }
            ConcatRows(xs) => {
                let mut offset = 0;
                for &v in xs {
                    let n = val(v).numel();
                    acc(v, gout[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            ConcatCols(xs) => {
                let total = *node.value.shape().last().unwrap();
                let rows = node.value.shape()[0];
                let mut start = 0;
                for &v in xs {
                    let w = val(v).shape()[1];
                    let mut gx = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        gx.extend_from_slice(&gout[i * total + start..i * total + start + w]);
                    }
                    acc(v, gx);
                    start += w;
                }
            }
            SliceCols { x, start, end } => {
                let cols = val(*x).shape()[1];
                let w = end - start;
                let mut gx = vec![0.0; val(*x).numel()];
                for (i, row) in gout.chunks(w).enumerate() {
                    gx[i * cols + start..i * cols + end].copy_from_slice(row);
                }
                acc(*x, gx);
            }
        }
    }
}

fn two_d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::dim(op, format!("expected a 2-D tensor, got {:?}", t.shape()))),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}
