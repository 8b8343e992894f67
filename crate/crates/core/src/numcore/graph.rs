//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Nodes are
//! created in topological order by construction, so the backward pass is a
//! single reverse sweep over the node list. A node is *tracked* when any of
//! its inputs is tracked; untracked nodes (constants, and everything derived
//! only from constants or `stop_gradient`) are skipped during backward.

use rand::Rng;

use super::tensor::{log_sum_exp, sigmoid, softmax_slice, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise unary activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

/// Pointwise binary operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Binary(Binary, Var, Var),
    Unary(Activation, Var),
    Softmax(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    StackRows(Vec<Var>),
    StopGradient,
    Dropout { input: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    Sum(Var),
    Scale(Var, f64),
    MeanRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when no tracked path reaches it.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let data = self.grads.get(var.0)?.as_ref()?;
        Tensor::new(self.shapes[var.0].clone(), data.clone()).ok()
    }

    /// Gradient data for `var`, borrowing.
    pub fn data(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0)?.as_deref()
    }

    /// Like [`Gradients::get`] but returns zeros where nothing flowed.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

/// A computation tape. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Matrix product. A rank-1 left operand is a row vector and a rank-1
    /// right operand a column vector; the result drops those unit dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (sa[0], sa[1], sb[1], vec![sa[0], sb[1]]),
            (1, 2) if sa[0] == sb[0] => (1, sa[0], sb[1], vec![sb[1]]),
            (2, 1) if sa[1] == sb[0] => (sa[0], sa[1], 1, vec![sa[0]]),
            (1, 1) | (1, 2) | (2, 1) | (2, 2) => return Err(mismatch()),
            (r, _) if r != 1 && r != 2 => return Err(TensorError::Rank { op: "matmul", rank: r }),
            (_, r) => return Err(TensorError::Rank { op: "matmul", rank: r }),
        };
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &w) in row.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul { a, b, m, k, n },
            tracked,
        ))
    }

    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: match op {
                    Binary::Add => "add",
                    Binary::Mul => "mul",
                },
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let data: Vec<f64> = match op {
            Binary::Add => av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect(),
            Binary::Mul => av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Binary(op, a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn elementwise(&mut self, f: Activation, x: Var) -> Var {
        let v = self.value(x);
        let data: Vec<f64> = match f {
            Activation::Tanh => v.data().iter().map(|x| x.tanh()).collect(),
            Activation::Sigmoid => v.data().iter().map(|&x| sigmoid(x)).collect(),
            Activation::Relu => v.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        };
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(x);
        self.push(value, Op::Unary(f, x), tracked)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.elementwise(Activation::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.elementwise(Activation::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.elementwise(Activation::Relu, x)
    }

    /// Softmax over a vector.
    pub fn softmax(&mut self, v: Var) -> Result<Var, TensorError> {
        let t = self.value(v);
        if t.rank() != 1 {
            return Err(TensorError::Rank { op: "softmax", rank: t.rank() });
        }
        if t.is_empty() {
            return Err(TensorError::Empty { op: "softmax" });
        }
        let value = Tensor::vector(softmax_slice(t.data()));
        let tracked = self.tracked(v);
        Ok(self.push(value, Op::Softmax(v), tracked))
    }

    /// Concatenation along `axis` of rank-1 or rank-2 tensors.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = inputs.first().ok_or(TensorError::Empty { op: "concat" })?;
        let base = self.shape(*first).to_vec();
        let rank = base.len();
        if axis >= rank {
            return Err(TensorError::Axis { axis, rank });
        }
        if rank > 2 {
            return Err(TensorError::Rank { op: "concat", rank });
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == rank
                && s.iter().enumerate().all(|(d, &n)| d == axis || n == base[d]);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let mut data = Vec::with_capacity(out_shape.iter().product());
        if rank == 1 || axis == 0 {
            for &v in inputs {
                data.extend_from_slice(self.value(v).data());
            }
        } else {
            for r in 0..base[0] {
                for &v in inputs {
                    data.extend_from_slice(self.value(v).row(r));
                }
            }
        }
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            tracked,
        ))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var, TensorError> {
        let first = rows.first().ok_or(TensorError::Empty { op: "stack_rows" })?;
        let width = self.shape(*first).to_vec();
        if width.len() != 1 {
            return Err(TensorError::Rank { op: "stack_rows", rank: width.len() });
        }
        let mut data = Vec::with_capacity(rows.len() * width[0]);
        for &r in rows {
            if self.shape(r) != width.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: width,
                    rhs: self.shape(r).to_vec(),
                });
            }
            data.extend_from_slice(self.value(r).data());
        }
        let tracked = rows.iter().any(|&v| self.tracked(v));
        let value = Tensor::new(vec![rows.len(), width[0]], data)?;
        Ok(self.push(value, Op::StackRows(rows.to_vec()), tracked))
    }

    /// Forward identity; nothing flows back through the result.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Inverted dropout. In eval mode, or with `p == 0`, returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::DropoutRate(p));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Dropout { input: x, mask }, tracked))
    }

    /// `-log softmax(logits)[target]`, fused.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, TensorError> {
        let t = self.value(logits);
        if t.rank() != 1 {
            return Err(TensorError::Rank { op: "cross_entropy", rank: t.rank() });
        }
        if target >= t.len() {
            return Err(TensorError::TargetOutOfRange {
                target,
                len: t.len(),
            });
        }
        let loss = log_sum_exp(t.data()) - t.data()[target];
        let probs = softmax_slice(t.data());
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            tracked,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * factor).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(x);
        self.push(value, Op::Scale(x, factor), tracked)
    }

    /// Column-wise mean of a matrix, giving a vector of its width.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(TensorError::Rank { op: "mean_rows", rank: v.rank() });
        }
        let (rows, cols) = (v.shape()[0], v.shape()[1]);
        if rows == 0 {
            return Err(TensorError::Empty { op: "mean_rows" });
        }
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, x) in out.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(x), tracked))
    }

    /// Sum of a list of same-shape tensors.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let (&first, rest) = xs.split_first().ok_or(TensorError::Empty { op: "add_all" })?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let root_shape = self.shape(root).to_vec();
        if self.value(root).len() != 1 {
            return Err(TensorError::NonScalar(root_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if !self.nodes[root.0].tracked {
            grads.resize(self.nodes.len(), None);
            return Ok(Gradients { grads, shapes });
        }
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::StopGradient => {}
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if self.tracked(*a) {
                        let bd = self.value(*b).data();
                        let ga = slot(&mut grads, *a, m * k);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                ga[i * k + p] += dot(grow, brow);
                            }
                        }
                    }
                    if self.tracked(*b) {
                        let ad = self.value(*a).data();
                        let gb = slot(&mut grads, *b, k * n);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let x = ad[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for (o, &d) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += x * d;
                                }
                            }
                        }
                    }
                }
                Op::Binary(kind, a, b) => {
                    let len = g.len();
                    match kind {
                        Binary::Add => {
                            for v in [*a, *b] {
                                if self.tracked(v) {
                                    axpy(slot(&mut grads, v, len), 1.0, &g);
                                }
                            }
                        }
                        Binary::Mul => {
                            if self.tracked(*a) {
                                let bd = self.value(*b).data();
                                let ga = slot(&mut grads, *a, len);
                                for ((o, d), y) in ga.iter_mut().zip(&g).zip(bd) {
                                    *o += d * y;
                                }
                            }
                            if self.tracked(*b) {
                                let ad = self.value(*a).data();
                                let gb = slot(&mut grads, *b, len);
                                for ((o, d), x) in gb.iter_mut().zip(&g).zip(ad) {
                                    *o += d * x;
                                }
                            }
                        }
                    }
                }
                Op::Unary(f, x) => {
                    let y = node.value.data();
                    let xd = self.value(*x).data();
                    let gx = slot(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        let local = match f {
                            Activation::Tanh => 1.0 - y[i] * y[i],
                            Activation::Sigmoid => y[i] * (1.0 - y[i]),
                            // relu'(0) = 0
                            Activation::Relu => {
                                if xd[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        gx[i] += g[i] * local;
                    }
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let inner = dot(&g, y);
                    let gx = slot(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += y[i] * (g[i] - inner);
                    }
                }
                Op::Concat { inputs, axis } => {
                    let out_shape = node.value.shape();
                    if out_shape.len() == 1 || *axis == 0 {
                        let mut offset = 0;
                        for &v in inputs {
                            let len = self.value(v).len();
                            if self.tracked(v) {
                                axpy(slot(&mut grads, v, len), 1.0, &g[offset..offset + len]);
                            }
                            offset += len;
                        }
                    } else {
                        let total_cols = out_shape[1];
                        let mut col = 0;
                        for &v in inputs {
                            let s = self.shape(v).to_vec();
                            let (rows, cols) = (s[0], s[1]);
                            if self.tracked(v) {
                                let gv = slot(&mut grads, v, rows * cols);
                                for r in 0..rows {
                                    let src = &g[r * total_cols + col..r * total_cols + col + cols];
                                    axpy(&mut gv[r * cols..(r + 1) * cols], 1.0, src);
                                }
                            }
                            col += cols;
                        }
                    }
                }
                Op::StackRows(rows) => {
                    let width = node.value.shape()[1];
                    for (r, &v) in rows.iter().enumerate() {
                        if self.tracked(v) {
                            axpy(slot(&mut grads, v, width), 1.0, &g[r * width..(r + 1) * width]);
                        }
                    }
                }
                Op::Dropout { input, mask } => {
                    let gx = slot(&mut grads, *input, g.len());
                    for ((o, d), m) in gx.iter_mut().zip(&g).zip(mask) {
                        *o += d * m;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let scale = g[0];
                    let gx = slot(&mut grads, *logits, probs.len());
                    for (i, (o, p)) in gx.iter_mut().zip(probs).enumerate() {
                        let onehot = if i == *target { 1.0 } else { 0.0 };
                        *o += scale * (p - onehot);
                    }
                }
                Op::Sum(x) => {
                    let len = self.value(*x).len();
                    let gx = slot(&mut grads, *x, len);
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
                Op::Scale(x, factor) => {
                    axpy(slot(&mut grads, *x, g.len()), *factor, &g);
                }
                Op::MeanRows(x) => {
                    let s = self.shape(*x).to_vec();
                    let (rows, cols) = (s[0], s[1]);
                    let inv = 1.0 / rows as f64;
                    let gx = slot(&mut grads, *x, rows * cols);
                    for r in 0..rows {
                        axpy(&mut gx[r * cols..(r + 1) * cols], inv, &g);
                    }
                }
            }
            // Leaves keep their gradient; interior buffers are released above.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
