//! Dynamic tape. Every op appends a node; node ids are a topological order,
//! so the backward pass is a single reverse sweep.

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is a row vector repeated over every row of lhs
    Row,
    /// rhs is an `[n x 1]` column repeated over every column of lhs
    Col,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    RowSums(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    L2NormRows { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, scale: f64 },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode tape over [`Tensor`] values.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn cols_of(shape: &[usize]) -> usize {
    *shape.last().expect("non-empty shape")
}

fn rows_of(shape: &[usize]) -> usize {
    let c = cols_of(shape);
    shape.iter().product::<usize>() / c
}

fn bcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        return Ok(Bcast::Same);
    }
    let bn: usize = b.iter().product();
    if bn == 1 {
        return Ok(Bcast::Scalar);
    }
    let (ar, ac) = (rows_of(a), cols_of(a));
    let b_is_row = b.len() == 1 || b.iter().rev().skip(1).all(|&d| d == 1);
    if b_is_row && bn == ac {
        return Ok(Bcast::Row);
    }
    if b.len() == 2 && b[0] == ar && b[1] == 1 {
        return Ok(Bcast::Col);
    }
    Err(Error::Shape { op, lhs: a.to_vec(), rhs: b.to_vec() })
}

#[inline]
fn rhs_index(mode: Bcast, i: usize, cols: usize) -> usize {
    match mode {
        Bcast::Same => i,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
        Bcast::Scalar => 0,
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that recorded a backward rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf | Op::Const)).count()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_parts(n.shape.clone(), n.value.clone())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into a leaf by previous backward passes.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Registers a leaf, honouring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        self.push_leaf(t.shape().to_vec(), t.into_data(), false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let op = if requires_grad { Op::Leaf } else { Op::Const };
        self.nodes.push(Node { shape, value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        inputs: &[Var],
        op: impl FnOnce() -> Op,
    ) -> Result<Var> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op() } else { Op::Const };
        self.nodes.push(Node { shape, value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn require_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape { op, lhs: s.to_vec(), rhs: vec![] }),
        }
    }

    // ----- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.require_2d("matmul", a)?;
        let (k2, m) = self.require_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape { op: "matmul", lhs: vec![n, k], rhs: vec![k2, m] });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * m..(p + 1) * m];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        self.push("matmul", vec![n, m], out, &[a, b], || Op::MatMul(a, b))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let mode = bcast(name, self.shape(a), self.shape(b))?;
        let cols = cols_of(self.shape(a));
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.iter().enumerate().map(|(i, &x)| f(x, bv[rhs_index(mode, i, cols)])).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, &[a, b], || mk(a, b, mode))
    }

    /// Elementwise sum; `b` may be a row vector, an `[n x 1]` column or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, out, &[a], || Op::Scale(a, c))
    }

    /// Softmax over the last dimension. With `causal`, row `i` of a square
    /// score matrix only sees columns `0..=i`; masked entries are exactly 0.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = (rows_of(&shape), cols_of(&shape));
        if causal && rows != cols {
            return Err(Error::Shape { op: "causal softmax", lhs: shape, rhs: vec![] });
        }
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let width = if causal { r + 1 } else { cols };
            let row = &x[r * cols..r * cols + width];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * cols..r * cols + width];
            let mut sum = 0.0;
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = (xi - max).exp();
                sum += *oi;
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        self.push("softmax", shape, out, &[a], || Op::Softmax(a))
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, d) = (rows_of(&shape), cols_of(&shape));
        for p in [gamma, beta] {
            if self.value(p).len() != d {
                return Err(Error::Shape { op: "layer_norm", lhs: shape, rhs: self.shape(p).to_vec() });
            }
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        self.push("layer_norm", shape, out, &[x, gamma, beta], || Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push("gelu", shape, out, &[a], || Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push("relu", shape, out, &[a], || Op::Relu(a))
    }

    /// Gathers rows of a `[vocab x d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.require_2d("embedding", table)?;
        if ids.is_empty() {
            return Err(Error::Invalid("embedding: empty id sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Invalid(format!("embedding: id {bad} out of range for vocabulary of {vocab}")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ids = ids.to_vec();
        self.push("embedding", vec![ids.len(), d], out, &[table], || Op::Embedding { table, ids })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return Err(Error::Shape { op: "reshape", lhs: self.shape(a).to_vec(), rhs: shape.to_vec() });
        }
        let out = self.value(a).to_vec();
        self.push("reshape", shape.to_vec(), out, &[a], || Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.require_2d("transpose", a)?;
        let x = self.value(a);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = x[i * m + j];
            }
        }
        self.push("transpose", vec![m, n], out, &[a], || Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", vec![1], vec![s], &[a], || Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.iter().sum::<f64>() / x.len() as f64;
        self.push("mean", vec![1], vec![s], &[a], || Op::Mean(a))
    }

    /// Column-wise mean of an `[n x d]` matrix, giving `[1 x d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.require_2d("mean_rows", a)?;
        let x = self.value(a);
        let mut out = vec![0.0; d];
        for r in 0..n {
            out.iter_mut().zip(&x[r * d..(r + 1) * d]).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        self.push("mean_rows", vec![1, d], out, &[a], || Op::MeanRows(a))
    }

    /// Per-row sums of an `[n x d]` matrix, giving `[n x 1]`.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.require_2d("row_sums", a)?;
        let x = self.value(a);
        let out = (0..n).map(|r| x[r * d..(r + 1) * d].iter().sum()).collect();
        self.push("row_sums", vec![n, 1], out, &[a], || Op::RowSums(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.require_2d("slice_cols", a)?;
        if start >= end || end > m {
            return Err(Error::Shape { op: "slice_cols", lhs: vec![n, m], rhs: vec![start, end] });
        }
        let x = self.value(a);
        let w = end - start;
        let mut out = Vec::with_capacity(n * w);
        for r in 0..n {
            out.extend_from_slice(&x[r * m + start..r * m + end]);
        }
        self.push("slice_cols", vec![n, w], out, &[a], || Op::SliceCols { x: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Invalid("concat_cols: no inputs".into()))?;
        let (n, _) = self.require_2d("concat_cols", first)?;
        let mut total = 0;
        for &p in parts {
            let (pn, pm) = self.require_2d("concat_cols", p)?;
            if pn != n {
                return Err(Error::Shape { op: "concat_cols", lhs: self.shape(first).to_vec(), rhs: vec![pn, pm] });
            }
            total += pm;
        }
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                let m = cols_of(self.shape(p));
                out.extend_from_slice(&self.value(p)[r * m..(r + 1) * m]);
            }
        }
        let parts = parts.to_vec();
        let inputs = parts.clone();
        self.push("concat_cols", vec![n, total], out, &inputs, || Op::ConcatCols(parts))
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (n, d) = (rows_of(&shape), cols_of(&shape));
        let x = self.value(a);
        let mut norms = vec![0.0; n];
        let mut out = vec![0.0; x.len()];
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms[r] = norm;
            out[r * d..(r + 1) * d].iter_mut().zip(row).for_each(|(o, v)| *o = v / norm);
        }
        self.push("l2_normalize_rows", shape, out, &[a], || Op::L2NormRows { x: a, norms })
    }

    /// Softmax cross-entropy of `[n x V]` logits; `None` targets are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], reduction: Reduction) -> Result<Var> {
        let (n, v) = self.require_2d("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(Error::Shape { op: "cross_entropy", lhs: vec![n, v], rhs: vec![targets.len()] });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Invalid(format!("cross_entropy: target {bad} out of range for {v} classes")));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Invalid("cross_entropy: no supervised positions".into()));
        }
        let scale = match reduction {
            Reduction::Mean => 1.0 / count as f64,
            Reduction::Sum => 1.0,
        };
        let x = self.value(logits);
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for r in 0..n {
            let Some(t) = targets[r] else { continue };
            let row = &x[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[t];
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
        }
        let targets = targets.to_vec();
        self.push("cross_entropy", vec![1], vec![loss * scale], &[logits], || Op::CrossEntropy {
            logits,
            targets,
            probs,
            scale,
        })
    }

    /// Inverted dropout: kept activations are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(Error::Invalid(format!("dropout probability {p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let shape = self.shape(a).to_vec();
        let m = self.input(&shape, mask)?;
        self.mul(a, m)
    }

    // ----- backward ----------------------------------------------------

    /// Accumulates d(root)/d(leaf) into every leaf that requires gradients.
    /// Repeated calls add to the existing leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rn = &self.nodes[root.0];
        if rn.value.len() != 1 {
            return Err(Error::NonScalarRoot(rn.shape.clone()));
        }
        if !rn.requires_grad {
            return Err(Error::NoGraph);
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        let Graph { nodes, leaf_grads } = self;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Leaf => accumulate(&mut leaf_grads[i], g),
                Op::MatMul(a, b) => {
                    let (n, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let m = nodes[b.0].shape[1];
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].requires_grad {
                        let mut ga = vec![0.0; n * k];
                        for r in 0..n {
                            let grow = &g[r * m..(r + 1) * m];
                            for p in 0..k {
                                let brow = &bv[p * m..(p + 1) * m];
                                ga[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        send(&mut grads, nodes, *a, ga);
                    }
                    if nodes[b.0].requires_grad {
                        let mut gb = vec![0.0; k * m];
                        for r in 0..n {
                            let grow = &g[r * m..(r + 1) * m];
                            for p in 0..k {
                                let x = av[r * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                gb[p * m..(p + 1) * m].iter_mut().zip(grow).for_each(|(o, y)| *o += x * y);
                            }
                        }
                        send(&mut grads, nodes, *b, gb);
                    }
                }
                Op::Add(a, b, mode) => {
                    let cols = cols_of(&node.shape);
                    if nodes[b.0].requires_grad {
                        let gb = reduce_bcast(&g, *mode, nodes[b.0].value.len(), cols, |_| 1.0);
                        send(&mut grads, nodes, *b, gb);
                    }
                    send(&mut grads, nodes, *a, g);
                }
                Op::Sub(a, b, mode) => {
                    let cols = cols_of(&node.shape);
                    if nodes[b.0].requires_grad {
                        let gb = reduce_bcast(&g, *mode, nodes[b.0].value.len(), cols, |_| -1.0);
                        send(&mut grads, nodes, *b, gb);
                    }
                    send(&mut grads, nodes, *a, g);
                }
                Op::Mul(a, b, mode) => {
                    let cols = cols_of(&node.shape);
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[b.0].requires_grad {
                        let gb = reduce_bcast(&g, *mode, bv.len(), cols, |i| av[i]);
                        send(&mut grads, nodes, *b, gb);
                    }
                    if nodes[a.0].requires_grad {
                        let ga = g.iter().enumerate().map(|(i, gi)| gi * bv[rhs_index(*mode, i, cols)]).collect();
                        send(&mut grads, nodes, *a, ga);
                    }
                }
                Op::Div(a, b, mode) => {
                    let cols = cols_of(&node.shape);
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[b.0].requires_grad {
                        let gb = reduce_bcast(&g, *mode, bv.len(), cols, |i| {
                            let y = bv[rhs_index(*mode, i, cols)];
                            -av[i] / (y * y)
                        });
                        send(&mut grads, nodes, *b, gb);
                    }
                    if nodes[a.0].requires_grad {
                        let ga = g.iter().enumerate().map(|(i, gi)| gi / bv[rhs_index(*mode, i, cols)]).collect();
                        send(&mut grads, nodes, *a, ga);
                    }
                }
                Op::Scale(a, c) => {
                    let ga = g.iter().map(|x| x * c).collect();
                    send(&mut grads, nodes, *a, ga);
                }
                Op::Softmax(a) => {
                    let cols = cols_of(&node.shape);
                    let y = &node.value;
                    let mut ga = vec![0.0; y.len()];
                    for r in 0..y.len() / cols {
                        let s = r * cols..(r + 1) * cols;
                        let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                        for j in s {
                            ga[j] = y[j] * (g[j] - dot);
                        }
                    }
                    send(&mut grads, nodes, *a, ga);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let d = cols_of(&node.shape);
                    let rows = xhat.len() / d;
                    let gv = &nodes[gamma.0].value;
                    if nodes[gamma.0].requires_grad || nodes[beta.0].requires_grad {
                        let mut gg = vec![0.0; d];
                        let mut gbeta = vec![0.0; d];
                        for r in 0..rows {
                            for j in 0..d {
                                gg[j] += g[r * d + j] * xhat[r * d + j];
                                gbeta[j] += g[r * d + j];
                            }
                        }
                        send(&mut grads, nodes, *gamma, gg);
                        send(&mut grads, nodes, *beta, gbeta);
                    }
                    if nodes[x.0].requires_grad {
                        let mut gx = vec![0.0; xhat.len()];
                        for r in 0..rows {
                            let s = r * d;
                            let mut sum_g = 0.0;
                            let mut sum_gx = 0.0;
                            for j in 0..d {
                                let gh = g[s + j] * gv[j];
                                sum_g += gh;
                                sum_gx += gh * xhat[s + j];
                            }
                            for j in 0..d {
                                let gh = g[s + j] * gv[j];
                                gx[s + j] = rstd[r] / d as f64 * (d as f64 * gh - sum_g - xhat[s + j] * sum_gx);
                            }
                        }
                        send(&mut grads, nodes, *x, gx);
                    }
                }
                Op::Gelu(a) => {
                    let x = &nodes[a.0].value;
                    let ga = g.iter().zip(x).map(|(gi, &xi)| gi * gelu_grad(xi)).collect();
                    send(&mut grads, nodes, *a, ga);
                }
                Op::Relu(a) => {
                    let x = &nodes[a.0].value;
                    let ga = g.iter().zip(x).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 }).collect();
                    send(&mut grads, nodes, *a, ga);
                }
                Op::Embedding { table, ids } => {
                    let d = nodes[table.0].shape[1];
                    let mut gt = vec![0.0; nodes[table.0].value.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(o, v)| *o += v);
                    }
                    send(&mut grads, nodes, *table, gt);
                }
                Op::Reshape(a) => send(&mut grads, nodes, *a, g),
                Op::Transpose(a) => {
                    let (n, m) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let mut ga = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * m + j] = g[j * n + i];
                        }
                    }
                    send(&mut grads, nodes, *a, ga);
                }
                Op::Sum(a) => {
                    let n = nodes[a.0].value.len();
                    send(&mut grads, nodes, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = nodes[a.0].value.len();
                    send(&mut grads, nodes, *a, vec![g[0] / n as f64; n]);
                }
                Op::MeanRows(a) => {
                    let (n, d) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let mut ga = Vec::with_capacity(n * d);
                    for _ in 0..n {
                        ga.extend(g.iter().map(|v| v / n as f64));
                    }
                    send(&mut grads, nodes, *a, ga);
                }
                Op::RowSums(a) => {
                    let (n, d) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let ga = (0..n * d).map(|i| g[i / d]).collect();
                    send(&mut grads, nodes, *a, ga);
                }
                Op::SliceCols { x, start } => {
                    let (n, m) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                    let w = node.shape[1];
                    let mut gx = vec![0.0; n * m];
                    for r in 0..n {
                        gx[r * m + start..r * m + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    send(&mut grads, nodes, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let (n, total) = (node.shape[0], node.shape[1]);
                    let mut offset = 0;
                    for p in parts {
                        let m = nodes[p.0].shape[1];
                        if nodes[p.0].requires_grad {
                            let mut gp = Vec::with_capacity(n * m);
                            for r in 0..n {
                                gp.extend_from_slice(&g[r * total + offset..r * total + offset + m]);
                            }
                            send(&mut grads, nodes, *p, gp);
                        }
                        offset += m;
                    }
                }
                Op::L2NormRows { x, norms } => {
                    let d = cols_of(&node.shape);
                    let y = &node.value;
                    let mut gx = vec![0.0; y.len()];
                    for (r, norm) in norms.iter().enumerate() {
                        let s = r * d..(r + 1) * d;
                        let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                        for j in s {
                            gx[j] = (g[j] - y[j] * dot) / norm;
                        }
                    }
                    send(&mut grads, nodes, *x, gx);
                }
                Op::CrossEntropy { logits, targets, probs, scale } => {
                    let v = nodes[logits.0].shape[1];
                    let mut gl = vec![0.0; probs.len()];
                    let k = g[0] * scale;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for j in 0..v {
                            gl[r * v + j] = k * probs[r * v + j];
                        }
                        gl[r * v + t] -= k;
                    }
                    send(&mut grads, nodes, *logits, gl);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta),
    }
}

fn send(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, delta: Vec<f64>) {
    if nodes[v.0].requires_grad {
        accumulate(&mut grads[v.0], delta);
    }
}

/// Sums `g[i] * factor(i)` into the (possibly broadcast) rhs layout.
fn reduce_bcast(g: &[f64], mode: Bcast, rhs_len: usize, cols: usize, factor: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; rhs_len];
    for (i, gi) in g.iter().enumerate() {
        out[rhs_index(mode, i, cols)] += gi * factor(i);
    }
    out
}
