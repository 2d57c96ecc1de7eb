//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value, so the node list is always in topological
//! order and [`Tape::backward`] simply walks it in reverse.

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major dense array of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("tensor", format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", "ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn i.i.d. from uniform(-bound, bound).
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    /// `b` is a vector added to every trailing row of `a`.
    AddRow { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Affine { x: usize, scale: f64 },
    Sigmoid { x: usize },
    Tanh { x: usize },
    Relu { x: usize },
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Transpose { x: usize },
    Reshape { x: usize },
    GatherRows { table: usize, rows: Vec<usize> },
    Select { x: usize, idx: Vec<usize> },
    Sum { x: usize },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Splits `shape` around `axis` into (outer, len, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gemm_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let grad = if requires_grad && matches!(op, Op::Leaf) {
            Some(vec![0.0; value.numel()])
        } else {
            None
        };
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(grad);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
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

    /// Accumulated gradient; `None` unless the node requires grad and has
    /// been reached by a backward pass (leaves always hold a buffer).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor { shape: self.nodes[v.0].value.shape.clone(), data: g.clone() })
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Matrix product with NumPy-style handling of rank-1 operands: a vector
    /// on the left is a row, a vector on the right is a column.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || Error::dim("matmul", format!("{sa:?} x {sb:?}"));
        let (m, k, a_vec) = match sa.len() {
            1 => (1, sa[0], true),
            2 => (sa[0], sa[1], false),
            _ => return Err(bad()),
        };
        let (kb, n, b_vec) = match sb.len() {
            1 => (sb[0], 1, true),
            2 => (sb[0], sb[1], false),
            _ => return Err(bad()),
        };
        if k != kb {
            return Err(bad());
        }
        let out_shape = match (a_vec, b_vec) {
            (true, true) => vec![],
            (true, false) => vec![n],
            (false, true) => vec![m],
            (false, false) => vec![m, n],
        };
        let mut out = vec![0.0; m * n];
        gemm_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Tensor { shape: out_shape, data: out },
            Op::MatMul { a: a.0, b: b.0, m, k, n },
            rg,
        ))
    }

    /// Elementwise sum. A rank-1 `b` whose length equals the trailing extent
    /// of `a` is added to every row of `a` (bias broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let rg = self.rg(&[a.0, b.0]);
        if sa == sb {
            let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
            return Ok(self.push(Tensor { shape: sa, data }, Op::Add { a: a.0, b: b.0 }, rg));
        }
        if sb.len() == 1 && sa.len() >= 2 && sa.last() == sb.last() {
            let n = sb[0];
            let bias = self.value(b).data.clone();
            let data = self
                .value(a)
                .data
                .iter()
                .enumerate()
                .map(|(i, x)| x + bias[i % n])
                .collect();
            return Ok(self.push(Tensor { shape: sa, data }, Op::AddRow { a: a.0, b: b.0 }, rg));
        }
        Err(Error::dim("add", format!("{sa:?} + {sb:?}")))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(Error::dim("sub", format!("{sa:?} - {:?}", self.shape(b))));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x - y).collect();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor { shape: sa, data }, Op::Sub { a: a.0, b: b.0 }, rg))
    }

    /// Hadamard (elementwise) product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(Error::dim("hadamard", format!("{sa:?} * {:?}", self.shape(b))));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor { shape: sa, data }, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|v| scale * v + shift).collect();
        let shape = t.shape.clone();
        let rg = self.rg(&[x.0]);
        self.push(Tensor { shape, data }, Op::Affine { x: x.0, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| f(v)).collect();
        let shape = t.shape.clone();
        let rg = self.rg(&[x.0]);
        self.push(Tensor { shape, data }, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x: x.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh { x: x.0 })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu { x: x.0 })
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::dim(op, format!("axis {axis} out of range for rank {rank}")));
        }
        Ok(())
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax_axis", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(&t.shape, axis);
        let mut out = vec![0.0; t.numel()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| t.data[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (t.data[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[at(i)] /= total;
                }
            }
        }
        let shape = t.shape.clone();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax { x: x.0, axis }, rg))
    }

    /// Log-softmax along `axis` via the log-sum-exp trick.
    pub fn log_softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax_axis", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(&t.shape, axis);
        let mut out = vec![0.0; t.numel()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| t.data[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = (0..len).map(|i| (t.data[at(i)] - max).exp()).sum();
                let lse = max + total.ln();
                for i in 0..len {
                    out[at(i)] = t.data[at(i)] - lse;
                }
            }
        }
        let shape = t.shape.clone();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor { shape, data: out }, Op::LogSoftmax { x: x.0, axis }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no parts"))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let agrees = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !agrees {
                return Err(Error::dim("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape[axis] * inner;
                out.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor { shape, data: out }, Op::Concat { parts: ids, axis }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::dim("transpose", format!("needs a matrix, got {:?}", t.shape)));
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data[i * c + j];
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor { shape: vec![c, r], data: out }, Op::Transpose { x: x.0 }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(t, Op::Reshape { x: x.0 }, rg))
    }

    /// Rows of a matrix, stacked in the given order (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::dim("gather_rows", format!("needs a matrix, got {:?}", t.shape)));
        }
        let (n, cols) = (t.shape[0], t.shape[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::contract(format!("row index {bad} out of range for {n} rows")));
        }
        if rows.is_empty() {
            return Err(Error::dim("gather_rows", "empty row list"));
        }
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let rg = self.rg(&[table.0]);
        Ok(self.push(
            Tensor { shape: vec![rows.len(), cols], data: out },
            Op::GatherRows { table: table.0, rows: rows.to_vec() },
            rg,
        ))
    }

    /// Picks flat (row-major) elements into a rank-1 tensor.
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.numel()) {
            return Err(Error::contract(format!("element index {bad} out of range for {}", t.numel())));
        }
        if idx.is_empty() {
            return Err(Error::dim("select", "empty index list"));
        }
        let out = idx.iter().map(|&i| t.data[i]).collect();
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Tensor { shape: vec![idx.len()], data: out },
            Op::Select { x: x.0, idx: idx.to_vec() },
            rg,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, rg)
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls; intermediate gradients are recomputed each time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = node.requires_grad.then(|| vec![0.0; node.value.numel()]);
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        if let Some(g) = self.grads[loss.0].as_mut() {
            g[0] += 1.0;
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, id: usize, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let nodes = &self.nodes;
        if let Some(buf) = self.grads[id].as_mut() {
            f(buf, nodes);
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                // dA = G · Bᵀ, dB = Aᵀ · G
                self.acc(a, |ga, nodes| {
                    let bv = &nodes[b].value.data;
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for c in 0..n {
                                s += g[r * n + c] * bv[p * n + c];
                            }
                            ga[r * k + p] += s;
                        }
                    }
                });
                self.acc(b, |gb, nodes| {
                    let av = &nodes[a].value.data;
                    for r in 0..m {
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for c in 0..n {
                                gb[p * n + c] += x * g[r * n + c];
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc(b, |gb, _| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::AddRow { a, b } => {
                self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc(b, |gb, _| {
                    let n = gb.len();
                    for (idx, y) in g.iter().enumerate() {
                        gb[idx % n] += y;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc(b, |gb, _| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul { a, b } => {
                self.acc(a, |ga, nodes| {
                    let bv = &nodes[b].value.data;
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(bv) {
                        *x += y * w;
                    }
                });
                self.acc(b, |gb, nodes| {
                    let av = &nodes[a].value.data;
                    for ((x, y), w) in gb.iter_mut().zip(g).zip(av) {
                        *x += y * w;
                    }
                });
            }
            Op::Affine { x, scale } => {
                self.acc(x, |gx, _| gx.iter_mut().zip(g).for_each(|(d, y)| *d += scale * y));
            }
            Op::Sigmoid { x } => {
                self.acc(x, |gx, nodes| {
                    for ((d, y), s) in gx.iter_mut().zip(g).zip(&nodes[i].value.data) {
                        *d += y * s * (1.0 - s);
                    }
                });
            }
            Op::Tanh { x } => {
                self.acc(x, |gx, nodes| {
                    for ((d, y), t) in gx.iter_mut().zip(g).zip(&nodes[i].value.data) {
                        *d += y * (1.0 - t * t);
                    }
                });
            }
            Op::Relu { x } => {
                self.acc(x, |gx, nodes| {
                    for ((d, y), v) in gx.iter_mut().zip(g).zip(&nodes[x].value.data) {
                        if *v > 0.0 {
                            *d += y;
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                self.acc(x, |gx, nodes| {
                    let out = &nodes[i].value;
                    let (outer, len, inner) = axis_split(&out.shape, axis);
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |t: usize| (o * len + t) * inner + j;
                            let dot: f64 = (0..len).map(|t| g[at(t)] * out.data[at(t)]).sum();
                            for t in 0..len {
                                gx[at(t)] += out.data[at(t)] * (g[at(t)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                self.acc(x, |gx, nodes| {
                    let out = &nodes[i].value;
                    let (outer, len, inner) = axis_split(&out.shape, axis);
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |t: usize| (o * len + t) * inner + j;
                            let total: f64 = (0..len).map(|t| g[at(t)]).sum();
                            for t in 0..len {
                                gx[at(t)] += g[at(t)] - out.data[at(t)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = self.nodes[i].value.shape.clone();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.nodes[p].value.shape[axis] * inner;
                    self.acc(p, |gp, _| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            for (d, y) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += y;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Transpose { x } => {
                self.acc(x, |gx, nodes| {
                    let (r, c) = (nodes[x].value.shape[0], nodes[x].value.shape[1]);
                    for a in 0..r {
                        for b in 0..c {
                            gx[a * c + b] += g[b * r + a];
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.acc(x, |gx, _| gx.iter_mut().zip(g).for_each(|(d, y)| *d += y));
            }
            Op::GatherRows { table, rows } => {
                self.acc(table, |gt, nodes| {
                    let cols = nodes[table].value.shape[1];
                    for (slot, &r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            gt[r * cols + c] += g[slot * cols + c];
                        }
                    }
                });
            }
            Op::Select { x, idx } => {
                self.acc(x, |gx, _| {
                    for (slot, &e) in idx.iter().enumerate() {
                        gx[e] += g[slot];
                    }
                });
            }
            Op::Sum { x } => {
                let s = g[0];
                self.acc(x, |gx, _| gx.iter_mut().for_each(|d| *d += s));
            }
        }
    }
}
