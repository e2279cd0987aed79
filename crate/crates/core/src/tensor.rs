//! Dense row-major `f64` tensors and a tape for reverse-mode differentiation.
//!
//! Every differentiable operation is recorded on a [`Tape`] as it runs. The
//! tape is append-only, so node indices are already a topological order and
//! [`Tape::backward`] simply walks them in reverse. Gradients of nodes that
//! feed several consumers are accumulated with `+=`.
//!
//! Shapes are explicit. The only broadcasting is a length-`n` vector applied
//! to every row of an `m x n` matrix ([`Tape::add_row`], [`Tape::mul_row`]).
//! Each operation checks its output for NaN/Inf and fails with
//! [`Error::InvalidValue`] instead of letting non-finite values propagate.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` of a matrix; vectors are treated as one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [n] => Ok((1, *n)),
            s => Err(Error::contract(format!(
                "expected a matrix, got shape {s:?}"
            ))),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[r * cols..(r + 1) * cols]
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

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Exp(Var),
    Ln(Var),
    Powf(Var, f64),
    ClampMin(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, f64),
    Embedding(Var, Vec<usize>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<(usize, usize)>),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    SumRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the differentiable leaves reached by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros shaped like `like` when none reached it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape.clone()))
    }
}

fn check_same(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::contract(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn softmax_row(row: &[f64], out: &mut [f64], active: usize) {
    let max = row[..active]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out[..active].iter_mut().zip(&row[..active]) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in &mut out[..active] {
        *o /= total;
    }
    for o in &mut out[active..] {
        *o = 0.0;
    }
}

/// Row-wise log-softmax of a `rows x cols` buffer, stabilized by max subtraction.
pub fn log_softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, o) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (oo, &v) in o.iter_mut().zip(row) {
            *oo = v - lse;
        }
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::InvalidValue { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. It receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        let rg = tensor.requires_grad;
        self.push(tensor, Op::Leaf, rg, "leaf")
    }

    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(true))
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let av = self.value(a);
        let data = av.data.iter().map(|&x| f(x)).collect();
        let value = Tensor::new(av.shape.clone(), data)?;
        let ng = self.needs(a);
        self.push(value, op, ng, name)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same(av, bv, name)?;
        let data = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape.clone(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "scale", |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "add_scalar", |x| x + c, Op::AddScalar(a))
    }

    /// Elementwise product with a constant of the same shape (masks, dropout).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.numel() {
            return Err(Error::contract("mul_const: mask length mismatch"));
        }
        let data = av.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(av.shape.clone(), data)?;
        let ng = self.needs(a);
        self.push(value, Op::MulConst(a, mask), ng, "mul_const")
    }

    /// Inverted dropout with keep-probability `1 - rate`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let mask = (0..self.value(a).numel())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.mul_const(a, mask)
    }

    fn row_broadcast(&mut self, a: Var, b: Var, name: &'static str) -> Result<(usize, usize)> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(b).numel() != n {
            return Err(Error::contract(format!(
                "{name}: row vector of length {} against {n} columns",
                self.value(b).numel()
            )));
        }
        Ok((m, n))
    }

    /// `a[m, n] + b[n]` applied to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast(a, b, "add_row")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv.data[i % n])
            .collect();
        let value = Tensor::new(av.shape.clone(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::AddRow(a, b), ng, "add_row")
    }

    /// `a[m, n] * b[n]` applied to every row.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast(a, b, "mul_row")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv.data[i % n])
            .collect();
        let value = Tensor::new(av.shape.clone(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MulRow(a, b), ng, "mul_row")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::contract(format!(
                "matmul: inner dimensions {k} and {k2} differ"
            )));
        }
        let data = matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n);
        let value = Tensor::matrix(m, n, data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let av = &self.value(a).data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = av[i * n + j];
            }
        }
        let value = Tensor::matrix(n, m, data)?;
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a), ng, "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = Tensor::new(shape, self.value(a).data.clone())?;
        let ng = self.needs(a);
        self.push(value, Op::Reshape(a), ng, "reshape")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "ln", f64::ln, Op::Ln(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary(a, "powf", |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        self.unary(a, "clamp_min", |x| x.max(lo), Op::ClampMin(a, lo))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "gelu", |x| gelu_parts(x).0, Op::Gelu(a))
    }

    /// Row-wise softmax. With `causal`, row `i` only attends to columns `0..=i`
    /// and the remaining entries are exactly zero.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let av = &self.value(a).data;
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let active = if causal { (r + 1).min(n) } else { n };
            softmax_row(
                &av[r * n..(r + 1) * n],
                &mut data[r * n..(r + 1) * n],
                active,
            );
        }
        let value = Tensor::new(self.value(a).shape.clone(), data)?;
        let ng = self.needs(a);
        self.push(value, Op::Softmax(a), ng, "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if !av.is_finite() {
            return Err(Error::InvalidValue { op: "log_softmax" });
        }
        let (_, n) = av.dims2()?;
        if n == 0 {
            return Err(Error::contract("log_softmax over an empty vocabulary"));
        }
        let value = Tensor::new(av.shape.clone(), log_softmax_rows(&av.data, n))?;
        let ng = self.needs(a);
        self.push(value, Op::LogSoftmax(a), ng, "log_softmax")
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let av = &self.value(a).data;
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &av[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, x) in data[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
        }
        let value = Tensor::new(self.value(a).shape.clone(), data)?;
        let ng = self.needs(a);
        self.push(value, Op::LayerNorm(a, eps), ng, "layer_norm")
    }

    /// Row lookup `table[ids[i]]` producing `ids.len() x dim`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        let tv = &self.value(table).data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::InvalidToken {
                    token: id,
                    vocab_size: v,
                });
            }
            data.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let value = Tensor::matrix(ids.len(), d, data)?;
        let ng = self.needs(table);
        self.push(value, Op::Embedding(table, ids.to_vec()), ng, "embedding")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if start + len > n {
            return Err(Error::contract("slice_cols: range out of bounds"));
        }
        let av = &self.value(a).data;
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&av[r * n + start..r * n + start + len]);
        }
        let value = Tensor::matrix(m, len, data)?;
        let ng = self.needs(a);
        self.push(value, Op::SliceCols(a, start), ng, "slice_cols")
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if start + len > m {
            return Err(Error::contract("slice_rows: range out of bounds"));
        }
        let data = self.value(a).data[start * n..(start + len) * n].to_vec();
        let value = Tensor::matrix(len, n, data)?;
        let ng = self.needs(a);
        self.push(value, Op::SliceRows(a, start), ng, "slice_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols: no inputs"))?;
        let (m, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(Error::contract("concat_cols: row counts differ"));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::matrix(m, total, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng, "concat_cols")
    }

    /// Picks `a[r, c]` for each `(r, c)` into a vector.
    pub fn gather(&mut self, a: Var, idx: Vec<(usize, usize)>) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let av = &self.value(a).data;
        let mut data = Vec::with_capacity(idx.len());
        for &(r, c) in &idx {
            if r >= m || c >= n {
                return Err(Error::contract(format!(
                    "gather: index ({r}, {c}) outside {m}x{n}"
                )));
            }
            data.push(av[r * n + c]);
        }
        let value = Tensor::new(vec![idx.len()], data)?;
        let ng = self.needs(a);
        self.push(value, Op::Gather(a, idx), ng, "gather")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data.iter().sum());
        let ng = self.needs(a);
        self.push(value, Op::Sum(a), ng, "sum")
    }

    /// `sum_i w_i * a_i` with constant weights; zero weights mask entries out.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if weights.len() != av.numel() {
            return Err(Error::contract("weighted_sum: weight length mismatch"));
        }
        let value = Tensor::scalar(av.data.iter().zip(&weights).map(|(x, w)| x * w).sum());
        let ng = self.needs(a);
        self.push(value, Op::WeightedSum(a, weights), ng, "weighted_sum")
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let av = &self.value(a).data;
        let data = (0..m)
            .map(|r| av[r * n..(r + 1) * n].iter().sum())
            .collect();
        let value = Tensor::new(vec![m], data)?;
        let ng = self.needs(a);
        self.push(value, Op::SumRows(a), ng, "sum_rows")
    }

    /// Reverse pass from a scalar `loss`. Nodes are visited once each, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = Vec::new();
        leaves.resize_with(loss.0 + 1, || None);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::new(node.value.shape.clone(), g)?);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g)
                });
                self.acc(grads, *b, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g)
                });
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g)
                });
                self.acc(grads, *b, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                self.acc(grads, *a, |d| {
                    for ((d, g), b) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * b;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, g), a) in d.iter_mut().zip(g).zip(av) {
                        *d += g * a;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c)
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.acc(grads, *a, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g)
                });
            }
            Op::MulConst(a, m) => {
                self.acc(grads, *a, |d| {
                    for ((d, g), m) in d.iter_mut().zip(g).zip(m) {
                        *d += g * m;
                    }
                });
            }
            Op::AddRow(a, b) => {
                let n = self.value(*b).numel();
                self.acc(grads, *a, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g)
                });
                self.acc(grads, *b, |d| {
                    for (k, gv) in g.iter().enumerate() {
                        d[k % n] += gv;
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                let n = bv.len();
                self.acc(grads, *a, |d| {
                    for (k, (d, gv)) in d.iter_mut().zip(g).enumerate() {
                        *d += gv * bv[k % n];
                    }
                });
                self.acc(grads, *b, |d| {
                    for (k, (gv, x)) in g.iter().zip(av).enumerate() {
                        d[k % n] += gv * x;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("recorded matmul");
                let (_, n) = self.value(*b).dims2().expect("recorded matmul");
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                self.acc(grads, *a, |d| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            d[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = av[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (dd, gv) in d[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *dd += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().expect("recorded transpose");
                self.acc(grads, *a, |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y;
                    }
                });
            }
            Op::Ln(a) => {
                let av = &self.value(*a).data;
                self.acc(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g / x;
                    }
                });
            }
            Op::Powf(a, p) => {
                let av = &self.value(*a).data;
                let p = *p;
                self.acc(grads, *a, |d| {
                    if p == 0.0 {
                        return;
                    }
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * p * x.powf(p - 1.0);
                    }
                });
            }
            Op::ClampMin(a, lo) => {
                let av = &self.value(*a).data;
                self.acc(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        if x > lo {
                            *d += g;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = &self.value(*a).data;
                self.acc(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * gelu_parts(*x).1;
                    }
                });
            }
            Op::Softmax(a) => {
                let n = *node.value.shape.last().unwrap_or(&1);
                self.acc(grads, *a, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((dd, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dd += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let n = *node.value.shape.last().unwrap_or(&1);
                self.acc(grads, *a, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let gsum: f64 = grow.iter().sum();
                        for ((dd, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dd += gv - yv.exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm(a, eps) => {
                let n = *node.value.shape.last().unwrap_or(&1);
                let av = &self.value(*a).data;
                self.acc(grads, *a, |d| {
                    for (r, ((drow, grow), yrow)) in d
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(y.chunks(n))
                        .enumerate()
                    {
                        let xrow = &av[r * n..(r + 1) * n];
                        let mean = xrow.iter().sum::<f64>() / n as f64;
                        let var =
                            xrow.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = grow.iter().sum::<f64>() / n as f64;
                        let gy = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                        for ((dd, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dd += inv * (gv - gmean - yv * gy);
                        }
                    }
                });
            }
            Op::Embedding(table, ids) => {
                let dim = *node.value.shape.last().unwrap_or(&1);
                self.acc(grads, *table, |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (dd, gv) in d[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(&g[r * dim..(r + 1) * dim])
                        {
                            *dd += gv;
                        }
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(*a).dims2().expect("recorded slice");
                let len = *node.value.shape.last().unwrap_or(&1);
                self.acc(grads, *a, |d| {
                    for r in 0..m {
                        for (dd, gv) in d[r * n + start..r * n + start + len]
                            .iter_mut()
                            .zip(&g[r * len..(r + 1) * len])
                        {
                            *dd += gv;
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let n = self.value(*a).dims2().expect("recorded slice").1;
                let offset = start * n;
                self.acc(grads, *a, |d| {
                    for (dd, gv) in d[offset..offset + g.len()].iter_mut().zip(g) {
                        *dd += gv;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = *node.value.shape.last().unwrap_or(&1);
                let m = node.value.numel() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().expect("recorded concat").1;
                    self.acc(grads, p, |d| {
                        for r in 0..m {
                            for (dd, gv) in d[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g[r * total + offset..r * total + offset + w])
                            {
                                *dd += gv;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Gather(a, idx) => {
                let n = self.value(*a).dims2().expect("recorded gather").1;
                self.acc(grads, *a, |d| {
                    for (&(r, c), gv) in idx.iter().zip(g) {
                        d[r * n + c] += gv;
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::WeightedSum(a, w) => {
                let g0 = g[0];
                self.acc(grads, *a, |d| {
                    for (d, w) in d.iter_mut().zip(w) {
                        *d += g0 * w;
                    }
                });
            }
            Op::SumRows(a) => {
                let n = self.value(*a).dims2().expect("recorded sum_rows").1;
                self.acc(grads, *a, |d| {
                    for (k, dd) in d.iter_mut().enumerate() {
                        *dd += g[k / n];
                    }
                });
            }
        }
    }
}
