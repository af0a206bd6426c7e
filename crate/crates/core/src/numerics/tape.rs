//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every operation appends one node whose inputs are strictly earlier nodes,
//! so the node order is already a topological order and `backward` is a
//! single reverse sweep.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed differentiable operations.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zero-filled when `v` is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); self.shapes[v.0]])
    }
}

fn same_shape(what: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("{what}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn gelu_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_pdf<T: Scalar>(x: T) -> T {
    let inv_sqrt_2pi = T::lit(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-(x * x) * T::lit(0.5)).exp()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.with_requires_grad(needs_grad),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad();
        let mut t = tensor;
        t.clear_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Records a leaf that gradients flow into.
    pub fn variable(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let needs = self.needs(&[a]);
        Ok(self.push(out, Op::Transpose(a), needs))
    }

    fn zip_with(&self, what: &str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(what, self.shape(a), self.shape(b))?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    /// `x[i, j] + bias[j]` for a 2-D `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(bias).numel() != n {
            return Err(Error::dim(format!(
                "row bias of shape {:?} does not match {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.data(bias);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n.max(1)).take(m) {
            for (o, &bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), needs))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let needs = self.needs(&[a]);
        self.push(out, Op::Scale(a, c), needs)
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * gelu_cdf(x));
        let needs = self.needs(&[a]);
        self.push(out, Op::Gelu(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let needs = self.needs(&[a]);
        self.push(out, Op::Sigmoid(a), needs)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * axis_len + k) * inner + i;
                let max = (0..axis_len)
                    .map(|k| src[at(k)])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..axis_len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..axis_len {
                    out[at(k)] /= total;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            },
            needs,
        ))
    }

    /// Normalizes over the last axis with population variance, then applies
    /// `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::dim("layer_norm on a 0-D tensor"))?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::dim(format!(
                "layer_norm over axis of length {n} with gamma {:?} and beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let rows = src.len().checked_div(n).unwrap_or(0);
        let nf = T::from_usize(n).unwrap();
        let mut out = vec![T::zero(); src.len()];
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(shape, out)?;
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum::<T>();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let s = self.data(a).iter().copied().sum::<T>() / T::from_usize(n).unwrap();
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), needs))
    }

    /// Mean of squared differences between `a` and `b`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Selects rows of a 2-D tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let src = self.data(x);
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= m {
                return Err(Error::Index(format!("row {i} out of range for {m} rows")));
            }
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(vec![index.len(), n], out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let (_, n) = self.dims2(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != n {
                return Err(Error::dim(format!(
                    "concat_rows: {:?} and {:?} differ in columns",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let out = Tensor::new(vec![rows, n], out)?;
        let needs = self.needs(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start > end || end > n {
            return Err(Error::Index(format!(
                "column range {start}..{end} out of bounds for {n} columns"
            )));
        }
        let w = end - start;
        let src = self.data(x);
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let out = Tensor::new(vec![m, w], out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != m {
                return Err(Error::dim(format!(
                    "concat_cols: {:?} and {:?} differ in rows",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![m, total], out)?;
        let needs = self.needs(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets,
    /// evaluated in the overflow-free logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let x = self.data(logits);
        if x.len() != targets.len() || x.is_empty() {
            return Err(Error::dim(format!(
                "bce: {} logits against {} targets",
                x.len(),
                targets.len()
            )));
        }
        let n = T::from_usize(x.len()).unwrap();
        let total = x
            .iter()
            .zip(targets)
            .map(|(&l, &y)| l.max(T::zero()) - l * y + (T::one() + (-l.abs()).exp()).ln())
            .sum::<T>();
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// Propagates d(loss)/d(node) to every node that requires gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.numel()).collect(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a).expect("2-D");
                let (_, n) = self.dims2(*b).expect("2-D");
                if let Some(ga) = self.slot(grads, *a) {
                    // ga += g (m x n) * b^T (n x k)
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        n as isize,
                        1,
                        self.data(*b),
                        1,
                        n as isize,
                        T::one(),
                        ga,
                    );
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // gb += a^T (k x m) * g (m x n)
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.data(*a),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        T::one(),
                        gb,
                    );
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims2(*a).expect("2-D");
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, &x)| *o -= x);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &x), &bv) in ga.iter_mut().zip(g).zip(self.data(*b)) {
                        *o += x * bv;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, &x), &av) in gb.iter_mut().zip(g).zip(self.data(*a)) {
                        *o += x * av;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                let (_, n) = self.dims2(*x).expect("2-D");
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in g.chunks(n.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &v)| *o += *c * v);
                }
            }
            Op::Gelu(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &v), &x) in ga.iter_mut().zip(g).zip(self.data(*a)) {
                        *o += v * (gelu_cdf(x) + x * gelu_pdf(x));
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &v), &s) in ga.iter_mut().zip(g).zip(y) {
                        *o += v * s * (T::one() - s);
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |k: usize| (o * axis_len + k) * inner + i;
                            let dot = (0..*axis_len).map(|k| g[at(k)] * y[at(k)]).sum::<T>();
                            for k in 0..*axis_len {
                                gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).numel();
                let rows = rstd.len();
                let gm = self.data(*gamma);
                if let Some(gb) = self.slot(grads, *beta) {
                    for row in g.chunks(n).take(rows) {
                        gb.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (row, hrow) in g.chunks(n).zip(xhat.chunks(n)).take(rows) {
                        for j in 0..n {
                            gg[j] += row[j] * hrow[j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let nf = T::from_usize(n).unwrap();
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_gh = T::zero();
                        let mut mean_ghx = T::zero();
                        for j in 0..n {
                            let gh = gr[j] * gm[j];
                            mean_gh += gh;
                            mean_ghx += gh * hr[j];
                        }
                        mean_gh /= nf;
                        mean_ghx /= nf;
                        for j in 0..n {
                            let gh = gr[j] * gm[j];
                            gx[r * n + j] += rstd[r] * (gh - mean_gh - hr[j] * mean_ghx);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).numel()).unwrap();
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0] / n);
                }
            }
            Op::GatherRows { x, index } => {
                let (_, n) = self.dims2(*x).expect("2-D");
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &src) in index.iter().enumerate() {
                        for j in 0..n {
                            gx[src * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if let Some(gp) = self.slot(grads, *p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(o, &v)| *o += v);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims2(*x).expect("2-D");
                let w = node.value.shape()[1];
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..m {
                        for j in 0..w {
                            gx[i * n + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let m = node.value.shape()[0];
                let mut col = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if let Some(gp) = self.slot(grads, *p) {
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let n = T::from_usize(targets.len()).unwrap();
                if let Some(gl) = self.slot(grads, *logits) {
                    for ((o, &l), &y) in gl.iter_mut().zip(self.data(*logits)).zip(targets) {
                        *o += g[0] * (sigmoid(l) - y) / n;
                    }
                }
            }
        }
    }
}

