//! Reverse-mode differentiation over a fixed operator set.
//!
//! A [`Tape`] records every intermediate value of one forward pass. Ops are
//! appended in evaluation order, so walking the node list backwards is a
//! valid topological order for the chain rule. One tape belongs to one
//! thread; batch parallelism uses one tape per batch element.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::ops::{layer_norm_into, softmax_into};
use super::tensor::matmul_into;
use super::{NumericsError, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Per-row rotary positions; `None` rows pass through unrotated.
#[derive(Debug)]
struct RopeSpec {
    positions: Vec<Option<f64>>,
    head_dim: usize,
    base: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Silu(Var),
    Softplus(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm(Var, f64),
    Rope(Var, Arc<RopeSpec>),
    Gather(Var, Arc<[usize]>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    RescaleSum(Var, f64),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Rotate consecutive pairs of each head by `sign * pos * base^(-2i/head_dim)`.
fn rope_rows<T: Scalar>(src: &[T], cols: usize, spec: &RopeSpec, sign: f64) -> Vec<T> {
    let mut out = src.to_vec();
    let half = spec.head_dim / 2;
    for (r, pos) in spec.positions.iter().enumerate() {
        let Some(p) = pos else { continue };
        let row = &mut out[r * cols..(r + 1) * cols];
        for head in row.chunks_mut(spec.head_dim) {
            for i in 0..half {
                let theta = sign * p * spec.base.powf(-2.0 * i as f64 / spec.head_dim as f64);
                let (s, c) = theta.sin_cos();
                let (s, c) = (T::of(s), T::of(c));
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<T>, name: &'static str, op: Op) -> Result<Var> {
        let value = Tensor::from_op(shape, data, name)?;
        Ok(self.push(value, op))
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Trainable input; gradients are reported under `id`.
    pub fn param(&mut self, id: usize, t: Tensor<T>) -> Var {
        self.push(t, Op::Param(id))
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(mismatch(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.out(vec![m, n], out, "matmul", Op::MatMul(a, b))
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_nt")?;
        let (n, k2) = self.mat_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(mismatch("matmul_nt", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bd[j * k..(j + 1) * k];
                out[i * n + j] = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
            }
        }
        self.out(vec![m, n], out, "matmul_nt", Op::MatMulNT(a, b))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.out(shape, data, name, op)
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(T) -> T, op: Op) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.out(shape, data, name, op)
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

    /// Adds the vector `r` to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(r).len() != cols {
            return Err(mismatch("add_row", self.shape(x), self.shape(r)));
        }
        let rv = self.value(r).data();
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(rv).map(|(&a, &b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.out(shape, data, "add_row", Op::AddRow(x, r))
    }

    /// Multiplies `x` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(mismatch("mul_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data()[0];
        self.unary(x, "mul_scalar", |v| v * sv, Op::MulScalar(x, s))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let cv = T::of(c);
        self.unary(x, "scale", |v| v * cv, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let cv = T::of(c);
        self.unary(x, "offset", |v| v + cv, Op::Offset(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "silu", |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            "softplus",
            |v| v.max(T::zero()) + (T::one() + (-v.abs()).exp()).ln(),
            Op::Softplus(x),
        )
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "square", |v| v * v, Op::Square(x))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        let mut out = vec![T::zero(); self.value(x).len()];
        for (src, dst) in self.value(x).data().chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_into(src, dst);
        }
        let shape = self.shape(x).to_vec();
        self.out(shape, out, "softmax", Op::Softmax(x))
    }

    /// Layer normalization along the last axis, without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        let mut out = vec![T::zero(); self.value(x).len()];
        for (src, dst) in self.value(x).data().chunks(cols).zip(out.chunks_mut(cols)) {
            layer_norm_into(src, T::of(eps), dst);
        }
        let shape = self.shape(x).to_vec();
        self.out(shape, out, "layer_norm", Op::LayerNorm(x, eps))
    }

    /// Rotary embedding on a `[rows, heads*head_dim]` matrix. Row `r` is
    /// rotated by `positions[r]`; `None` leaves the row unchanged.
    pub fn rope(&mut self, x: Var, positions: Vec<Option<f64>>, head_dim: usize, base: f64) -> Result<Var> {
        let (rows, cols) = self.mat_dims(x, "rope")?;
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(NumericsError::Invalid(format!(
                "rope needs an even head dim, got {head_dim}"
            )));
        }
        if cols % head_dim != 0 || positions.len() != rows {
            return Err(mismatch("rope", self.shape(x), &[positions.len(), head_dim]));
        }
        let spec = Arc::new(RopeSpec {
            positions,
            head_dim,
            base,
        });
        let data = rope_rows(self.value(x).data(), cols, &spec, 1.0);
        self.out(vec![rows, cols], data, "rope", Op::Rope(x, spec))
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != index.len() || index.iter().any(|&i| i >= n) {
            return Err(mismatch("gather", self.shape(x), &shape));
        }
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        self.out(shape, data, "gather", Op::Gather(x, index))
    }

    /// Column block `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.mat_dims(x, "slice_cols")?;
        if start + len > cols {
            return Err(mismatch("slice_cols", self.shape(x), &[start, len]));
        }
        let idx: Arc<[usize]> = (0..rows)
            .flat_map(|r| (start..start + len).map(move |c| r * cols + c))
            .collect();
        self.gather(x, idx, vec![rows, len])
    }

    /// Selects (and may repeat) rows of a matrix.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (_, cols) = self.mat_dims(x, "select_rows")?;
        let idx: Arc<[usize]> = rows
            .iter()
            .flat_map(|&r| (0..cols).map(move |c| r * cols + c))
            .collect();
        self.gather(x, idx, vec![rows.len(), cols])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let idx: Arc<[usize]> = (0..self.value(x).len()).collect();
        self.gather(x, idx, shape)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NumericsError::Empty("concat_rows"))?;
        let cols = self.mat_dims(first, "concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.mat_dims(p, "concat_rows")?;
            if c != cols {
                return Err(mismatch("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.out(vec![rows, cols], data, "concat_rows", Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NumericsError::Empty("concat_cols"))?;
        let rows = self.mat_dims(first, "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat_dims(p, "concat_cols")?;
            if r != rows {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.out(vec![rows, total], data, "concat_cols", Op::ConcatCols(parts.to_vec()))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.out(vec![1], vec![s], "sum", Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.out(vec![1], vec![s], "mean", Op::Mean(x))
    }

    /// Column means of a matrix: `[rows, cols] -> [1, cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, _) = self.mat_dims(x, "mean_rows")?;
        let ones = self.constant(Tensor::filled(&[1, rows], T::of(1.0 / rows as f64)));
        self.matmul(ones, x)
    }

    /// `x * total / sum(x)`; used to stretch durations to a frame budget.
    pub fn rescale_sum(&mut self, x: Var, total: f64) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        if s == T::zero() {
            return Err(NumericsError::NonFinite { op: "rescale_sum" });
        }
        let k = T::of(total) / s;
        self.unary(x, "rescale_sum", |v| v * k, Op::RescaleSum(x, total))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let t = self.constant(target);
        let d = self.sub(pred, t)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Reverse sweep from a single-element objective.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NonScalarObjective(self.shape(loss).to_vec()));
        }
        let mut g: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        g[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            self.step_back(node, &gi, &mut g);
            g[i] = Some(gi);
        }

        let mut params: BTreeMap<usize, Vec<T>> = BTreeMap::new();
        for (i, node) in self.nodes[..=loss.0].iter().enumerate() {
            if let (Op::Param(id), Some(gi)) = (&node.op, &g[i]) {
                match params.get_mut(id) {
                    Some(acc) => acc.iter_mut().zip(gi).for_each(|(a, &b)| *a += b),
                    None => {
                        params.insert(*id, gi.clone());
                    }
                }
            }
        }
        let shapes = self.nodes[..=loss.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Grads {
            grads: g,
            shapes,
            params,
        })
    }

    fn step_back(&self, node: &Node<T>, gi: &[T], g: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let acc = |g: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            let slot = &mut g[v.0];
            if slot.is_none() {
                *slot = Some(vec![T::zero(); self.nodes[v.0].value.len()]);
            }
            f(slot.as_mut().unwrap());
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (val(*a), val(*b));
                acc(g, *a, &mut |da| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = T::zero();
                            for j in 0..n {
                                s += gi[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                });
                acc(g, *b, &mut |db| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == T::zero() {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += x * gi[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let (av, bv) = (val(*a), val(*b));
                acc(g, *a, &mut |da| matmul_into(gi, bv, da, m, n, k));
                acc(g, *b, &mut |db| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = gi[i * n + j];
                            if gv == T::zero() {
                                continue;
                            }
                            for p in 0..k {
                                db[j * k + p] += gv * av[i * k + p];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(g, *a, &mut |d| d.iter_mut().zip(gi).for_each(|(x, &y)| *x += y));
                acc(g, *b, &mut |d| d.iter_mut().zip(gi).for_each(|(x, &y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(g, *a, &mut |d| d.iter_mut().zip(gi).for_each(|(x, &y)| *x += y));
                acc(g, *b, &mut |d| d.iter_mut().zip(gi).for_each(|(x, &y)| *x -= y));
            }
            Op::AddRow(x, r) => {
                let cols = self.nodes[x.0].value.cols();
                acc(g, *x, &mut |d| d.iter_mut().zip(gi).for_each(|(a, &b)| *a += b));
                acc(g, *r, &mut |d| {
                    for row in gi.chunks(cols) {
                        d.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(g, *a, &mut |d| {
                    for ((x, &gv), &y) in d.iter_mut().zip(gi).zip(bv) {
                        *x += gv * y;
                    }
                });
                acc(g, *b, &mut |d| {
                    for ((x, &gv), &y) in d.iter_mut().zip(gi).zip(av) {
                        *x += gv * y;
                    }
                });
            }
            Op::MulScalar(x, s) => {
                let sv = val(*s)[0];
                let xv = val(*x);
                acc(g, *x, &mut |d| d.iter_mut().zip(gi).for_each(|(a, &b)| *a += b * sv));
                let ds: T = gi.iter().zip(xv).map(|(&a, &b)| a * b).sum();
                acc(g, *s, &mut |d| d[0] += ds);
            }
            Op::Scale(x, c) => {
                let c = T::of(*c);
                acc(g, *x, &mut |d| d.iter_mut().zip(gi).for_each(|(a, &b)| *a += b * c));
            }
            Op::Offset(x) => {
                acc(g, *x, &mut |d| d.iter_mut().zip(gi).for_each(|(a, &b)| *a += b));
            }
            Op::Silu(x) => {
                let xv = val(*x);
                acc(g, *x, &mut |d| {
                    for ((a, &gv), &v) in d.iter_mut().zip(gi).zip(xv) {
                        let s = sigmoid(v);
                        *a += gv * s * (T::one() + v * (T::one() - s));
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                acc(g, *x, &mut |d| {
                    for ((a, &gv), &v) in d.iter_mut().zip(gi).zip(xv) {
                        *a += gv * sigmoid(v);
                    }
                });
            }
            Op::Square(x) => {
                let xv = val(*x);
                acc(g, *x, &mut |d| {
                    for ((a, &gv), &v) in d.iter_mut().zip(gi).zip(xv) {
                        *a += gv * (v + v);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = node.value.cols();
                acc(g, *x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(cols).zip(gi.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm(x, eps) => {
                let xv = val(*x);
                let y = node.value.data();
                let cols = node.value.cols();
                let n = T::of(cols as f64);
                let eps = T::of(*eps);
                acc(g, *x, &mut |d| {
                    let mut scratch = vec![T::zero(); cols];
                    for (r, dr) in d.chunks_mut(cols).enumerate() {
                        let xr = &xv[r * cols..(r + 1) * cols];
                        let inv = layer_norm_into(xr, eps, &mut scratch);
                        let gr = &gi[r * cols..(r + 1) * cols];
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gm = gr.iter().copied().sum::<T>() / n;
                        let gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *o += inv * (gv - gm - yv * gy);
                        }
                    }
                });
            }
            Op::Rope(x, spec) => {
                let cols = node.value.cols();
                let back = rope_rows(gi, cols, spec, -1.0);
                acc(g, *x, &mut |d| d.iter_mut().zip(&back).for_each(|(a, &b)| *a += b));
            }
            Op::Gather(x, index) => {
                acc(g, *x, &mut |d| {
                    for (&i, &gv) in index.iter().zip(gi) {
                        d[i] += gv;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(g, p, &mut |d| {
                        d.iter_mut().zip(&gi[off..off + n]).for_each(|(a, &b)| *a += b)
                    });
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut col0 = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    acc(g, p, &mut |d| {
                        for r in 0..rows {
                            let src = &gi[r * total + col0..r * total + col0 + w];
                            d[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, &b)| *a += b);
                        }
                    });
                    col0 += w;
                }
            }
            Op::Sum(x) => {
                let gv = gi[0];
                acc(g, *x, &mut |d| d.iter_mut().for_each(|a| *a += gv));
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                let gv = gi[0] / T::of(n as f64);
                acc(g, *x, &mut |d| d.iter_mut().for_each(|a| *a += gv));
            }
            Op::RescaleSum(x, total) => {
                let xv = val(*x);
                let s: T = xv.iter().copied().sum();
                let k = T::of(*total) / s;
                let gx: T = gi.iter().zip(xv).map(|(&a, &b)| a * b).sum::<T>() / s;
                acc(g, *x, &mut |d| {
                    for (a, &gv) in d.iter_mut().zip(gi) {
                        *a += k * (gv - gx);
                    }
                });
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<usize, Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient with respect to any recorded variable (zeros if the
    /// objective does not depend on it).
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone())
                .unwrap_or_else(|_| Tensor::zeros(&self.shapes[v.0])),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Accumulated gradient of parameter `id` across every binding.
    pub fn param(&self, id: usize) -> Option<&[T]> {
        self.params.get(&id).map(|v| v.as_slice())
    }

    pub fn into_params(self) -> BTreeMap<usize, Vec<T>> {
        self.params
    }
}
