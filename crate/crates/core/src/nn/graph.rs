//! Reverse-mode automatic differentiation over matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so a single reverse sweep visits each node
//! after all of its consumers.

use super::params::{ParamId, ParamStore};
use super::tensor::{Matrix, Scalar};

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
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Matrix<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Sigmoid(Var),
    GatherRows(Var, Vec<usize>),
    Mean(Var),
    /// Scalar objective whose gradient w.r.t. its input was computed eagerly.
    Objective(Var, Matrix<T>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    param: Option<ParamId>,
}

/// Gradients of one scalar output with respect to every node.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }

    /// Accumulates parameter gradients into `out`, indexed by parameter id.
    /// A parameter used several times in the graph receives the sum.
    pub fn accumulate_params(&self, out: &mut [Matrix<T>]) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                out[pid.index()].add_assign(g);
            }
        }
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf holding a copy of a trainable parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Values of every softmax node, in creation order.
    pub fn softmax_outputs(&self) -> impl Iterator<Item = &Matrix<T>> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Softmax(_)))
            .map(|n| &n.value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let bias = self.value(row);
        assert_eq!(bias.rows(), 1, "add_row expects a single row");
        assert_eq!(bias.cols(), self.value(a).cols(), "add_row width");
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            for (o, &b) in v.row_mut(r).iter_mut().zip(bias.data()) {
                *o = *o + b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let v = Matrix::from_vec(x.rows(), x.cols(), data);
        self.push(v, Op::Mul(a, b))
    }

    /// Scales row `i` of `a` by `col[i]`, where `col` is `m × 1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (x, g) = (self.value(a), self.value(col));
        assert_eq!(g.shape(), (x.rows(), 1), "mul_col gate shape");
        let mut v = x.clone();
        for r in 0..v.rows() {
            let s = g.get(r, 0);
            v.row_mut(r).iter_mut().for_each(|e| *e = *e * s);
        }
        self.push(v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = Matrix::from_vec(rows, cols, self.value(a).data().to_vec());
        self.push(v, Op::Reshape(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows width");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.rows(), "slice_rows range");
        let data = m.data()[start * m.cols()..(start + len) * m.cols()].to_vec();
        let v = Matrix::from_vec(len, m.cols(), data);
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols height");
            for r in 0..rows {
                v.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols(), "slice_cols range");
        let v = Matrix::from_fn(m.rows(), len, |r, c| m.get(r, start + c));
        self.push(v, Op::SliceCols(a, start))
    }

    /// Row-wise softmax. Columns with `allowed[c] == false` get zero weight.
    pub fn softmax(&mut self, a: Var, allowed: Option<&[bool]>) -> Var {
        let m = self.value(a);
        if let Some(mask) = allowed {
            assert_eq!(mask.len(), m.cols(), "softmax mask width");
        }
        let keep = |c: usize| allowed.is_none_or(|mask| mask[c]);
        let mut v = Matrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            let row = m.row(r);
            let max = (0..m.cols())
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(T::neg_infinity(), T::max);
            let out = v.row_mut(r);
            let mut total = T::zero();
            for c in 0..row.len() {
                if keep(c) {
                    out[c] = (row[c] - max).exp();
                    total = total + out[c];
                }
            }
            out.iter_mut().for_each(|e| *e = *e / total);
        }
        self.push(v, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let m = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let n = T::of(m.cols() as f64);
        let mut normed = Matrix::zeros(m.rows(), m.cols());
        let mut inv_std = Vec::with_capacity(m.rows());
        let mut v = Matrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            let row = m.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            inv_std.push(rstd);
            for c in 0..m.cols() {
                let h = (row[c] - mean) * rstd;
                normed.set(r, c, h);
                v.set(r, c, h * g.get(0, c) + b.get(0, c));
            }
        }
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::of(GELU_C), T::of(GELU_A));
        let half = T::of(0.5);
        let v = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let v = Matrix::from_vec(ids.len(), t.cols(), data);
        self.push(v, Op::GatherRows(table, ids.to_vec()))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = m.sum() / T::of(m.len() as f64);
        self.push(Matrix::filled(1, 1, v), Op::Mean(a))
    }

    /// Records a scalar objective `value` of `input` whose gradient has been
    /// computed by the caller.
    pub fn objective(&mut self, input: Var, value: T, grad: Matrix<T>) -> Var {
        assert_eq!(grad.shape(), self.value(input).shape(), "objective gradient shape");
        self.push(Matrix::filled(1, 1, value), Op::Objective(input, grad))
    }

    /// Back-propagates from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, T::one()));

        fn acc<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = dy.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&dy);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = dy.matmul(self.value(*b));
                    let db = dy.t_matmul(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Transpose(a) => acc(&mut grads, *a, dy.transpose()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy.clone());
                }
                Op::AddRow(a, row) => {
                    let mut db = Matrix::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (o, &g) in db.data_mut().iter_mut().zip(dy.row(r)) {
                            *o = *o + g;
                        }
                    }
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *row, db);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let da = Matrix::from_vec(
                        dy.rows(),
                        dy.cols(),
                        dy.data().iter().zip(y.data()).map(|(&g, &q)| g * q).collect(),
                    );
                    let db = Matrix::from_vec(
                        dy.rows(),
                        dy.cols(),
                        dy.data().iter().zip(x.data()).map(|(&g, &p)| g * p).collect(),
                    );
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MulCol(a, col) => {
                    let (x, gate) = (self.value(*a), self.value(*col));
                    let mut da = dy.clone();
                    let mut dg = Matrix::zeros(gate.rows(), 1);
                    for r in 0..dy.rows() {
                        let s = gate.get(r, 0);
                        da.row_mut(r).iter_mut().for_each(|e| *e = *e * s);
                        let d: T = dy.row(r).iter().zip(x.row(r)).map(|(&g, &v)| g * v).sum();
                        dg.set(r, 0, d);
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *col, dg);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, dy.scale(*s)),
                Op::Reshape(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut grads, *a, Matrix::from_vec(r, c, dy.data().to_vec()));
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let cols = dy.cols();
                        let slice = dy.data()[offset * cols..(offset + rows) * cols].to_vec();
                        acc(&mut grads, p, Matrix::from_vec(rows, cols, slice));
                        offset += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    let cols = src.cols();
                    da.data_mut()[start * cols..(start + dy.rows()) * cols]
                        .copy_from_slice(dy.data());
                    acc(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let part = Matrix::from_fn(dy.rows(), cols, |r, c| dy.get(r, offset + c));
                        acc(&mut grads, p, part);
                        offset += cols;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..dy.rows() {
                        da.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                    }
                    acc(&mut grads, *a, da);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: T = dy.row(r).iter().zip(y.row(r)).map(|(&g, &p)| g * p).sum();
                        for c in 0..y.cols() {
                            da.set(r, c, y.get(r, c) * (dy.get(r, c) - dot));
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normed,
                    inv_std,
                } => {
                    let g = self.value(*gamma);
                    let (rows, cols) = normed.shape();
                    let n = T::of(cols as f64);
                    let mut dgamma = Matrix::zeros(1, cols);
                    let mut dbeta = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for c in 0..cols {
                            let d = dy.get(r, c);
                            let h = normed.get(r, c);
                            dgamma.data_mut()[c] = dgamma.data()[c] + d * h;
                            dbeta.data_mut()[c] = dbeta.data()[c] + d;
                            let dh = d * g.get(0, c);
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * h;
                        }
                        let scale = inv_std[r] / n;
                        for c in 0..cols {
                            let dh = dy.get(r, c) * g.get(0, c);
                            let h = normed.get(r, c);
                            dx.set(r, c, scale * (n * dh - sum_dh - h * sum_dh_h));
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dgamma);
                    acc(&mut grads, *beta, dbeta);
                }
                Op::Gelu(a) => {
                    let (c, k) = (T::of(GELU_C), T::of(GELU_A));
                    let half = T::of(0.5);
                    let three = T::of(3.0);
                    let x = self.value(*a);
                    let data = x
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &g)| {
                            let t = (c * (v + k * v * v * v)).tanh();
                            let d = half * (T::one() + t)
                                + half * v * (T::one() - t * t) * c * (T::one() + three * k * v * v);
                            g * d
                        })
                        .collect();
                    acc(&mut grads, *a, Matrix::from_vec(x.rows(), x.cols(), data));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let data = y
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&p, &g)| g * p * (T::one() - p))
                        .collect();
                    acc(&mut grads, *a, Matrix::from_vec(y.rows(), y.cols(), data));
                }
                Op::GatherRows(table, ids) => {
                    let t = self.value(*table);
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for (r, &i) in ids.iter().enumerate() {
                        for (o, &g) in dt.row_mut(i).iter_mut().zip(dy.row(r)) {
                            *o = *o + g;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::Mean(a) => {
                    let src = self.value(*a);
                    let g = dy.get(0, 0) / T::of(src.len() as f64);
                    acc(&mut grads, *a, Matrix::filled(src.rows(), src.cols(), g));
                }
                Op::Objective(a, grad) => {
                    acc(&mut grads, *a, grad.scale(dy.get(0, 0)));
                }
            }
            grads[idx] = Some(dy);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Gradients { grads, params }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
