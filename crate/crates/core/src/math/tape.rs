//! Reverse-mode differentiation over a dynamically recorded graph.
//!
//! Each forward op appends a node holding its value and its parents. A
//! single `backward` pass from a scalar node walks the record in reverse and
//! returns the gradient of every bound parameter. Shape errors in op
//! construction are programming errors and panic.

use std::collections::{BTreeMap, HashMap};

use crate::error::{MeltError, Result};
use crate::math::ops::sigmoid;
use crate::math::optim::{ParamId, ParamStore};
use crate::math::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    MeanRows(Var),
    SumAll(Var),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    NormalizeRows(Var),
    /// Identity in the forward pass; backward multiplies by `factor`.
    /// Only used to build deliberately broken fixtures for the gradient
    /// checker.
    Faulty(Var, f64),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Parameter gradients produced by [`Tape::backward`].
pub type Gradients = BTreeMap<ParamId, Matrix>;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        debug_assert!(value.is_finite() || matches!(op, Op::Constant), "nonfinite value from {op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant)
    }

    /// Binds a parameter as a leaf. Repeated binds of the same id on one
    /// tape return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).hadamard(self.value(b));
        self.push(v, Op::Mul(a, b))
    }

    /// `x + 1·row`, broadcasting a `1 × C` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a row vector");
        assert_eq!(xv.cols(), rv.cols(), "add_row width mismatch");
        let out = Matrix::from_fn(xv.rows(), xv.cols(), |r, c| xv.get(r, c) + rv.get(0, c));
        self.push(out, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s))
    }

    /// Multiplies `x` by the `1 × 1` node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).as_scalar();
        let v = self.value(x).scale(sv);
        self.push(v, Op::ScaleBy(x, s))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z * sigmoid(z));
        self.push(v, Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = map_rows(self.value(x), |row| crate::math::ops::softmax(row).expect("nonempty row"));
        self.push(v, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let v = map_rows(self.value(x), |row| crate::math::ops::log_softmax(row).expect("nonempty row"));
        self.push(v, Op::LogSoftmaxRows(x))
    }

    /// Column means as a `1 × C` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).mean_rows();
        self.push(v, Op::MeanRows(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Matrix::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x).gather_rows(idx);
        self.push(v, Op::GatherRows(x, idx.to_vec()))
    }

    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x).gather_cols(idx);
        self.push(v, Op::GatherCols(x, idx.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols(), cols, "concat_rows width mismatch");
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let v = Matrix::new(rows, cols, data).expect("consistent concat");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let cols: usize = widths.iter().sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let m = self.value(*p);
            assert_eq!(m.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + w].copy_from_slice(m.row(r));
            }
            offset += w;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Scales every row to unit L2 norm; zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let v = map_rows(self.value(x), |row| {
            let n = crate::math::ops::norm(row);
            if n == 0.0 {
                vec![0.0; row.len()]
            } else {
                row.iter().map(|v| v / n).collect()
            }
        });
        self.push(v, Op::NormalizeRows(x))
    }

    #[doc(hidden)]
    pub fn faulty_identity(&mut self, x: Var, backward_factor: f64) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::Faulty(x, backward_factor))
    }

    /// Accumulates d(loss)/d(param) for every parameter bound on this tape.
    /// The tape can be replayed backward only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(MeltError::TapeConsumed);
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(MeltError::invalid("backward requires a scalar loss"));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut send = |v: Var, d: Matrix| accumulate(&mut grads[v.0], d);
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    out.entry(*id)
                        .and_modify(|acc| acc.add_assign(&g))
                        .or_insert(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let da = g.matmul(&bv.transpose());
                    let db = av.transpose().matmul(&g);
                    send(*a, da);
                    send(*b, db);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let da = g.hadamard(&self.nodes[b.0].value);
                    let db = g.hadamard(&self.nodes[a.0].value);
                    send(*a, da);
                    send(*b, db);
                }
                Op::AddRow(x, row) => {
                    send(*row, g.mean_rows().scale(g.rows() as f64));
                    send(*x, g);
                }
                Op::Scale(x, s) => send(*x, g.scale(*s)),
                Op::ScaleBy(x, s) => {
                    let sv = self.nodes[s.0].value.as_scalar();
                    let ds = g.hadamard(&self.nodes[x.0].value).sum();
                    send(*x, g.scale(sv));
                    send(*s, Matrix::scalar(ds));
                }
                Op::Silu(x) => {
                    let d = self.nodes[x.0].value.zip_map(&g, |z, gz| {
                        let s = sigmoid(z);
                        gz * s * (1.0 + z * (1.0 - s))
                    });
                    send(*x, d);
                }
                Op::Sigmoid(x) => {
                    let d = node.value.zip_map(&g, |y, gy| gy * y * (1.0 - y));
                    send(*x, d);
                }
                Op::Transpose(x) => send(*x, g.transpose()),
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols() {
                            d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    send(*x, d);
                }
                Op::LogSoftmaxRows(x) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for c in 0..y.cols() {
                            d.set(r, c, g.get(r, c) - y.get(r, c).exp() * total);
                        }
                    }
                    send(*x, d);
                }
                Op::MeanRows(x) => {
                    let rows = self.nodes[x.0].value.rows();
                    let d = Matrix::from_fn(rows, g.cols(), |_, c| g.get(0, c) / rows as f64);
                    send(*x, d);
                }
                Op::SumAll(x) => {
                    let (r, c) = self.nodes[x.0].value.shape();
                    send(*x, Matrix::filled(r, c, g.as_scalar()));
                }
                Op::GatherRows(x, idx) => {
                    let (r, c) = self.nodes[x.0].value.shape();
                    let mut d = Matrix::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, v) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    send(*x, d);
                }
                Op::GatherCols(x, idx) => {
                    let (r, c) = self.nodes[x.0].value.shape();
                    let mut d = Matrix::zeros(r, c);
                    for row in 0..r {
                        for (k, &j) in idx.iter().enumerate() {
                            let cur = d.get(row, j);
                            d.set(row, j, cur + g.get(row, k));
                        }
                    }
                    send(*x, d);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = self.nodes[p.0].value.shape();
                        let d = Matrix::new(r, c, g.data()[offset * c..(offset + r) * c].to_vec())
                            .expect("slice matches part");
                        offset += r;
                        send(*p, d);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = self.nodes[p.0].value.shape();
                        let d = Matrix::from_fn(r, c, |i, j| g.get(i, offset + j));
                        offset += c;
                        send(*p, d);
                    }
                }
                Op::NormalizeRows(x) => {
                    let xv = &self.nodes[x.0].value;
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let n = crate::math::ops::norm(xv.row(r));
                        if n == 0.0 {
                            continue;
                        }
                        let proj: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols() {
                            d.set(r, c, (g.get(r, c) - y.get(r, c) * proj) / n);
                        }
                    }
                    send(*x, d);
                }
                Op::Faulty(x, factor) => send(*x, g.scale(*factor)),
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Matrix>, d: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&d),
        None => *slot = Some(d),
    }
}

fn map_rows(m: &Matrix, f: impl Fn(&[f64]) -> Vec<f64>) -> Matrix {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.rows() {
        data.extend(f(m.row(r)));
    }
    Matrix::new(m.rows(), m.cols(), data).expect("row map preserves width")
}
