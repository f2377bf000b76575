//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are recorded on a [`Tape`] in evaluation order, so the node
//! list is already topologically sorted and [`Tape::backward`] walks it once
//! in reverse. Every op checks its result for NaN/Inf and reports the
//! offending op instead of propagating the value.
//!
//! ```
//! use g3d_core::{autodiff::Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).item().unwrap(), 6.0);
//! ```

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary<T> {
    Neg,
    Relu,
    Exp,
    Ln,
    Abs,
    Sqrt,
    Recip,
    Powf(T),
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf { trainable: bool },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Max(Var, Var),
    Min(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary<T>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    RowSums(Var),
    MeanRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records a computation graph for one forward pass.
///
/// A tape is single-threaded; build one per graph and drop it after
/// [`Tape::backward`].
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Ok(Var(nodes.len() - 1))
    }

    /// Trainable leaf; its gradient is reported by [`Gradients::leaves`].
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient entry in [`Gradients::leaves`].
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor<T>, trainable: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf { trainable },
        });
        Var(nodes.len() - 1)
    }

    /// Copy of the value held by `v`.
    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    fn with_values<R>(&self, vars: &[Var], f: impl FnOnce(&[&Tensor<T>]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let vals: Vec<&Tensor<T>> = vars.iter().map(|v| &nodes[v.0].value).collect();
        f(&vals)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_values(&[a, b], |x| x[0].matmul(x[1]))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let v = self.with_values(&[a], |x| x[0].transpose())?;
        self.push(v, Op::Transpose(a), "transpose")
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_values(&[a, b], |x| x[0].zip_with(x[1], "add", |p, q| p + q))?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_values(&[a, b], |x| x[0].zip_with(x[1], "sub", |p, q| p - q))?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_values(&[a, b], |x| x[0].zip_with(x[1], "mul", |p, q| p * q))?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_values(&[a, b], |x| x[0].zip_with(x[1], "div", |p, q| p / q))?;
        self.push(v, Op::Div(a, b), "div")
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_values(&[a, b], |x| x[0].zip_with(x[1], "maximum", T::max))?;
        self.push(v, Op::Max(a, b), "maximum")
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_values(&[a, b], |x| x[0].zip_with(x[1], "minimum", T::min))?;
        self.push(v, Op::Min(a, b), "minimum")
    }

    /// `a[m×n] + b[n]` with `b` broadcast over rows.
    pub fn add_row(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with_values(&[a, b], |x| {
            let (a, b) = (x[0], x[1]);
            let n = a.cols();
            if b.len() != n || a.rank() != 2 {
                return Err(Error::shape("add_row", a.shape(), b.shape()));
            }
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(n) {
                for (r, &bb) in row.iter_mut().zip(b.data()) {
                    *r = *r + bb;
                }
            }
            Tensor::new(a.shape().to_vec(), data)
        })?;
        self.push(v, Op::AddRow(a, b), "add_row")
    }

    /// `a[m×n] * c[m]` with `c` broadcast over columns.
    pub fn mul_col(&self, a: Var, c: Var) -> Result<Var> {
        let v = self.with_values(&[a, c], |x| {
            let (a, c) = (x[0], x[1]);
            let m = a.rows();
            if c.len() != m || a.rank() != 2 {
                return Err(Error::shape("mul_col", a.shape(), c.shape()));
            }
            let n = a.cols();
            let mut data = a.data().to_vec();
            for (row, &cc) in data.chunks_mut(n).zip(c.data()) {
                for r in row.iter_mut() {
                    *r = *r * cc;
                }
            }
            Tensor::new(a.shape().to_vec(), data)
        })?;
        self.push(v, Op::MulCol(a, c), "mul_col")
    }

    pub fn scale(&self, a: Var, c: T) -> Result<Var> {
        let v = self.with_values(&[a], |x| x[0].scale(c));
        self.push(v, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Result<Var> {
        let v = self.with_values(&[a], |x| x[0].map(|p| p + c));
        self.push(v, Op::AddScalar(a), "add_scalar")
    }

    /// `c - a`, used by the inverted attention map.
    pub fn rsub_scalar(&self, c: T, a: Var) -> Result<Var> {
        let neg = self.neg(a)?;
        self.add_scalar(neg, c)
    }

    fn unary(&self, a: Var, u: Unary<T>, name: &'static str) -> Result<Var> {
        let v = self.with_values(&[a], |x| {
            x[0].map(|p| match u {
                Unary::Neg => -p,
                Unary::Relu => p.max(T::zero()),
                Unary::Exp => p.exp(),
                Unary::Ln => p.ln(),
                Unary::Abs => p.abs(),
                Unary::Sqrt => p.sqrt(),
                Unary::Recip => p.recip(),
                Unary::Powf(e) => p.powf(e),
            })
        });
        self.push(v, Op::Unary(a, u), name)
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Neg, "neg")
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu, "relu")
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp, "exp")
    }

    pub fn ln(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Ln, "ln")
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Abs, "abs")
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt, "sqrt")
    }

    pub fn recip(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Recip, "recip")
    }

    pub fn powf(&self, a: Var, e: T) -> Result<Var> {
        self.unary(a, Unary::Powf(e), "powf")
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let v = self.with_values(&[a], |x| x[0].softmax_rows())?;
        self.push(v, Op::SoftmaxRows(a), "softmax_rows")
    }

    pub fn log_softmax_rows(&self, a: Var) -> Result<Var> {
        let v = self.with_values(&[a], |x| {
            let t = x[0];
            let n = t.cols();
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(n) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + row.iter().map(|&r| (r - max).exp()).sum::<T>().ln();
                for r in row.iter_mut() {
                    *r = *r - lse;
                }
            }
            Tensor::new(t.shape().to_vec(), data)
        })?;
        self.push(v, Op::LogSoftmaxRows(a), "log_softmax_rows")
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let v = self.with_values(&[a], |x| Tensor::scalar(x[0].sum()));
        self.push(v, Op::Sum(a), "sum")
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.with_values(&[a], |x| x[0].len());
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Per-row sums `[m×n] → [m×1]`.
    pub fn row_sums(&self, a: Var) -> Result<Var> {
        let v = self.with_values(&[a], |x| {
            let t = x[0];
            let n = t.cols();
            let data: Vec<T> = t
                .data()
                .chunks(n)
                .map(|r| r.iter().copied().sum())
                .collect();
            Tensor::matrix(t.rows(), 1, data)
        })?;
        self.push(v, Op::RowSums(a), "row_sums")
    }

    /// Column-wise mean `[m×n] → [1×n]` (mean pooling over rows).
    pub fn mean_rows(&self, a: Var) -> Result<Var> {
        let v = self.with_values(&[a], |x| {
            let t = x[0];
            let (m, n) = (t.rows(), t.cols());
            let mut data = vec![T::zero(); n];
            for row in t.data().chunks(n) {
                for (d, &r) in data.iter_mut().zip(row) {
                    *d = *d + r;
                }
            }
            let inv = T::one() / T::lit(m as f64);
            Tensor::matrix(1, n, data.into_iter().map(|d| d * inv).collect())
        })?;
        self.push(v, Op::MeanRows(a), "mean_rows")
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.with_values(&[a], |x| {
            let t = x[0];
            let n = t.cols();
            if t.rank() != 2 || len == 0 || start + len > n {
                return Err(Error::Precondition(format!(
                    "slice_cols {start}..{} out of range for {:?}",
                    start + len,
                    t.shape()
                )));
            }
            let data: Vec<T> = t
                .data()
                .chunks(n)
                .flat_map(|r| r[start..start + len].iter().copied())
                .collect();
            Tensor::matrix(t.rows(), len, data)
        })?;
        self.push(v, Op::SliceCols(a, start), "slice_cols")
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let v = self.with_values(parts, |xs| {
            let m = xs.first().map(|t| t.rows()).unwrap_or(0);
            for t in xs {
                if t.rank() != 2 || t.rows() != m {
                    return Err(Error::shape("concat_cols", xs[0].shape(), t.shape()));
                }
            }
            let n: usize = xs.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(m * n);
            for r in 0..m {
                for t in xs {
                    data.extend_from_slice(t.row(r));
                }
            }
            Tensor::matrix(m, n, data)
        })?;
        self.push(v, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.with_values(&[a], |x| {
            let t = x[0];
            let (m, n) = (t.rows(), t.cols());
            if t.rank() != 2 || len == 0 || start + len > m {
                return Err(Error::Precondition(format!(
                    "slice_rows {start}..{} out of range for {:?}",
                    start + len,
                    t.shape()
                )));
            }
            Tensor::matrix(len, n, t.data()[start * n..(start + len) * n].to_vec())
        })?;
        self.push(v, Op::SliceRows(a, start), "slice_rows")
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let v = self.with_values(parts, |xs| {
            let n = xs.first().map(|t| t.cols()).unwrap_or(0);
            for t in xs {
                if t.rank() != 2 || t.cols() != n {
                    return Err(Error::shape("concat_rows", xs[0].shape(), t.shape()));
                }
            }
            let m: usize = xs.iter().map(|t| t.rows()).sum();
            let data: Vec<T> = xs.iter().flat_map(|t| t.data().iter().copied()).collect();
            Tensor::matrix(m, n, data)
        })?;
        self.push(v, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.with_values(&[a], |x| x[0].reshape(shape))?;
        self.push(v, Op::Reshape(a), "reshape")
    }

    /// Reverse pass from a single-element output.
    ///
    /// Nodes are visited once each, from `output` back to the first node;
    /// nodes that do not influence `output` keep a zero gradient.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let out_val = &nodes[output.0].value;
        if out_val.len() != 1 {
            return Err(Error::Precondition(format!(
                "backward needs a scalar output, got shape {:?}",
                out_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[output.0] = Some(Tensor::filled(out_val.shape().to_vec(), T::one()));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            if let Op::Leaf { .. } = node.op {
                grads[idx] = Some(g);
                continue;
            }
            let val = |v: Var| &nodes[v.0].value;
            let mut contribute = |v: Var, delta: Tensor<T>| match &mut grads[v.0] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a = *a + *d;
                    }
                }
                slot @ None => *slot = Some(delta),
            };
            match &node.op {
                Op::Leaf { .. } => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&val(*b).transpose()?)?;
                    let gb = val(*a).transpose()?.matmul(&g)?;
                    contribute(*a, ga);
                    contribute(*b, gb);
                }
                Op::Transpose(a) => contribute(*a, g.transpose()?),
                Op::Add(a, b) => {
                    contribute(*a, g.clone());
                    contribute(*b, g);
                }
                Op::Sub(a, b) => {
                    contribute(*a, g.clone());
                    contribute(*b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_with(val(*b), "mul", |x, y| x * y)?;
                    let gb = g.zip_with(val(*a), "mul", |x, y| x * y)?;
                    contribute(*a, ga);
                    contribute(*b, gb);
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    let ga = g.zip_with(bv, "div", |x, y| x / y)?;
                    let gb = g.zip_with(&node.value, "div", |x, q| x * q)?.zip_with(
                        bv,
                        "div",
                        |x, y| -x / y,
                    )?;
                    contribute(*a, ga);
                    contribute(*b, gb);
                }
                Op::Max(a, b) | Op::Min(a, b) => {
                    let is_max = matches!(node.op, Op::Max(..));
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    let mut ga = Tensor::zeros_like(&g);
                    let mut gb = Tensor::zeros_like(&g);
                    for i in 0..g.len() {
                        let pick_a = if is_max {
                            av[i] >= bv[i]
                        } else {
                            av[i] <= bv[i]
                        };
                        if pick_a {
                            ga.data_mut()[i] = g.data()[i];
                        } else {
                            gb.data_mut()[i] = g.data()[i];
                        }
                    }
                    contribute(*a, ga);
                    contribute(*b, gb);
                }
                Op::AddRow(a, b) => {
                    let bshape = val(*b).shape().to_vec();
                    let n = g.cols();
                    let mut gb = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (acc, &x) in gb.iter_mut().zip(row) {
                            *acc = *acc + x;
                        }
                    }
                    contribute(*b, Tensor::new(bshape, gb)?);
                    contribute(*a, g);
                }
                Op::MulCol(a, c) => {
                    let (av, cv) = (val(*a), val(*c));
                    let n = g.cols();
                    let mut ga = g.data().to_vec();
                    let mut gc = vec![T::zero(); cv.len()];
                    for (r, (grow, arow)) in ga.chunks_mut(n).zip(av.data().chunks(n)).enumerate() {
                        let cc = cv.data()[r];
                        let mut acc = T::zero();
                        for (gg, &aa) in grow.iter_mut().zip(arow) {
                            acc = acc + *gg * aa;
                            *gg = *gg * cc;
                        }
                        gc[r] = acc;
                    }
                    contribute(*a, Tensor::new(g.shape().to_vec(), ga)?);
                    contribute(*c, Tensor::new(cv.shape().to_vec(), gc)?);
                }
                Op::Scale(a, c) => contribute(*a, g.scale(*c)),
                Op::AddScalar(a) => contribute(*a, g),
                Op::Unary(a, u) => {
                    let x = val(*a);
                    let y = &node.value;
                    let mut ga = g.clone();
                    for ((gg, &xx), &yy) in ga.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                        let d = match *u {
                            Unary::Neg => -T::one(),
                            Unary::Relu => {
                                if xx > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Exp => yy,
                            Unary::Ln => xx.recip(),
                            Unary::Abs => {
                                if xx > T::zero() {
                                    T::one()
                                } else if xx < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Sqrt => T::lit(0.5) / yy,
                            Unary::Recip => -(yy * yy),
                            Unary::Powf(e) => {
                                if e == T::zero() {
                                    T::zero()
                                } else {
                                    e * xx.powf(e - T::one())
                                }
                            }
                        };
                        *gg = *gg * d;
                    }
                    contribute(*a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    let mut ga = g.data().to_vec();
                    for (grow, yrow) in ga.chunks_mut(n).zip(y.data().chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&p, &q)| p * q).sum();
                        for (gg, &yy) in grow.iter_mut().zip(yrow) {
                            *gg = yy * (*gg - dot);
                        }
                    }
                    contribute(*a, Tensor::new(y.shape().to_vec(), ga)?);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    let mut ga = g.data().to_vec();
                    for (grow, yrow) in ga.chunks_mut(n).zip(y.data().chunks(n)) {
                        let total: T = grow.iter().copied().sum();
                        for (gg, &yy) in grow.iter_mut().zip(yrow) {
                            *gg = *gg - yy.exp() * total;
                        }
                    }
                    contribute(*a, Tensor::new(y.shape().to_vec(), ga)?);
                }
                Op::Sum(a) => {
                    let shape = val(*a).shape().to_vec();
                    contribute(*a, Tensor::filled(shape, g.data()[0]));
                }
                Op::RowSums(a) => {
                    let x = val(*a);
                    let n = x.cols();
                    let data: Vec<T> = g
                        .data()
                        .iter()
                        .flat_map(|&gg| std::iter::repeat_n(gg, n))
                        .collect();
                    contribute(*a, Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::MeanRows(a) => {
                    let x = val(*a);
                    let inv = T::one() / T::lit(x.rows() as f64);
                    let row: Vec<T> = g.data().iter().map(|&gg| gg * inv).collect();
                    let data: Vec<T> = (0..x.rows()).flat_map(|_| row.iter().copied()).collect();
                    contribute(*a, Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::SliceCols(a, start) => {
                    let x = val(*a);
                    let (n, len) = (x.cols(), g.cols());
                    let mut data = vec![T::zero(); x.len()];
                    for (drow, grow) in data.chunks_mut(n).zip(g.data().chunks(len)) {
                        drow[*start..start + len].copy_from_slice(grow);
                    }
                    contribute(*a, Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::ConcatCols(parts) => {
                    let n = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let pv = val(*p);
                        let len = pv.cols();
                        let data: Vec<T> = g
                            .data()
                            .chunks(n)
                            .flat_map(|r| r[offset..offset + len].iter().copied())
                            .collect();
                        contribute(*p, Tensor::new(pv.shape().to_vec(), data)?);
                        offset += len;
                    }
                }
                Op::SliceRows(a, start) => {
                    let x = val(*a);
                    let n = x.cols();
                    let mut data = vec![T::zero(); x.len()];
                    data[start * n..start * n + g.len()].copy_from_slice(g.data());
                    contribute(*a, Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = val(*p);
                        let len = pv.len();
                        let data = g.data()[offset..offset + len].to_vec();
                        contribute(*p, Tensor::new(pv.shape().to_vec(), data)?);
                        offset += len;
                    }
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    contribute(*a, g.reshape(shape)?);
                }
            }
        }

        let mut out = Vec::with_capacity(nodes.len());
        let mut trainable = Vec::new();
        for (i, (node, g)) in nodes.iter().zip(grads).enumerate() {
            if let Op::Leaf { trainable: true } = node.op {
                trainable.push(Var(i));
            }
            out.push(g.filter(|_| matches!(node.op, Op::Leaf { .. })));
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads: out,
            shapes,
            trainable,
        })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    trainable: Vec<Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf; all zeros if the leaf did not reach the output.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// Every trainable leaf paired with its gradient, in creation order.
    pub fn leaves(&self) -> impl Iterator<Item = (Var, Tensor<T>)> + '_ {
        self.trainable.iter().map(|&v| (v, self.get(v)))
    }
}
