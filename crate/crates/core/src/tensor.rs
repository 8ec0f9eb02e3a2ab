//! Dense row-major `f64` tensors and a reverse-mode tape.
//!
//! Values are immutable once recorded. A [`Tape`] owns every intermediate of
//! one forward pass; [`Tape::backward`] walks it once in reverse order.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor. Panics on other ranks.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on rank-{} tensor", self.shape.len());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on rank-{} tensor", self.shape.len());
        self.shape[1]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![indices.len(), c],
            data,
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// C = A·B for row-major A (m×k) and B (k×n), optionally with transposed views.
fn gemm(m: usize, k: usize, n: usize, a: (&[f64], isize, isize), b: (&[f64], isize, isize)) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: strides describe in-bounds views of `a`, `b` and the freshly
    // allocated `c`, whose sizes the callers check against the shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    DivByScalar(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var, f64),
    Abs(Var),
    Recip(Var),
    ClampMin(Var, f64),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    Mean(Var),
    MaxAll(Var, usize),
    Diag(Var),
    PairwiseSqDist(Var, Var),
    Huber(Var, f64),
    LogSoftmaxRows(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Derivative guard used by [`Tape::sqrt`] where distances can be exactly zero.
pub const SQRT_EPS: f64 = 1e-12;

/// Records one forward pass. Confined to a single training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kink_margin: f64,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`; zero when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Takes the gradients of `vars` in order.
    pub fn take_all(&mut self, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| self.take(v)).collect()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: t.shape.clone(),
            rhs: vec![],
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest distance, over every recorded non-differentiable op on a
    /// gradient path, between an input and the op's kink.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// Records an input. Rejects non-finite data.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    fn note_kink(&mut self, input: Var, margin: f64) {
        if self.nodes[input.0].requires_grad {
            self.kink_margin = self.kink_margin.min(margin);
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = require_2d("matmul", av)?;
        let (k2, n) = require_2d("matmul", bv)?;
        if k != k2 {
            return Err(shape_err("matmul", av, bv));
        }
        let data = gemm(m, k, n, (&av.data, k as isize, 1), (&bv.data, n as isize, 1));
        self.record("matmul", Tensor::matrix(m, n, data)?, Op::MatMul(a, b), &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(shape_err(op, av, bv));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.record("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.record("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.record("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.record("scale", v, Op::Scale(a, c), &[a])
    }

    pub fn div_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        if c == 0.0 {
            return Err(Error::NonFinite { op: "div_scalar" });
        }
        self.scale(a, 1.0 / c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.record("add_scalar", v, Op::AddScalar(a), &[a])
    }

    /// Divides every entry of `a` by the single-element tensor `s`.
    pub fn div_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(shape_err("div_by", self.value(a), sv));
        }
        let d = sv.data[0];
        let v = self.value(a).map(|x| x / d);
        self.record("div_by", v, Op::DivByScalar(a, s), &[a, s])
    }

    fn check_row(&self, op: &'static str, x: Var, r: Var) -> Result<(usize, usize)> {
        let (xv, rv) = (self.value(x), self.value(r));
        let (n, m) = require_2d(op, xv)?;
        if rv.shape != [1, m] {
            return Err(shape_err(op, xv, rv));
        }
        Ok((n, m))
    }

    fn check_col(&self, op: &'static str, x: Var, c: Var) -> Result<(usize, usize)> {
        let (xv, cv) = (self.value(x), self.value(c));
        let (n, m) = require_2d(op, xv)?;
        if cv.shape != [n, 1] {
            return Err(shape_err(op, xv, cv));
        }
        Ok((n, m))
    }

    /// Adds a 1×m row vector to every row of an n×m matrix.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (n, m) = self.check_row("add_row", x, r)?;
        let (xv, rv) = (self.value(x), self.value(r));
        let mut data = xv.data.clone();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += rv.data[j];
            }
        }
        self.record("add_row", Tensor::matrix(n, m, data)?, Op::AddRow(x, r), &[x, r])
    }

    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (n, m) = self.check_row("mul_row", x, r)?;
        let (xv, rv) = (self.value(x), self.value(r));
        let mut data = xv.data.clone();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] *= rv.data[j];
            }
        }
        self.record("mul_row", Tensor::matrix(n, m, data)?, Op::MulRow(x, r), &[x, r])
    }

    /// Adds an n×1 column vector to every column of an n×m matrix.
    pub fn add_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (n, m) = self.check_col("add_col", x, c)?;
        let (xv, cv) = (self.value(x), self.value(c));
        let mut data = xv.data.clone();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += cv.data[i];
            }
        }
        self.record("add_col", Tensor::matrix(n, m, data)?, Op::AddCol(x, c), &[x, c])
    }

    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (n, m) = self.check_col("mul_col", x, c)?;
        let (xv, cv) = (self.value(x), self.value(c));
        let mut data = xv.data.clone();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] *= cv.data[i];
            }
        }
        self.record("mul_col", Tensor::matrix(n, m, data)?, Op::MulCol(x, c), &[x, c])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let margin = xv.data.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
        let v = xv.map(|a| a.max(0.0));
        self.note_kink(x, margin);
        self.record("relu", v, Op::Relu(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a * a);
        self.record("square", v, Op::Square(x), &[x])
    }

    /// `sqrt(max(x, 0))`; the derivative uses `0.5 / sqrt(x + eps)` so it stays
    /// finite at zero.
    pub fn sqrt(&mut self, x: Var, eps: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(0.0).sqrt());
        self.record("sqrt", v, Op::Sqrt(x, eps), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let margin = xv.data.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
        let v = xv.map(f64::abs);
        self.note_kink(x, margin);
        self.record("abs", v, Op::Abs(x), &[x])
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| 1.0 / a);
        self.record("recip", v, Op::Recip(x), &[x])
    }

    /// Elementwise `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        let xv = self.value(x);
        let margin = xv.data.iter().map(|v| (v - floor).abs()).fold(f64::INFINITY, f64::min);
        let v = xv.map(|a| a.max(floor));
        self.note_kink(x, margin);
        self.record("clamp_min", v, Op::ClampMin(x, floor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.record("sum", v, Op::SumAll(x), &[x])
    }

    /// Sums each row: n×m → n×1.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = require_2d("sum_rows", xv)?;
        let data = (0..n).map(|i| xv.data[i * m..(i + 1) * m].iter().sum()).collect();
        self.record("sum_rows", Tensor::matrix(n, 1, data)?, Op::SumRows(x), &[x])
    }

    /// Sums each column: n×m → 1×m.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = require_2d("sum_cols", xv)?;
        let mut data = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                data[j] += xv.data[i * m + j];
            }
        }
        self.record("sum_cols", Tensor::matrix(1, m, data)?, Op::SumCols(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::arg("mean of an empty tensor"));
        }
        let v = Tensor::scalar(xv.sum() / xv.len() as f64);
        self.record("mean", v, Op::Mean(x), &[x])
    }

    /// Maximum entry. Ties resolve to the first index, which alone receives gradient.
    pub fn max(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::arg("max of an empty tensor"));
        }
        let mut best = 0;
        for (i, &v) in xv.data.iter().enumerate() {
            if v > xv.data[best] {
                best = i;
            }
        }
        let top = xv.data[best];
        // Bit-equal copies of the maximum are the same function of the inputs
        // (e.g. symmetric distance matrices) and do not form a kink.
        let runner_up = xv
            .data
            .iter()
            .filter(|&&v| v != top)
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let margin = top - runner_up;
        self.note_kink(x, margin);
        self.record("max", Tensor::scalar(top), Op::MaxAll(x, best), &[x])
    }

    /// Diagonal of a square matrix as an n×1 column.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = require_2d("diag", xv)?;
        if n != m {
            return Err(shape_err("diag", xv, xv));
        }
        let data = (0..n).map(|i| xv.data[i * n + i]).collect();
        self.record("diag", Tensor::matrix(n, 1, data)?, Op::Diag(x), &[x])
    }

    /// Squared euclidean distances between the rows of `a` (n×d) and `b` (m×d).
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, d) = require_2d("pairwise_sq_dist", av)?;
        let (m, d2) = require_2d("pairwise_sq_dist", bv)?;
        if d != d2 {
            return Err(shape_err("pairwise_sq_dist", av, bv));
        }
        let v = Tensor::matrix(n, m, sq_dist_matrix(&av.data, &bv.data, n, m, d))?;
        self.record("pairwise_sq_dist", v, Op::PairwiseSqDist(a, b), &[a, b])
    }

    /// Elementwise Huber penalty with threshold `delta`.
    pub fn huber(&mut self, x: Var, delta: f64) -> Result<Var> {
        if delta <= 0.0 {
            return Err(Error::arg(format!("huber threshold must be positive, got {delta}")));
        }
        let xv = self.value(x);
        let margin = xv
            .data
            .iter()
            .map(|v| (v.abs() - delta).abs())
            .fold(f64::INFINITY, f64::min);
        let v = xv.map(|r| huber_value(r, delta));
        self.note_kink(x, margin);
        self.record("huber", v, Op::Huber(x, delta), &[x])
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = require_2d("log_softmax_rows", xv)?;
        let mut data = xv.data.clone();
        for i in 0..n {
            let row = &mut data[i * m..(i + 1) * m];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.record("log_softmax_rows", Tensor::matrix(n, m, data)?, Op::LogSoftmaxRows(x), &[x])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(&lv.shape, 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }

        // Only leaves and nodes requiring grad keep their entries meaningful.
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[id] = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.data.iter_mut().zip(&delta.data).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k) = (av.shape[0], av.shape[1]);
                let n = bv.shape[1];
                if self.requires_grad(a) {
                    // dA = G·Bᵀ
                    let d = gemm(m, n, k, (&g.data, n as isize, 1), (&bv.data, 1, n as isize));
                    self.accumulate(grads, a, Tensor { shape: av.shape.clone(), data: d });
                }
                if self.requires_grad(b) {
                    // dB = Aᵀ·G
                    let d = gemm(k, m, n, (&av.data, 1, k as isize), (&g.data, n as isize, 1));
                    self.accumulate(grads, b, Tensor { shape: bv.shape.clone(), data: d });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, a, g.zip_map(val(b), |x, y| x * y));
                self.accumulate(grads, b, g.zip_map(val(a), |x, y| x * y));
            }
            Op::Scale(a, c) => self.accumulate(grads, a, g.map(|x| x * c)),
            Op::AddScalar(a) => self.accumulate(grads, a, g.clone()),
            Op::DivByScalar(a, s) => {
                let sv = val(s).data[0];
                self.accumulate(grads, a, g.map(|x| x / sv));
                let dot: f64 = g.data.iter().zip(&val(a).data).map(|(x, y)| x * y).sum();
                self.accumulate(grads, s, Tensor { shape: val(s).shape.clone(), data: vec![-dot / (sv * sv)] });
            }
            Op::AddRow(x, r) => {
                self.accumulate(grads, x, g.clone());
                self.accumulate(grads, r, col_sums(g));
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (val(x), val(r));
                let m = rv.data.len();
                let dx = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().enumerate().map(|(i, v)| v * rv.data[i % m]).collect(),
                };
                self.accumulate(grads, x, dx);
                self.accumulate(grads, r, col_sums(&g.zip_map(xv, |a, b| a * b)));
            }
            Op::AddCol(x, c) => {
                self.accumulate(grads, x, g.clone());
                self.accumulate(grads, c, row_sums(g));
            }
            Op::MulCol(x, c) => {
                let (xv, cv) = (val(x), val(c));
                let m = g.shape[1];
                let dx = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().enumerate().map(|(i, v)| v * cv.data[i / m]).collect(),
                };
                self.accumulate(grads, x, dx);
                self.accumulate(grads, c, row_sums(&g.zip_map(xv, |a, b| a * b)));
            }
            Op::Relu(x) => {
                self.accumulate(grads, x, g.zip_map(val(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }))
            }
            Op::Square(x) => self.accumulate(grads, x, g.zip_map(val(x), |gv, xv| 2.0 * xv * gv)),
            Op::Sqrt(x, eps) => self.accumulate(
                grads,
                x,
                g.zip_map(val(x), |gv, xv| gv * 0.5 / (xv.max(0.0) + eps).sqrt()),
            ),
            Op::Abs(x) => self.accumulate(grads, x, g.zip_map(val(x), |gv, xv| gv * sign(xv))),
            Op::Recip(x) => self.accumulate(grads, x, g.zip_map(val(x), |gv, xv| -gv / (xv * xv))),
            Op::ClampMin(x, floor) => {
                self.accumulate(grads, x, g.zip_map(val(x), |gv, xv| if xv > floor { gv } else { 0.0 }))
            }
            Op::SumAll(x) => self.accumulate(grads, x, Tensor::full(&val(x).shape, g.data[0])),
            Op::Mean(x) => {
                let n = val(x).len() as f64;
                self.accumulate(grads, x, Tensor::full(&val(x).shape, g.data[0] / n))
            }
            Op::SumRows(x) => {
                let m = val(x).shape[1];
                let data = (0..val(x).len()).map(|i| g.data[i / m]).collect();
                self.accumulate(grads, x, Tensor { shape: val(x).shape.clone(), data });
            }
            Op::SumCols(x) => {
                let m = val(x).shape[1];
                let data = (0..val(x).len()).map(|i| g.data[i % m]).collect();
                self.accumulate(grads, x, Tensor { shape: val(x).shape.clone(), data });
            }
            Op::MaxAll(x, idx) => {
                let mut d = Tensor::zeros(&val(x).shape);
                d.data[idx] = g.data[0];
                self.accumulate(grads, x, d);
            }
            Op::Diag(x) => {
                let n = val(x).shape[0];
                let mut d = Tensor::zeros(&val(x).shape);
                for i in 0..n {
                    d.data[i * n + i] = g.data[i];
                }
                self.accumulate(grads, x, d);
            }
            Op::PairwiseSqDist(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (n, d) = (av.shape[0], av.shape[1]);
                let m = bv.shape[0];
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; m * d];
                for i in 0..n {
                    let ai = &av.data[i * d..(i + 1) * d];
                    for j in 0..m {
                        let gij = 2.0 * g.data[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let bj = &bv.data[j * d..(j + 1) * d];
                        for k in 0..d {
                            let diff = gij * (ai[k] - bj[k]);
                            da[i * d + k] += diff;
                            db[j * d + k] -= diff;
                        }
                    }
                }
                self.accumulate(grads, a, Tensor { shape: av.shape.clone(), data: da });
                self.accumulate(grads, b, Tensor { shape: bv.shape.clone(), data: db });
            }
            Op::Huber(x, delta) => self.accumulate(
                grads,
                x,
                g.zip_map(val(x), |gv, r| gv * if r.abs() <= delta { r } else { delta * sign(r) }),
            ),
            Op::LogSoftmaxRows(x) => {
                let m = out.shape[1];
                let n = out.shape[0];
                let mut d = vec![0.0; n * m];
                for i in 0..n {
                    let gs: f64 = g.data[i * m..(i + 1) * m].iter().sum();
                    for j in 0..m {
                        let p = out.data[i * m + j].exp();
                        d[i * m + j] = g.data[i * m + j] - p * gs;
                    }
                }
                self.accumulate(grads, x, Tensor { shape: out.shape.clone(), data: d });
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let (n, m) = (g.shape[0], g.shape[1]);
    let mut data = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            data[j] += g.data[i * m + j];
        }
    }
    Tensor { shape: vec![1, m], data }
}

fn row_sums(g: &Tensor) -> Tensor {
    let (n, m) = (g.shape[0], g.shape[1]);
    let data = (0..n).map(|i| g.data[i * m..(i + 1) * m].iter().sum()).collect();
    Tensor { shape: vec![n, 1], data }
}

pub(crate) fn sq_dist_matrix(a: &[f64], b: &[f64], n: usize, m: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..m {
            let bj = &b[j * d..(j + 1) * d];
            out.push(sq_dist(ai, bj));
        }
    }
    out
}

/// Squared euclidean distance accumulated left to right.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

pub(crate) fn huber_value(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}
