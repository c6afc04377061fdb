//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse and returns the gradient of a `1 x 1` output with
//! respect to every recorded node. Model parameters are pushed as leaves first
//! (see [`crate::params::ParamSet::bind`]) so a parameter's `Var` index equals
//! its [`crate::params::ParamId`].

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Probability floor used by [`Tape::ln_clamped`].
pub const LN_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    /// `x * w^T`
    Linear(Var, Var),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Adds a `1 x c` row to every row.
    AddRow(Var, Var),
    /// `alpha * x + beta`
    Affine(Var, T),
    MulConst(Var, Matrix<T>),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    HCat(Vec<Var>),
    VCat(Vec<Var>),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    MeanRows(Var),
    Sum(Var),
    LnClamped(Var),
    Pick(Var, Vec<(usize, usize)>),
    /// Value of the first operand, gradient as if multiplied by the `1 x 1`
    /// second operand evaluated at one.
    StraightThrough(Var, Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`]. Only leaves keep theirs.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.get(0, 0)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf (parameter or constant input).
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.leaf(Matrix::zeros(rows, cols))
    }

    fn check(&self, op: &'static str, ok: bool, a: Var, b: Var) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ))
        }
    }

    /// `x * w^T` with `w` stored `out x in`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.check("linear", self.shape(x).1 == self.shape(w).1, x, w)?;
        let v = self.value(x).matmul_t(self.value(w));
        Ok(self.push(v, Op::Linear(x, w)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("matmul", self.shape(a).1 == self.shape(b).0, a, b)?;
        let v = self.value(a).matmul(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("add", self.shape(a) == self.shape(b), a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("sub", self.shape(a) == self.shape(b), a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("mul", self.shape(a) == self.shape(b), a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        self.check("add_row", self.shape(row) == (1, ac), a, row)?;
        let r = self.value(row).as_slice().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..ar {
            for (x, &y) in v.row_mut(i).iter_mut().zip(&r) {
                *x = *x + y;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    /// `alpha * a + beta`, elementwise.
    pub fn affine(&mut self, a: Var, alpha: T, beta: T) -> Var {
        let v = self.value(a).map(|x| alpha * x + beta);
        self.push(v, Op::Affine(a, alpha))
    }

    pub fn scale(&mut self, a: Var, alpha: T) -> Var {
        self.affine(a, alpha, T::zero())
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -T::one(), T::one())
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Matrix<T>) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::shape(
                "mul_const",
                format!("{:?} vs {:?}", self.shape(a), c.shape()),
            ));
        }
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        Ok(self.push(v, Op::MulConst(a, c)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Concatenates along columns.
    pub fn hcat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::shape("hcat", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                v.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(v, Op::HCat(parts.to_vec())))
    }

    /// Concatenates along rows.
    pub fn vcat(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::vstack(&mats)?;
        Ok(self.push(v, Op::VCat(parts.to_vec())))
    }

    /// Selects rows (embedding lookup).
    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let n = self.shape(a).0;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::IdOutOfRange { id: bad, size: n });
        }
        let v = self.value(a).select_rows(rows);
        Ok(self.push(v, Op::Gather(a, rows.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(a).clone().reshaped(rows, cols)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// `ln(max(a, 1e-12))`, elementwise.
    pub fn ln_clamped(&mut self, a: Var) -> Var {
        let floor = T::of(LN_CLAMP);
        let v = self.value(a).map(|x| x.max(floor).ln());
        self.push(v, Op::LnClamped(a))
    }

    /// Gathers single entries into a `1 x k` row.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if at.iter().any(|&(i, j)| i >= r || j >= c) {
            return Err(Error::shape("pick", "index outside matrix"));
        }
        let vals = at.iter().map(|&(i, j)| self.value(a).get(i, j)).collect();
        Ok(self.push(Matrix::row_vector(vals), Op::Pick(a, at.to_vec())))
    }

    /// Passes `a` through unchanged while routing `sum(g * a)` to the `1 x 1`
    /// gate `s`, so a hard selection can still train the scorer behind it.
    pub fn straight_through(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check("straight_through", self.shape(s) == (1, 1), a, s)?;
        let v = self.value(a).clone();
        Ok(self.push(v, Op::StraightThrough(a, s)))
    }

    /// Gradients of the `1 x 1` node `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Linear(x, w) => {
                    let dx = g.matmul(self.value(*w));
                    let dw = g.t_matmul(self.value(*x));
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y);
                    let db = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, column_sums(&g));
                    accumulate(&mut grads, *a, g);
                }
                Op::Affine(a, alpha) => {
                    let alpha = *alpha;
                    accumulate(&mut grads, *a, g.map(|x| x * alpha));
                }
                Op::MulConst(a, c) => {
                    accumulate(&mut grads, *a, g.zip_map(c, |x, y| x * y));
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |x, y| x * (T::one() - y * y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |x, y| x * y * (T::one() - y));
                    accumulate(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: T = y.row(r).iter().zip(g.row(r)).map(|(&p, &q)| p * q).sum();
                        for (c, out) in d.row_mut(r).iter_mut().enumerate() {
                            *out = y.get(r, c) * (g.get(r, c) - dot);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::HCat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let d = Matrix::from_fn(rows, cols, |r, c| g.get(r, off + c));
                        off += cols;
                        accumulate(&mut grads, p, d);
                    }
                }
                Op::VCat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let d = Matrix::from_fn(rows, cols, |r, c| g.get(off + r, c));
                        off += rows;
                        accumulate(&mut grads, p, d);
                    }
                }
                Op::Gather(a, rows) => {
                    let (n, cols) = self.shape(*a);
                    let mut d = Matrix::zeros(n, cols);
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &x) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o = *o + x;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Reshape(a) => {
                    let (rows, cols) = self.shape(*a);
                    let d = g.reshaped(rows, cols).expect("reshape gradient");
                    accumulate(&mut grads, *a, d);
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let n = T::of(rows as f64);
                    let d = Matrix::from_fn(rows, cols, |_, c| g.get(0, c) / n);
                    accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(*a);
                    accumulate(&mut grads, *a, Matrix::filled(rows, cols, g.get(0, 0)));
                }
                Op::LnClamped(a) => {
                    let floor = T::of(LN_CLAMP);
                    let d = g.zip_map(self.value(*a), |x, p| {
                        if p > floor {
                            x / p
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::Pick(a, at) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Matrix::zeros(rows, cols);
                    for (k, &(i, j)) in at.iter().enumerate() {
                        d.set(i, j, d.get(i, j) + g.get(0, k));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::StraightThrough(a, s) => {
                    let ds: T = g
                        .as_slice()
                        .iter()
                        .zip(self.value(*a).as_slice())
                        .map(|(&x, &y)| x * y)
                        .sum();
                    accumulate(&mut grads, *s, Matrix::filled(1, 1, ds));
                    accumulate(&mut grads, *a, g);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, d: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn column_sums<T: Scalar>(g: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &x) in out.as_mut_slice().iter_mut().zip(g.row(r)) {
            *o = *o + x;
        }
    }
    out
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total = total + *x;
        }
        for x in row.iter_mut() {
            *x = *x / total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_scalar_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Matrix::filled(1, 1, 3.0));
        let x = tape.leaf(Matrix::filled(1, 1, 2.0));
        let y = tape.linear(x, w).unwrap();
        let grads = tape.backward(y);
        assert_eq!(grads.get(w).unwrap().get(0, 0), 2.0);
        assert_eq!(grads.get(x).unwrap().get(0, 0), 3.0);
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Matrix::filled(1, 1, 1.0));
        let b = tape.leaf(Matrix::filled(1, 1, 1.0));
        let s = tape.sum(a);
        let grads = tape.backward(s);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1000.0]).unwrap();
        let s = softmax_rows(&m);
        for r in 0..2 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn straight_through_keeps_value() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Matrix::row_vector(vec![2.0, -1.0]));
        let s = tape.leaf(Matrix::filled(1, 1, 0.3));
        let out = tape.straight_through(a, s).unwrap();
        assert_eq!(tape.value(out), tape.value(a));
        let total = tape.sum(out);
        let grads = tape.backward(total);
        assert_eq!(grads.get(s).unwrap().get(0, 0), 1.0);
    }
}
