//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to tracked values during a
//! forward pass. [`Tape::backward`] walks the record in reverse, visiting each
//! node once, and returns the gradient of a scalar node with respect to every
//! parameter registered with [`Tape::param`].
//!
//! ```
//! use fairexit::numkit::{Matrix, ParamId, Tape};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(ParamId(0), Matrix::row_vector(&[1.0, 2.0]));
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::matrix::{check_labels, neg_log_softmax, Matrix};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifier of a trainable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    Reverse { input: Var, strength: f64 },
    SqDists(Var),
    SqDistsCross(Var, Var),
    Exp(Var),
    Scale(Var, f64),
    Mul(Var, Var),
    MulConst(Var, Matrix),
    Sum(Var),
    Mean(Var),
    SelectRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

/// Ordered record of matrix operations plus a parameter registry.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    relu_margin: f64,
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            relu_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Smallest |input| seen by any relu on this tape; infinity if none.
    pub fn min_relu_margin(&self) -> f64 {
        self.relu_margin
    }

    /// Untracked input value.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a trainable value. Registering the same id twice returns the
    /// original handle.
    pub fn param(&mut self, id: ParamId, value: Matrix) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul(a, b), t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Sub(a, b), t))
    }

    /// `x + 1·bias` with `bias` a single row broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(bias))?;
        let t = self.tracked(x) || self.tracked(bias);
        Ok(self.push(value, Op::AddRow(x, bias), t))
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let margin = input
            .data()
            .iter()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let value = input.relu();
        self.relu_margin = self.relu_margin.min(margin);
        let t = self.tracked(x);
        self.push(value, Op::Relu(x), t)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).softmax_rows();
        let t = self.tracked(x);
        self.push(value, Op::SoftmaxRows(x), t)
    }

    /// Mean cross-entropy of `logits` against class indices, as a 1x1 node.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        check_labels(l, labels)?;
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| neg_log_softmax(l.row(r), y))
            .sum();
        let value = Matrix::scalar(total / labels.len().max(1) as f64);
        let t = self.tracked(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            t,
        ))
    }

    /// Identity on the forward pass; scales the upstream gradient by
    /// `-strength` on the way back.
    pub fn gradient_reversal(&mut self, x: Var, strength: f64) -> Result<Var> {
        if !(strength >= 0.0 && strength.is_finite()) {
            return Err(Error::Parameter(format!(
                "reversal strength must be finite and nonnegative, got {strength}"
            )));
        }
        let value = self.value(x).clone();
        let t = self.tracked(x);
        Ok(self.push(value, Op::Reverse { input: x, strength }, t))
    }

    /// Pairwise squared Euclidean distances between the rows of `x`.
    pub fn sq_dists(&mut self, x: Var) -> Var {
        let value = super::kernel::sq_dists(self.value(x));
        let t = self.tracked(x);
        self.push(value, Op::SqDists(x), t)
    }

    /// Squared Euclidean distances between rows of `x` and rows of `y`.
    pub fn sq_dists_cross(&mut self, x: Var, y: Var) -> Result<Var> {
        let value = super::kernel::sq_dists_cross(self.value(x), self.value(y))?;
        let t = self.tracked(x) || self.tracked(y);
        Ok(self.push(value, Op::SqDistsCross(x, y), t))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let t = self.tracked(x);
        self.push(value, Op::Exp(x), t)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        let t = self.tracked(x);
        self.push(value, Op::Scale(x, c), t)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Mul(a, b), t))
    }

    /// Elementwise product with an untracked matrix.
    pub fn mul_const(&mut self, x: Var, c: Matrix) -> Result<Var> {
        let value = self.value(x).hadamard(&c)?;
        let t = self.tracked(x);
        Ok(self.push(value, Op::MulConst(x, c), t))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum());
        let t = self.tracked(x);
        self.push(value, Op::Sum(x), t)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let n = (m.rows() * m.cols()).max(1) as f64;
        let value = Matrix::scalar(m.sum() / n);
        let t = self.tracked(x);
        self.push(value, Op::Mean(x), t)
    }

    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(x).select_rows(indices)?;
        let t = self.tracked(x);
        Ok(self.push(value, Op::SelectRows(x, indices.to_vec()), t))
    }

    /// Gaussian kernel matrix `exp(-d² / (2 bandwidth²))` built from tracked
    /// primitives.
    pub fn gaussian_kernel(&mut self, x: Var, bandwidth: f64) -> Result<Var> {
        super::kernel::check_bandwidth(bandwidth)?;
        let d = self.sq_dists(x);
        let s = self.scale(d, -1.0 / (2.0 * bandwidth * bandwidth));
        Ok(self.exp(s))
    }

    pub fn gaussian_cross_kernel(&mut self, x: Var, y: Var, bandwidth: f64) -> Result<Var> {
        super::kernel::check_bandwidth(bandwidth)?;
        let d = self.sq_dists_cross(x, y)?;
        let s = self.scale(d, -1.0 / (2.0 * bandwidth * bandwidth));
        Ok(self.exp(s))
    }

    /// Sum of 1x1 nodes; `None` for an empty slice.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Option<Var>> {
        let mut iter = terms.iter();
        let Some(&first) = iter.next() else {
            return Ok(None);
        };
        let mut acc = first;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(Some(acc))
    }

    /// Gradients of a 1x1 node with respect to every registered parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got a {r}x{c} node"
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            // Leaves keep their gradient for collection below.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let mut out = BTreeMap::new();
        for (&id, &v) in &self.params {
            let g = match grads.get(v.0).and_then(|g| g.clone()) {
                Some(g) => g,
                None => {
                    let (r, c) = self.value(v).shape();
                    Matrix::zeros(r, c)
                }
            };
            out.insert(id, g);
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let acc = |v: Var, delta: Matrix, grads: &mut [Option<Matrix>]| -> Result<()> {
            if !self.tracked(v) {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &delta)?,
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    acc(*a, g.matmul_t(self.value(*b))?, grads)?;
                }
                if self.tracked(*b) {
                    acc(*b, self.value(*a).t_matmul(g)?, grads)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads)?;
                acc(*b, g.clone(), grads)?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads)?;
                acc(*b, g.scale(-1.0), grads)?;
            }
            Op::AddRow(x, bias) => {
                acc(*x, g.clone(), grads)?;
                if self.tracked(*bias) {
                    acc(*bias, g.col_sums(), grads)?;
                }
            }
            Op::Relu(x) => {
                let mask = self.value(*x);
                acc(*x, g.zip_map(mask, |gv, xv| if xv > 0.0 { gv } else { 0.0 })?, grads)?;
            }
            Op::SoftmaxRows(x) => {
                let s = &node.value;
                let mut out = Matrix::zeros(s.rows(), s.cols());
                for r in 0..s.rows() {
                    let (sr, gr) = (s.row(r), g.row(r));
                    let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &sv), &gv) in out.row_mut(r).iter_mut().zip(sr).zip(gr) {
                        *o = sv * (gv - dot);
                    }
                }
                acc(*x, out, grads)?;
            }
            Op::CrossEntropy { logits, labels } => {
                let upstream = g.item()?;
                let n = labels.len().max(1) as f64;
                let mut d = self.value(*logits).softmax_rows();
                for (r, &y) in labels.iter().enumerate() {
                    let v = d.get(r, y);
                    d.set(r, y, v - 1.0);
                }
                acc(*logits, d.scale(upstream / n), grads)?;
            }
            Op::Reverse { input, strength } => {
                acc(*input, g.scale(-strength), grads)?;
            }
            Op::SqDists(x) => {
                if self.tracked(*x) {
                    let xv = self.value(*x);
                    let sym = g.add(&g.transpose())?;
                    let weighted = sym.matmul(xv)?;
                    let mut out = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..xv.rows() {
                        let rs: f64 = sym.row(i).iter().sum();
                        for ((o, &xi), &wi) in
                            out.row_mut(i).iter_mut().zip(xv.row(i)).zip(weighted.row(i))
                        {
                            *o = 2.0 * (rs * xi - wi);
                        }
                    }
                    acc(*x, out, grads)?;
                }
            }
            Op::SqDistsCross(x, y) => {
                let (xv, yv) = (self.value(*x), self.value(*y));
                if self.tracked(*x) {
                    let gy = g.matmul(yv)?;
                    let mut out = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..xv.rows() {
                        let rs: f64 = g.row(i).iter().sum();
                        for ((o, &xi), &w) in
                            out.row_mut(i).iter_mut().zip(xv.row(i)).zip(gy.row(i))
                        {
                            *o = 2.0 * (rs * xi - w);
                        }
                    }
                    acc(*x, out, grads)?;
                }
                if self.tracked(*y) {
                    let gtx = g.t_matmul(xv)?;
                    let cs = g.col_sums();
                    let mut out = Matrix::zeros(yv.rows(), yv.cols());
                    for j in 0..yv.rows() {
                        let c = cs.data()[j];
                        for ((o, &yj), &w) in
                            out.row_mut(j).iter_mut().zip(yv.row(j)).zip(gtx.row(j))
                        {
                            *o = 2.0 * (c * yj - w);
                        }
                    }
                    acc(*y, out, grads)?;
                }
            }
            Op::Exp(x) => {
                acc(*x, g.hadamard(&node.value)?, grads)?;
            }
            Op::Scale(x, c) => {
                acc(*x, g.scale(*c), grads)?;
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    acc(*a, g.hadamard(self.value(*b))?, grads)?;
                }
                if self.tracked(*b) {
                    acc(*b, g.hadamard(self.value(*a))?, grads)?;
                }
            }
            Op::MulConst(x, c) => {
                acc(*x, g.hadamard(c)?, grads)?;
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                acc(*x, Matrix::filled(r, c, g.item()?), grads)?;
            }
            Op::Mean(x) => {
                let (r, c) = self.value(*x).shape();
                let n = (r * c).max(1) as f64;
                acc(*x, Matrix::filled(r, c, g.item()? / n), grads)?;
            }
            Op::SelectRows(x, indices) => {
                let (r, c) = self.value(*x).shape();
                let mut out = Matrix::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    for (o, v) in out.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*x, out, grads)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_params_gives_ones() {
        let mut tape = Tape::new();
        let a = tape.param(ParamId(0), Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap());
        let b = tape.param(ParamId(1), Matrix::row_vector(&[4.0, 5.0]));
        let sa = tape.sum(a);
        let sb = tape.sum(b);
        let loss = tape.add(sa, sb).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap(), &Matrix::filled(2, 2, 1.0));
        assert_eq!(g.get(ParamId(1)).unwrap(), &Matrix::filled(1, 2, 1.0));
    }

    #[test]
    fn disconnected_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(ParamId(0), Matrix::row_vector(&[1.0, 2.0]));
        let _b = tape.param(ParamId(7), Matrix::filled(3, 2, 9.0));
        let loss = tape.sum(a);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.get(ParamId(7)).unwrap(), &Matrix::zeros(3, 2));
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let mut tape = Tape::new();
        let a = tape.param(ParamId(0), Matrix::row_vector(&[1.0, 2.0]));
        assert!(matches!(tape.backward(a), Err(Error::Usage(_))));
    }

    #[test]
    fn reversal_forward_identity_backward_negated() {
        let x = Matrix::row_vector(&[1.0, 2.0, 3.0]);
        let upstream = Matrix::row_vector(&[0.5, -1.5, 2.0]);
        for strength in [1.0, 0.0, 2.5] {
            let mut tape = Tape::new();
            let v = tape.param(ParamId(0), x.clone());
            let r = tape.gradient_reversal(v, strength).unwrap();
            assert_eq!(tape.value(r), &x);
            let weighted = tape.mul_const(r, upstream.clone()).unwrap();
            let loss = tape.sum(weighted);
            let g = tape.backward(loss).unwrap();
            let expected = upstream.scale(-strength);
            assert_eq!(g.get(ParamId(0)).unwrap(), &expected);
        }
        let mut tape = Tape::new();
        let v = tape.constant(x);
        assert!(tape.gradient_reversal(v, -1.0).is_err());
    }

    #[test]
    fn relu_mask_is_indicator() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), Matrix::row_vector(&[-1.0, 0.0, 2.0, 0.5]));
        let r = tape.relu(x);
        let loss = tape.sum(r);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(tape.min_relu_margin(), 0.0);
    }

    #[test]
    fn repeated_param_registration_is_shared() {
        let mut tape = Tape::new();
        let a = tape.param(ParamId(3), Matrix::scalar(2.0));
        let b = tape.param(ParamId(3), Matrix::scalar(100.0));
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.get(ParamId(3)).unwrap().item().unwrap(), 4.0);
    }
}
