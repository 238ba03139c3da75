//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! The tape records a fixed op set (linear, add, elementwise multiply, GELU,
//! sigmoid, layer norm, row softmax, matmul, column concat, row mean-pool).
//! Weights referenced by `linear` and `layer_norm` are borrowed constants and
//! receive no gradient. Nodes are appended in evaluation order, so a single
//! reverse sweep visits each node once.

use crate::error::{shape_err, Error, Result};

use super::matrix::Matrix;
use super::ops::{gelu_grad_scalar, gelu_scalar, layer_norm_into, sigmoid_scalar, softmax_rows};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<'a> {
    Leaf,
    Linear { x: Var, weight: &'a Matrix },
    Add(Var, Var),
    Mul(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: &'a [f64], normed: Matrix, inv_std: Vec<f64> },
    Softmax(Var),
    MatMul { a: Var, b: Var, transpose_b: bool, scale: f64 },
    Concat(Vec<Var>),
    MeanPool(Var),
}

struct Node<'a> {
    value: Matrix,
    op: Op<'a>,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Matrix, op: Op<'a>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node (input or constant; constants simply have their gradient ignored).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `x · W + b` with `W` shaped `in x out`.
    pub fn linear(&mut self, x: Var, weight: &'a Matrix, bias: &'a [f64]) -> Result<Var> {
        let mut y = self.value(x).matmul(weight)?;
        if bias.len() != y.cols() {
            return Err(shape_err(format!("bias of {} for {} outputs", bias.len(), y.cols())));
        }
        y.add_row_broadcast(bias);
        Ok(self.push(y, Op::Linear { x, weight }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(gelu_scalar);
        self.push(y, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid_scalar);
        self.push(y, Op::Sigmoid(x))
    }

    /// Row-wise layer normalization.
    pub fn layer_norm(&mut self, x: Var, gamma: &'a [f64], beta: &'a [f64], eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != gamma.len() || xv.cols() != beta.len() {
            return Err(shape_err("layer_norm parameter length"));
        }
        let (rows, cols) = xv.dims();
        let ones = vec![1.0; cols];
        let zeros = vec![0.0; cols];
        let mut normed = Matrix::zeros(rows, cols);
        let mut y = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let (_, istd) = layer_norm_into(xv.row(r), &ones, &zeros, eps, normed.row_mut(r));
            inv_std.push(istd);
            for (((o, &n), &g), &b) in y.row_mut(r).iter_mut().zip(normed.row(r)).zip(gamma).zip(beta) {
                *o = n * g + b;
            }
        }
        Ok(self.push(y, Op::LayerNorm { x, gamma, normed, inv_std }))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = softmax_rows(self.value(x));
        self.push(y, Op::Softmax(x))
    }

    /// `scale · a · b` (or `scale · a · bᵀ` when `transpose_b`).
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool, scale: f64) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let mut y = if transpose_b { av.matmul_t(bv)? } else { av.matmul(bv)? };
        if scale != 1.0 {
            y = y.scale(scale);
        }
        Ok(self.push(y, Op::MatMul { a, b, transpose_b, scale }))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Matrix::hconcat(&mats)?;
        Ok(self.push(y, Op::Concat(parts.to_vec())))
    }

    /// Mean over rows (`n x d -> 1 x d`).
    pub fn mean_pool(&mut self, x: Var) -> Var {
        let y = self.value(x).mean_rows();
        self.push(y, Op::MeanPool(x))
    }

    /// Reverse sweep from a `1 x 1` output. Returns the adjoint of every node
    /// (`None` for nodes the output does not depend on).
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).dims() != (1, 1) {
            return Err(shape_err("backward requires a 1x1 output"));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("adjoint of node {idx}")));
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Linear { x, weight } => {
                    accumulate(&mut grads, *x, g.matmul_t(weight)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.hadamard(self.value(*b))?;
                    let gb = g.hadamard(self.value(*a))?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Gelu(x) => {
                    let dx = g.zip_with(self.value(*x), |d, v| d * gelu_grad_scalar(v))?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = g.zip_with(&node.value, |d, y| d * y * (1.0 - y))?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, gamma, normed, inv_std } => {
                    let (rows, cols) = normed.dims();
                    let n = cols as f64;
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let xhat = normed.row(r);
                        let dxhat: Vec<f64> = g.row(r).iter().zip(gamma.iter()).map(|(d, gm)| d * gm).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dxhat.iter().zip(xhat).map(|(d, h)| d * h).sum::<f64>() / n;
                        for ((o, d), h) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat) {
                            *o = inv_std[r] * (d - mean_d - h * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let inner: f64 = g.row(r).iter().zip(y.row(r)).map(|(d, p)| d * p).sum();
                        for ((o, d), p) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = p * (d - inner);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MatMul { a, b, transpose_b, scale } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let gs = if *scale != 1.0 { g.scale(*scale) } else { g.clone() };
                    let (ga, gb) = if *transpose_b {
                        // y = a·bᵀ: da = g·b, db = gᵀ·a
                        (gs.matmul(bv)?, gs.t_matmul(av)?)
                    } else {
                        // y = a·b: da = g·bᵀ, db = aᵀ·g
                        (gs.matmul_t(bv)?, av.t_matmul(&gs)?)
                    };
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        accumulate(&mut grads, p, g.columns(start, w));
                        start += w;
                    }
                }
                Op::MeanPool(x) => {
                    let rows = self.value(*x).rows();
                    let mut dx = Matrix::zeros(rows, g.cols());
                    let scaled: Vec<f64> = g.row(0).iter().map(|v| v / rows as f64).collect();
                    for r in 0..rows {
                        dx.row_mut(r).copy_from_slice(&scaled);
                    }
                    accumulate(&mut grads, *x, dx);
                }
            }
            // Operands always precede their consumers, so nothing accumulates
            // into `idx` after this point.
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, or `None` if unreachable.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}
