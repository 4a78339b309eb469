use super::{GradError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    /// `b` is either the same shape as `a` or a single row broadcast over rows of `a`.
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    RowL2Normalize { input: Var, eps: f64 },
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    Log { input: Var, floor: f64 },
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    SquaredDiff(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Records a forward computation so that it can be replayed backward.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order; the backward pass walks it from the end.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Param, value)
    }

    pub fn is_param(&self, var: Var) -> bool {
        matches!(self.nodes[var.0].op, Op::Param)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// Elementwise sum; a `1×M` right operand is broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = if av.shape() == bv.shape() {
            av.zip_map(bv, |x, y| x + y)
        } else if bv.rows() == 1 && bv.cols() == av.cols() {
            let cols = av.cols();
            let bias = bv.data();
            let mut out = av.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += bias[i % cols];
            }
            out
        } else {
            return Err(GradError::ShapeMismatch {
                op: "add",
                left: av.shape(),
                right: bv.shape(),
            });
        };
        Ok(self.push(Op::Add(a, b), value))
    }

    /// Elementwise (Hadamard) product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(GradError::ShapeMismatch {
                op: "mul",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let value = av.zip_map(bv, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    /// Divides each row by `‖row‖₂ + eps`.
    pub fn row_l2_normalize(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        let cols = av.cols();
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            let denom = row.iter().map(|x| x * x).sum::<f64>().sqrt() + eps;
            row.iter_mut().for_each(|x| *x /= denom);
        }
        self.push(Op::RowL2Normalize { input: a, eps }, out)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            softmax_in_place(row);
        }
        self.push(Op::RowSoftmax(a), out)
    }

    /// `x - logsumexp(x)` per row, evaluated without forming the softmax.
    pub fn row_log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(Op::RowLogSoftmax(a), out)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor).ln());
        self.push(Op::Log { input: a, floor }, value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::scalar(av.sum() / av.len().max(1) as f64);
        self.push(Op::Mean(a), value)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    /// Elementwise `(a - b)²`.
    pub fn squared_diff(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(GradError::ShapeMismatch {
                op: "squared_diff",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let value = av.zip_map(bv, |x, y| (x - y) * (x - y));
        Ok(self.push(Op::SquaredDiff(a, b), value))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GradError> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(GradError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match node.op {
                Op::Constant | Op::Param => {
                    // Leaves keep their adjoint for lookup; interior adjoints are dropped.
                    grads[idx] = Some(upstream);
                }
                Op::MatMul(a, b) => {
                    let da = upstream.matmul(&self.value(b).transpose())?;
                    let db = self.value(a).transpose().matmul(&upstream)?;
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::Add(a, b) => {
                    let b_shape = self.value(b).shape();
                    let db = if b_shape == upstream.shape() {
                        upstream.clone()
                    } else {
                        let mut acc = Tensor::zeros(1, upstream.cols());
                        for r in 0..upstream.rows() {
                            for (o, v) in acc.data_mut().iter_mut().zip(upstream.row(r)) {
                                *o += v;
                            }
                        }
                        acc
                    };
                    accumulate(&mut grads, a, upstream);
                    accumulate(&mut grads, b, db);
                }
                Op::Mul(a, b) => {
                    let da = upstream.zip_map(self.value(b), |g, y| g * y);
                    let db = upstream.zip_map(self.value(a), |g, x| g * x);
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut grads, a, upstream.map(|g| g * factor));
                }
                Op::Relu(a) => {
                    let da = upstream.zip_map(self.value(a), |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, a, da);
                }
                Op::Sigmoid(a) => {
                    let da = upstream.zip_map(&node.value, |g, s| g * s * (1.0 - s));
                    accumulate(&mut grads, a, da);
                }
                Op::RowL2Normalize { input, eps } => {
                    let x = self.value(input);
                    let cols = x.cols();
                    let mut dx = Tensor::zeros(x.rows(), cols);
                    for r in 0..x.rows() {
                        let xr = x.row(r);
                        let gr = upstream.row(r);
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let denom = norm + eps;
                        let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let coupling = if norm > 0.0 {
                            dot / (norm * denom * denom)
                        } else {
                            0.0
                        };
                        for c in 0..cols {
                            dx.set(r, c, gr[c] / denom - xr[c] * coupling);
                        }
                    }
                    accumulate(&mut grads, input, dx);
                }
                Op::RowSoftmax(a) => {
                    let p = &node.value;
                    let cols = p.cols();
                    let mut dx = Tensor::zeros(p.rows(), cols);
                    for r in 0..p.rows() {
                        let (pr, gr) = (p.row(r), upstream.row(r));
                        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            dx.set(r, c, pr[c] * (gr[c] - dot));
                        }
                    }
                    accumulate(&mut grads, a, dx);
                }
                Op::RowLogSoftmax(a) => {
                    let out = &node.value;
                    let cols = out.cols();
                    let mut dx = Tensor::zeros(out.rows(), cols);
                    for r in 0..out.rows() {
                        let (yr, gr) = (out.row(r), upstream.row(r));
                        let total: f64 = gr.iter().sum();
                        for c in 0..cols {
                            dx.set(r, c, gr[c] - yr[c].exp() * total);
                        }
                    }
                    accumulate(&mut grads, a, dx);
                }
                Op::Log { input, floor } => {
                    let da = upstream.zip_map(self.value(input), |g, x| {
                        if x > floor {
                            g / x
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, input, da);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(a).shape();
                    accumulate(&mut grads, a, Tensor::filled(r, c, upstream.data()[0]));
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(a).shape();
                    let g = upstream.data()[0] / (r * c).max(1) as f64;
                    accumulate(&mut grads, a, Tensor::filled(r, c, g));
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, a, upstream.transpose());
                }
                Op::SquaredDiff(a, b) => {
                    let diff = self.value(a).zip_map(self.value(b), |x, y| x - y);
                    let da = upstream.zip_map(&diff, |g, d| 2.0 * g * d);
                    let db = da.map(|v| -v);
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
            }
        }

        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let b = tape.constant(t(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c), &t(&[&[3.0, 4.0], &[5.0, 6.0]]));

        let x = tape.constant(t(&[&[1.0, 2.0]]));
        let y = tape.constant(t(&[&[3.0], &[4.0]]));
        let d = tape.matmul(x, y).unwrap();
        assert_eq!(tape.value(d).item(), Some(11.0));
    }

    #[test]
    fn matmul_shape_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }

    #[test]
    fn normalize_three_four_five() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[3.0, 4.0], &[0.6, 0.8]]));
        let y = tape.row_l2_normalize(x, 1e-12);
        assert_abs_diff_eq!(tape.value(y).get(0, 0), 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(y).get(0, 1), 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(y).get(1, 0), 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(y).get(1, 1), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn normalize_zero_row_stays_finite() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(1, 3));
        let y = tape.row_l2_normalize(x, 1e-12);
        let s = tape.sum(y);
        assert!(tape.value(y).is_finite());
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(x).is_finite());
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let theta = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(theta, theta).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.wrt(theta).item(), Some(6.0));
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut tape = Tape::new();
        let theta = tape.param(Tensor::filled(2, 2, 1.5));
        let c = tape.constant(Tensor::scalar(4.0));
        let loss = tape.scale(c, 2.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(theta), Tensor::zeros(2, 2));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let theta = tape.param(Tensor::zeros(2, 1));
        assert!(matches!(
            tape.backward(theta),
            Err(GradError::NonScalarLoss { shape: (2, 1) })
        ));
    }

    #[test]
    fn shared_subexpression_gradients_sum() {
        // loss = sum(x) + sum(x ⊙ x) → d/dx = 1 + 2x
        let mut tape = Tape::new();
        let x = tape.param(t(&[&[1.0, -2.0]]));
        let s1 = tape.sum(x);
        let sq = tape.mul(x, x).unwrap();
        let s2 = tape.sum(sq);
        let loss = tape.add(s1, s2).unwrap();
        let g = tape.backward(loss).unwrap().wrt(x);
        assert_eq!(g.data(), &[3.0, -3.0]);
    }

    #[test]
    fn broadcast_add_reduces_bias_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(3, 2));
        let b = tape.param(t(&[&[0.5, -0.5]]));
        let y = tape.add(x, b).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap().wrt(b);
        assert_eq!(g.data(), &[3.0, 3.0]);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 2.0, -3.0], &[40.0, -40.0, 0.0]]));
        let a = tape.row_log_softmax(x);
        let p = tape.row_softmax(x);
        let b = tape.log(p, 1e-300);
        for (u, v) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-12);
        }
    }
}
