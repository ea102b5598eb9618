//! Reverse-mode differentiation over dense matrices.
//!
//! Every forward kernel is recorded as a node holding its output value and
//! whatever it needs for the vector-Jacobian product. [`GradTape::backward`]
//! walks the nodes in reverse creation order.

use super::ops::{self, LayerNormParts};
use super::{FlopCounter, Matrix};
use crate::error::{FlexError, Result};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    DivScalar(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        std: Vec<f64>,
    },
    Gelu(Var),
    ConcatRows(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Matrix,
    },
    WeightedSum(Var, Matrix),
    /// Values that feed a discrete decision (token selection). Gradients stop
    /// here.
    Boundary(#[allow(dead_code)] Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation plus the FLOP counter its kernels charge.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    counter: FlopCounter,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that keeps charging an existing counter.
    pub fn with_counter(counter: FlopCounter) -> Self {
        Self {
            nodes: Vec::new(),
            counter,
        }
    }

    pub fn counter(&self) -> &FlopCounter {
        &self.counter
    }

    pub fn counter_mut(&mut self) -> &mut FlopCounter {
        &mut self.counter
    }

    pub fn into_counter(self) -> FlopCounter {
        self.counter
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A differentiable input.
    pub fn param(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn leaf(&mut self, m: Matrix, differentiable: bool) -> Var {
        self.push(m, Op::Leaf, differentiable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            &mut self.counter,
        )?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            &mut self.counter,
        )?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    /// `x + bias` with `bias` a `1×C` row broadcast over all rows of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let b = self.value(bias);
        if b.rows() != 1 {
            return Err(FlexError::Shape(format!(
                "add_row: bias must be 1xC, got {}x{}",
                b.rows(),
                b.cols()
            )));
        }
        let out = ops::add_row(
            &self.nodes[x.0].value,
            self.nodes[bias.0].value.data(),
            &mut self.counter,
        )?;
        let g = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), g))
    }

    pub fn div_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = ops::div_scalar(&self.nodes[x.0].value, s, &mut self.counter);
        let g = self.any_grad(&[x]);
        self.push(out, Op::DivScalar(x, s), g)
    }

    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Matrix>) -> Result<Var> {
        let out = ops::softmax_rows(&self.nodes[x.0].value, mask, &mut self.counter)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x), g))
    }

    /// Layer norm with `1×C` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let LayerNormParts { out, xhat, std } = ops::layer_norm_parts(
            &self.nodes[x.0].value,
            self.nodes[gain.0].value.data(),
            self.nodes[bias.0].value.data(),
            &mut self.counter,
        )?;
        let g = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                std,
            },
            g,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(&self.nodes[x.0].value, &mut self.counter);
        let g = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), g)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_rows(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::ConcatRows(a, b), g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let out = ops::concat_cols(&refs)?;
        let g = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_cols(start, len);
        let g = self.any_grad(&[x]);
        self.push(out, Op::SliceCols(x, start), g)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice_rows(start, end);
        let g = self.any_grad(&[x]);
        self.push(out, Op::SliceRows(x, start), g)
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let out = ops::gather_rows(self.value(x), indices)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::GatherRows(x, indices.to_vec()), g))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let g = self.any_grad(&[x]);
        self.push(out, Op::Transpose(x), g)
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = ops::gather_rows(self.value(table), ids).map_err(|_| {
            FlexError::Shape(format!(
                "token id out of range for vocab {}",
                self.value(table).rows()
            ))
        })?;
        let g = self.any_grad(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    /// Mean cross-entropy over `(row, class)` targets of row-wise logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        if targets.is_empty() {
            return Err(FlexError::EmptyInput(
                "cross_entropy needs at least one target".into(),
            ));
        }
        let lg = self.value(logits);
        for &(r, c) in targets {
            if r >= lg.rows() || c >= lg.cols() {
                return Err(FlexError::Shape(format!(
                    "target ({r},{c}) outside {}x{} logits",
                    lg.rows(),
                    lg.cols()
                )));
            }
        }
        // Loss bookkeeping is not part of the counted model.
        let probs = ops::softmax_rows(lg, None, &mut FlopCounter::new())?;
        let mut loss = 0.0;
        for &(r, c) in targets {
            let row = lg.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[c];
        }
        loss /= targets.len() as f64;
        let g = self.any_grad(&[logits]);
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![loss])?,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            g,
        ))
    }

    /// `sum(x ⊙ weights)` as a `1×1` node.
    pub fn weighted_sum(&mut self, x: Var, weights: Matrix) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(FlexError::Shape(format!(
                "weighted_sum: {}x{} against {}x{}",
                xv.rows(),
                xv.cols(),
                weights.rows(),
                weights.cols()
            )));
        }
        let s: f64 = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let g = self.any_grad(&[x]);
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![s])?,
            Op::WeightedSum(x, weights),
            g,
        ))
    }

    /// Marks `x` as feeding a non-differentiable decision. The returned node
    /// carries the same value and never receives or passes a gradient.
    pub fn boundary(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::Boundary(x), false)
    }

    /// Backpropagates from a scalar (`1×1`) node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(FlexError::Shape(format!(
                "backward needs a 1x1 loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        self.backward_from(loss, Matrix::filled(1, 1, 1.0))
    }

    /// Backpropagates `seed` (same shape as `output`) through the tape.
    pub fn backward_from(&self, output: Var, seed: Matrix) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(FlexError::Shape("backward seed shape mismatch".into()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let boundaries = self
            .nodes
            .iter()
            .map(|n| matches!(n.op, Op::Boundary(_)))
            .collect();
        Ok(Gradients { grads, boundaries })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, d: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.accumulate(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf | Op::Boundary(_) => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    acc(*a, matmul_nt(g, self.value(*b)));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, matmul_tn(self.value(*a), g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(x, bias) => {
                acc(*x, g.clone());
                if self.nodes[bias.0].needs_grad {
                    let mut db = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, v) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::DivScalar(x, s) => acc(*x, g.map(|v| v / s)),
            Op::Softmax(x) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                std,
            } => {
                let gv = self.value(*gain).data();
                let c = xhat.cols();
                if self.nodes[x.0].needs_grad {
                    let mut dx = Matrix::zeros(xhat.rows(), c);
                    for i in 0..xhat.rows() {
                        let (hr, gr) = (xhat.row(i), g.row(i));
                        let gh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_g = gh.iter().sum::<f64>() / c as f64;
                        let mean_gh = gh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                            *d = (gh[j] - mean_g - hr[j] * mean_gh) / std[i];
                        }
                    }
                    acc(*x, dx);
                }
                if self.nodes[gain.0].needs_grad {
                    let mut dg = Matrix::zeros(1, c);
                    for i in 0..xhat.rows() {
                        for (j, d) in dg.row_mut(0).iter_mut().enumerate() {
                            *d += g.get(i, j) * xhat.get(i, j);
                        }
                    }
                    acc(*gain, dg);
                }
                if self.nodes[bias.0].needs_grad {
                    let mut db = Matrix::zeros(1, c);
                    for i in 0..g.rows() {
                        for (d, v) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &d)| d * ops::gelu_grad_scalar(a))
                    .collect();
                acc(
                    *x,
                    Matrix::from_vec(xv.rows(), xv.cols(), data).expect("same shape"),
                );
            }
            Op::ConcatRows(a, b) => {
                let p = self.value(*a).rows();
                acc(*a, g.slice_rows(0, p));
                acc(*b, g.slice_rows(p, g.rows()));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    acc(*p, g.slice_cols(off, w));
                    off += w;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..g.rows() {
                    dx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*x, dx);
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..g.rows() {
                    dx.row_mut(start + i).copy_from_slice(g.row(i));
                }
                acc(*x, dx);
            }
            Op::GatherRows(x, idx) | Op::Embedding { table: x, ids: idx } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (d, v) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(*x, dx);
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.get(0, 0) / targets.len() as f64;
                let mut dl = Matrix::zeros(probs.rows(), probs.cols());
                for &(r, c) in targets {
                    for (j, d) in dl.row_mut(r).iter_mut().enumerate() {
                        let onehot = if j == c { 1.0 } else { 0.0 };
                        *d += scale * (probs.get(r, j) - onehot);
                    }
                }
                acc(*logits, dl);
            }
            Op::WeightedSum(x, w) => {
                let s = g.get(0, 0);
                acc(*x, w.map(|v| v * s));
            }
        }
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    boundaries: Vec<bool>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` is not differentiable or did not
    /// influence the output.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but errors when asked to differentiate through
    /// a selection boundary.
    pub fn wrt(&self, v: Var) -> Result<Option<&Matrix>> {
        if self.boundaries.get(v.0).copied().unwrap_or(false) {
            return Err(FlexError::NonDifferentiable(format!(
                "node {} feeds a discrete selection decision",
                v.0
            )));
        }
        Ok(self.get(v))
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// `a · bᵀ` without materialising the transpose.
fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols(), b.cols());
    Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum()
    })
}

/// `aᵀ · b` without materialising the transpose.
fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.rows(), b.rows());
    let mut out = Matrix::zeros(a.cols(), b.cols());
    for k in 0..a.rows() {
        let (ar, br) = (a.row(k), b.row(k));
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out.row_mut(i).iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{central_difference, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_sum_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = rand_matrix(&mut rng, 3, 4);
        let b0 = rand_matrix(&mut rng, 4, 2);
        let mut t = GradTape::new();
        let a = t.param(a0.clone());
        let b = t.param(b0.clone());
        let c = t.matmul(a, b).unwrap();
        let loss = t.weighted_sum(c, Matrix::filled(3, 2, 1.0)).unwrap();
        let g = t.backward(loss).unwrap();
        // d(sum AB)/dA = 1 · Bᵀ
        let ones = Matrix::filled(3, 2, 1.0);
        let expect = ops::matmul(&ones, &b0.transpose(), &mut FlopCounter::new()).unwrap();
        assert!(g.get(a).unwrap().max_abs_diff(&expect) < 1e-12);
        let numeric = central_difference(&a0, 1e-6, |m| {
            ops::matmul(m, &b0, &mut FlopCounter::new()).unwrap().sum()
        });
        assert!(max_relative_error(g.get(a).unwrap(), &numeric) < 1e-5);
    }

    #[test]
    fn softmax_sum_gradient_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = GradTape::new();
        let x = t.param(rand_matrix(&mut rng, 3, 5));
        let y = t.softmax_rows(x, None).unwrap();
        let loss = t.weighted_sum(y, Matrix::filled(3, 5, 1.0)).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn boundary_blocks_gradients_and_reports_it() {
        let mut t = GradTape::new();
        let x = t.param(Matrix::filled(1, 2, 0.5));
        let b = t.boundary(x);
        let y = t.add(x, b).unwrap();
        let loss = t.weighted_sum(y, Matrix::filled(1, 2, 1.0)).unwrap();
        let g = t.backward(loss).unwrap();
        // Only the direct path contributes.
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
        assert!(matches!(g.wrt(b), Err(FlexError::NonDifferentiable(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = GradTape::new();
        let a = t.constant(Matrix::identity(2));
        let b = t.param(Matrix::identity(2));
        let c = t.matmul(a, b).unwrap();
        let loss = t.weighted_sum(c, Matrix::filled(2, 2, 1.0)).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = GradTape::new();
        let a = t.param(Matrix::zeros(2, 2));
        assert!(t.backward(a).is_err());
    }
}
