use crate::linalg::Matrix;

use super::NnError;

/// Handle to a node in a [`Graph`]; cheap to copy, valid only for the graph
/// that produced it.
#[derive(Debug, Clone, Copy)]
pub struct Tensor {
    pub id: usize,
    pub rows: usize,
    pub cols: usize,
}

enum Op {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    /// Row-wise layer norm with a learned gain (1 x cols), eps 1e-5.
    LayerNorm { x: usize, gain: usize },
    /// Softmax over each row with positions j > i masked to zero probability.
    CausalSoftmax(usize),
    SliceCols { x: usize, lo: usize },
    ConcatCols(Vec<usize>),
    /// Gathers `ids` rows of `table`.
    Rows { table: usize, ids: Vec<usize> },
    /// Mean cross-entropy over supervised positions; caches the softmax.
    CrossEntropy { logits: usize, targets: Vec<Option<u32>>, probs: Matrix, supervised: usize },
    Sum(usize),
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
    op: Op,
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Reverse-mode autodiff tape over dense matrices. Ops append nodes; insert
/// order is a topological order, so backward is a single reverse pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, t: Tensor) -> &Matrix {
        &self.nodes[t.id].value
    }

    /// Gradient accumulated by the last `backward`, if any.
    pub fn grad(&self, t: Tensor) -> Option<&Matrix> {
        self.nodes[t.id].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Tensor {
        self.push(value, requires_grad, Op::Leaf)
    }

    fn push(&mut self, value: Matrix, requires_grad: bool, op: Op) -> Tensor {
        let (rows, cols) = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Tensor { id, rows, cols }
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let value = self.nodes[a.id].value.matmul(&self.nodes[b.id].value).unwrap_or_else(|e| {
            panic!("graph matmul on incompatible shapes: {e}");
        });
        self.push(value, self.requires(a.id) || self.requires(b.id), Op::Matmul(a.id, b.id))
    }

    pub fn transpose(&mut self, a: Tensor) -> Tensor {
        let value = self.nodes[a.id].value.transpose();
        self.push(value, self.requires(a.id), Op::Transpose(a.id))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let value = self.nodes[a.id].value.add(&self.nodes[b.id].value).unwrap_or_else(|e| {
            panic!("graph add on mismatched shapes: {e}");
        });
        self.push(value, self.requires(a.id) || self.requires(b.id), Op::Add(a.id, b.id))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let value = self.nodes[a.id].value.hadamard(&self.nodes[b.id].value).unwrap_or_else(|e| {
            panic!("graph mul on mismatched shapes: {e}");
        });
        self.push(value, self.requires(a.id) || self.requires(b.id), Op::Mul(a.id, b.id))
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        let value = self.nodes[a.id].value.scale(c);
        self.push(value, self.requires(a.id), Op::Scale(a.id, c))
    }

    pub fn gelu(&mut self, a: Tensor) -> Tensor {
        let x = &self.nodes[a.id].value;
        let value = Matrix::from_fn(x.rows(), x.cols(), |i, j| gelu(x[(i, j)]));
        self.push(value, self.requires(a.id), Op::Gelu(a.id))
    }

    pub fn layer_norm(&mut self, x: Tensor, gain: Tensor) -> Tensor {
        assert_eq!(gain.rows, 1, "layer norm gain must be a row vector");
        assert_eq!(gain.cols, x.cols, "layer norm gain width must match features");
        let xv = &self.nodes[x.id].value;
        let gv = &self.nodes[gain.id].value;
        let mut value = Matrix::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let (mean, inv_std) = row_moments(xv.row(i));
            for j in 0..x.cols {
                value[(i, j)] = (xv[(i, j)] - mean) * inv_std * gv[(0, j)];
            }
        }
        self.push(
            value,
            self.requires(x.id) || self.requires(gain.id),
            Op::LayerNorm { x: x.id, gain: gain.id },
        )
    }

    pub fn causal_softmax(&mut self, a: Tensor) -> Tensor {
        assert_eq!(a.rows, a.cols, "causal softmax expects square attention scores");
        let x = &self.nodes[a.id].value;
        let mut value = Matrix::zeros(a.rows, a.cols);
        for i in 0..a.rows {
            let row = x.row(i);
            let m = row[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in &row[..=i] {
                denom += (v - m).exp();
            }
            for j in 0..=i {
                value[(i, j)] = (row[j] - m).exp() / denom;
            }
        }
        self.push(value, self.requires(a.id), Op::CausalSoftmax(a.id))
    }

    pub fn slice_cols(&mut self, a: Tensor, lo: usize, hi: usize) -> Tensor {
        assert!(lo < hi && hi <= a.cols, "slice {lo}..{hi} out of {} columns", a.cols);
        let value = self.nodes[a.id].value.columns(lo, hi);
        self.push(value, self.requires(a.id), Op::SliceCols { x: a.id, lo })
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat needs at least one part");
        let rows = parts[0].rows;
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            assert_eq!(p.rows, rows, "concat parts must share row count");
            let pv = &self.nodes[p.id].value;
            for i in 0..rows {
                for j in 0..p.cols {
                    value[(i, offset + j)] = pv[(i, j)];
                }
            }
            offset += p.cols;
        }
        let requires = parts.iter().any(|p| self.requires(p.id));
        self.push(value, requires, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    /// Gathers rows of `table` (an embedding lookup).
    pub fn rows(&mut self, table: Tensor, ids: &[usize]) -> Tensor {
        let tv = &self.nodes[table.id].value;
        for &r in ids {
            assert!(r < table.rows, "row {r} out of {} table rows", table.rows);
        }
        let value = Matrix::from_fn(ids.len(), table.cols, |i, j| tv[(ids[i], j)]);
        self.push(value, self.requires(table.id), Op::Rows { table: table.id, ids: ids.to_vec() })
    }

    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let total: f64 = self.nodes[a.id].value.data().iter().sum();
        let value = Matrix::from_vec(1, 1, vec![total]).expect("1x1");
        self.push(value, self.requires(a.id), Op::Sum(a.id))
    }

    /// Mean next-token cross-entropy over positions with a `Some` target.
    pub fn cross_entropy(
        &mut self,
        logits: Tensor,
        targets: &[Option<u32>],
    ) -> Result<Tensor, NnError> {
        if targets.len() != logits.rows {
            return Err(NnError::TargetsLengthMismatch {
                targets: targets.len(),
                positions: logits.rows,
            });
        }
        let vocab = logits.cols;
        for t in targets.iter().flatten() {
            if *t as usize >= vocab {
                return Err(NnError::TargetOutOfRange { target: *t, vocab });
            }
        }
        let supervised = targets.iter().filter(|t| t.is_some()).count();
        if supervised == 0 {
            return Err(NnError::NoSupervisedPositions);
        }
        let lv = &self.nodes[logits.id].value;
        let log_probs = log_softmax_rows(lv);
        let mut probs = Matrix::zeros(logits.rows, vocab);
        for i in 0..logits.rows {
            for j in 0..vocab {
                probs[(i, j)] = log_probs[(i, j)].exp();
            }
        }
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                total -= log_probs[(i, *t as usize)];
            }
        }
        let value = Matrix::from_vec(1, 1, vec![total / supervised as f64]).expect("1x1");
        Ok(self.push(
            value,
            self.requires(logits.id),
            Op::CrossEntropy { logits: logits.id, targets: targets.to_vec(), probs, supervised },
        ))
    }

    /// Accumulates gradients of `loss` into every reachable node that
    /// requires them. Nodes with `requires_grad == false` never receive a
    /// gradient.
    pub fn backward(&mut self, loss: Tensor) -> Result<(), NnError> {
        if loss.rows != 1 || loss.cols != 1 {
            return Err(NnError::NonScalarBackward { rows: loss.rows, cols: loss.cols });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Matrix::from_vec(1, 1, vec![1.0]).expect("1x1"));
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.grad = grad;
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |target: usize, delta: Matrix| {
            if !self.nodes[target].requires_grad {
                return;
            }
            match &mut grads[target] {
                Some(existing) => {
                    *existing = existing.add(&delta).expect("gradient shapes agree");
                }
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                if self.nodes[*a].requires_grad {
                    acc(*a, g.matmul(&bv.transpose()).expect("matmul grad shapes"));
                }
                if self.nodes[*b].requires_grad {
                    acc(*b, av.transpose().matmul(g).expect("matmul grad shapes"));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                acc(*a, g.hadamard(bv).expect("mul grad shapes"));
                acc(*b, g.hadamard(av).expect("mul grad shapes"));
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::Gelu(a) => {
                let x = &self.nodes[*a].value;
                let delta = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                    g[(i, j)] * gelu_derivative(x[(i, j)])
                });
                acc(*a, delta);
            }
            Op::LayerNorm { x, gain } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gain].value;
                let (rows, cols) = xv.shape();
                if self.nodes[*gain].requires_grad {
                    let mut dgain = Matrix::zeros(1, cols);
                    for i in 0..rows {
                        let (mean, inv_std) = row_moments(xv.row(i));
                        for j in 0..cols {
                            let xhat = (xv[(i, j)] - mean) * inv_std;
                            dgain[(0, j)] += g[(i, j)] * xhat;
                        }
                    }
                    acc(*gain, dgain);
                }
                if self.nodes[*x].requires_grad {
                    let mut dx = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        let (mean, inv_std) = row_moments(xv.row(i));
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..cols {
                            let xhat = (xv[(i, j)] - mean) * inv_std;
                            let dxhat = g[(i, j)] * gv[(0, j)];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= cols as f64;
                        mean_dxhat_xhat /= cols as f64;
                        for j in 0..cols {
                            let xhat = (xv[(i, j)] - mean) * inv_std;
                            let dxhat = g[(i, j)] * gv[(0, j)];
                            dx[(i, j)] =
                                inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::CausalSoftmax(a) => {
                let s = &self.nodes[id].value;
                let mut dx = Matrix::zeros(s.rows(), s.cols());
                for i in 0..s.rows() {
                    let mut dot = 0.0;
                    for j in 0..=i {
                        dot += g[(i, j)] * s[(i, j)];
                    }
                    for j in 0..=i {
                        dx[(i, j)] = s[(i, j)] * (g[(i, j)] - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::SliceCols { x, lo } => {
                let (rows, cols) = self.nodes[*x].value.shape();
                let mut dx = Matrix::zeros(rows, cols);
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        dx[(i, lo + j)] = g[(i, j)];
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = self.nodes[p].value.cols();
                    if self.nodes[p].requires_grad {
                        let slice =
                            Matrix::from_fn(g.rows(), width, |i, j| g[(i, offset + j)]);
                        acc(p, slice);
                    }
                    offset += width;
                }
            }
            Op::Rows { table, ids } => {
                let (rows, cols) = self.nodes[*table].value.shape();
                let mut dt = Matrix::zeros(rows, cols);
                for (pos, &r) in ids.iter().enumerate() {
                    for j in 0..cols {
                        dt[(r, j)] += g[(pos, j)];
                    }
                }
                acc(*table, dt);
            }
            Op::CrossEntropy { logits, targets, probs, supervised } => {
                let scale = g[(0, 0)] / *supervised as f64;
                let mut dl = Matrix::zeros(probs.rows(), probs.cols());
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for j in 0..probs.cols() {
                            dl[(i, j)] = scale * probs[(i, j)];
                        }
                        dl[(i, *t as usize)] -= scale;
                    }
                }
                acc(*logits, dl);
            }
            Op::Sum(a) => {
                let (rows, cols) = self.nodes[*a].value.shape();
                acc(*a, Matrix::from_fn(rows, cols, |_, _| g[(0, 0)]));
            }
        }
    }
}

/// Numerically stable row-wise log-softmax; also used outside the graph for
/// distribution-level analysis.
pub fn log_softmax_rows(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let row = m.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for j in 0..m.cols() {
            out[(i, j)] = m[(i, j)] - lse;
        }
    }
    out
}

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_matrix(g: &Graph, t: Tensor) -> Matrix {
        g.grad(t).expect("gradient must exist").clone()
    }

    /// Finite-difference check of d loss / d x[(i, j)] where `build` maps a
    /// perturbed copy of x to a scalar loss value.
    fn fd(build: &dyn Fn(&Matrix) -> f64, x: &Matrix, i: usize, j: usize, h: f64) -> f64 {
        let mut plus = x.clone();
        plus[(i, j)] += h;
        let mut minus = x.clone();
        minus[(i, j)] -= h;
        (build(&plus) - build(&minus)) / (2.0 * h)
    }

    fn assert_grad_close(ad: f64, fd: f64, what: &str) {
        let denom = ad.abs().max(fd.abs()).max(1e-12);
        let rel = (ad - fd).abs() / denom;
        assert!(rel <= 1e-6, "{what}: autodiff {ad} vs finite difference {fd} (rel {rel})");
    }

    fn test_matrix(rows: usize, cols: usize, salt: u64) -> Matrix {
        // Small deterministic values in roughly [-1, 1].
        Matrix::from_fn(rows, cols, |i, j| {
            let k = (i * cols + j) as u64 * 2_654_435_761 ^ salt.wrapping_mul(0x9e37_79b9);
            ((k % 2000) as f64 / 1000.0) - 1.0 + 1e-3
        })
    }

    #[test]
    fn pure_linear_gradient_is_exact() {
        // loss = sum(x . W^T): d loss / d W[(o, i)] = sum over rows of x[., i].
        let x = test_matrix(3, 4, 1);
        let w = test_matrix(2, 4, 2);
        let mut g = Graph::new();
        let xl = g.leaf(x.clone(), false);
        let wl = g.leaf(w.clone(), true);
        let wt = g.transpose(wl);
        let y = g.matmul(xl, wt);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        let dw = grad_matrix(&g, wl);
        for o in 0..2 {
            for i in 0..4 {
                let expected: f64 = (0..3).map(|r| x[(r, i)]).sum();
                let diff = (dw[(o, i)] - expected).abs();
                assert!(diff <= 1e-12, "exact linear gradient off by {diff}");
            }
        }
    }

    #[test]
    fn frozen_leaf_never_accumulates_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(test_matrix(2, 2, 3), false);
        let b = g.leaf(test_matrix(2, 2, 4), true);
        let y = g.mul(a, b);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert!(g.grad(a).is_none(), "requires_grad=false leaf got a gradient");
        assert!(g.grad(b).is_some());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(test_matrix(2, 2, 5), true);
        let err = g.backward(a).unwrap_err();
        assert!(matches!(err, NnError::NonScalarBackward { rows: 2, cols: 2 }));
    }

    #[test]
    fn gradient_accumulates_when_leaf_is_used_twice() {
        // loss = sum(a + a) => d loss / d a = 2.
        let mut g = Graph::new();
        let a = g.leaf(test_matrix(2, 3, 6), true);
        let y = g.add(a, a);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        let da = grad_matrix(&g, a);
        for v in da.data() {
            assert!((v - 2.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gelu_backward_matches_finite_differences() {
        let x = test_matrix(3, 3, 7);
        let build = |m: &Matrix| {
            let mut g = Graph::new();
            let l = g.leaf(m.clone(), false);
            let y = g.gelu(l);
            let s = g.sum(y);
            g.value(s)[(0, 0)]
        };
        let mut g = Graph::new();
        let l = g.leaf(x.clone(), true);
        let y = g.gelu(l);
        let s = g.sum(y);
        g.backward(s).unwrap();
        let dx = grad_matrix(&g, l);
        for i in 0..3 {
            for j in 0..3 {
                assert_grad_close(dx[(i, j)], fd(&build, &x, i, j, 1e-6), "gelu");
            }
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = test_matrix(3, 5, 8);
        let gain = test_matrix(1, 5, 9);
        // Weight the output so gradients are not uniform across entries.
        let weight = test_matrix(3, 5, 10);
        let run = |xm: &Matrix, gm: &Matrix| {
            let mut g = Graph::new();
            let xl = g.leaf(xm.clone(), false);
            let gl = g.leaf(gm.clone(), false);
            let wl = g.leaf(weight.clone(), false);
            let y = g.layer_norm(xl, gl);
            let wy = g.mul(y, wl);
            let s = g.sum(wy);
            g.value(s)[(0, 0)]
        };
        let mut g = Graph::new();
        let xl = g.leaf(x.clone(), true);
        let gl = g.leaf(gain.clone(), true);
        let wl = g.leaf(weight.clone(), false);
        let y = g.layer_norm(xl, gl);
        let wy = g.mul(y, wl);
        let s = g.sum(wy);
        g.backward(s).unwrap();
        let dx = grad_matrix(&g, xl);
        let dg = grad_matrix(&g, gl);
        for i in 0..3 {
            for j in 0..5 {
                let build = |m: &Matrix| run(m, &gain);
                assert_grad_close(dx[(i, j)], fd(&build, &x, i, j, 1e-6), "layer norm x");
            }
        }
        for j in 0..5 {
            let build = |m: &Matrix| run(&x, m);
            assert_grad_close(dg[(0, j)], fd(&build, &gain, 0, j, 1e-6), "layer norm gain");
        }
    }

    #[test]
    fn causal_softmax_masks_and_matches_finite_differences() {
        let x = test_matrix(4, 4, 11);
        let weight = test_matrix(4, 4, 12);
        let run = |xm: &Matrix| {
            let mut g = Graph::new();
            let xl = g.leaf(xm.clone(), false);
            let wl = g.leaf(weight.clone(), false);
            let y = g.causal_softmax(xl);
            let wy = g.mul(y, wl);
            let s = g.sum(wy);
            g.value(s)[(0, 0)]
        };
        let mut g = Graph::new();
        let xl = g.leaf(x.clone(), true);
        let wl = g.leaf(weight.clone(), false);
        let y = g.causal_softmax(xl);
        // Masked probabilities are exactly zero and rows sum to one.
        for i in 0..4 {
            let mut row_sum = 0.0;
            for j in 0..4 {
                if j > i {
                    assert_eq!(g.value(y)[(i, j)], 0.0, "future position must be masked");
                } else {
                    row_sum += g.value(y)[(i, j)];
                }
            }
            assert!((row_sum - 1.0).abs() <= 1e-12);
        }
        let wy = g.mul(y, wl);
        let s = g.sum(wy);
        g.backward(s).unwrap();
        let dx = grad_matrix(&g, xl);
        for i in 0..4 {
            for j in 0..4 {
                assert_grad_close(dx[(i, j)], fd(&run, &x, i, j, 1e-6), "causal softmax");
            }
        }
    }

    #[test]
    fn slice_concat_round_trip_and_gradients() {
        let x = test_matrix(3, 6, 13);
        let mut g = Graph::new();
        let xl = g.leaf(x.clone(), true);
        let left = g.slice_cols(xl, 0, 2);
        let right = g.slice_cols(xl, 2, 6);
        let back = g.concat_cols(&[left, right]);
        assert_eq!(g.value(back).data(), x.data(), "slice + concat must reproduce the input");
        let doubled = g.add(back, back);
        let s = g.sum(doubled);
        g.backward(s).unwrap();
        let dx = grad_matrix(&g, xl);
        for v in dx.data() {
            assert!((v - 2.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn rows_gathers_and_scatters_gradients() {
        let table = test_matrix(5, 3, 14);
        let mut g = Graph::new();
        let tl = g.leaf(table.clone(), true);
        let picked = g.rows(tl, &[4, 1, 4]);
        assert_eq!(picked.rows, 3);
        assert_eq!(g.value(picked).row(0), table.row(4));
        let s = g.sum(picked);
        g.backward(s).unwrap();
        let dt = grad_matrix(&g, tl);
        // Row 4 was used twice, row 1 once, the rest never.
        for j in 0..3 {
            assert_eq!(dt[(4, j)], 2.0);
            assert_eq!(dt[(1, j)], 1.0);
            assert_eq!(dt[(0, j)], 0.0);
        }
    }

    #[test]
    fn cross_entropy_matches_direct_formula_and_finite_differences() {
        let logits = test_matrix(4, 5, 15);
        let targets = vec![None, Some(2u32), Some(0u32), None];
        // Direct formula oracle: mean over supervised rows of -log softmax.
        let mut expected = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let row = logits.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                expected += lse - row[*t as usize];
            }
        }
        expected /= 2.0;

        let run = |lm: &Matrix| {
            let mut g = Graph::new();
            let ll = g.leaf(lm.clone(), false);
            let loss = g.cross_entropy(ll, &targets).unwrap();
            g.value(loss)[(0, 0)]
        };
        let mut g = Graph::new();
        let ll = g.leaf(logits.clone(), true);
        let loss = g.cross_entropy(ll, &targets).unwrap();
        assert!((g.value(loss)[(0, 0)] - expected).abs() <= 1e-12, "loss must match direct formula");
        g.backward(loss).unwrap();
        let dl = grad_matrix(&g, ll);
        for i in 0..4 {
            for j in 0..5 {
                assert_grad_close(dl[(i, j)], fd(&run, &logits, i, j, 1e-6), "cross entropy");
            }
        }
        // Unsupervised rows receive exactly zero gradient.
        for j in 0..5 {
            assert_eq!(dl[(0, j)], 0.0);
            assert_eq!(dl[(3, j)], 0.0);
        }
    }

    #[test]
    fn cross_entropy_error_cases() {
        let logits = test_matrix(2, 3, 16);
        let mut g = Graph::new();
        let ll = g.leaf(logits, true);
        assert!(matches!(
            g.cross_entropy(ll, &[None, None]),
            Err(NnError::NoSupervisedPositions)
        ));
        assert!(matches!(
            g.cross_entropy(ll, &[Some(3), None]),
            Err(NnError::TargetOutOfRange { target: 3, vocab: 3 })
        ));
        assert!(matches!(
            g.cross_entropy(ll, &[Some(0)]),
            Err(NnError::TargetsLengthMismatch { targets: 1, positions: 2 })
        ));
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let a = test_matrix(3, 4, 17);
        let b = test_matrix(4, 2, 18);
        let run = |am: &Matrix, bm: &Matrix| {
            let mut g = Graph::new();
            let al = g.leaf(am.clone(), false);
            let bl = g.leaf(bm.clone(), false);
            let y = g.matmul(al, bl);
            let gy = g.gelu(y);
            let s = g.sum(gy);
            g.value(s)[(0, 0)]
        };
        let mut g = Graph::new();
        let al = g.leaf(a.clone(), true);
        let bl = g.leaf(b.clone(), true);
        let y = g.matmul(al, bl);
        let gy = g.gelu(y);
        let s = g.sum(gy);
        g.backward(s).unwrap();
        let da = grad_matrix(&g, al);
        let db = grad_matrix(&g, bl);
        for i in 0..3 {
            for j in 0..4 {
                let build = |m: &Matrix| run(m, &b);
                assert_grad_close(da[(i, j)], fd(&build, &a, i, j, 1e-6), "matmul lhs");
            }
        }
        for i in 0..4 {
            for j in 0..2 {
                let build = |m: &Matrix| run(&a, m);
                assert_grad_close(db[(i, j)], fd(&build, &b, i, j, 1e-6), "matmul rhs");
            }
        }
    }
}
