//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves either carry a
//! gradient requirement (trainable parameters) or not (inputs, frozen
//! parameters); interior nodes need a gradient iff any parent does, so
//! backward work through frozen, input-only prefixes is skipped.

use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    LinComb(Vec<(Var, f64)>),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    ScaleBy(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
    RowNormalize { x: Var, norms: Vec<f64>, eps: f64 },
    MeanRows(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Element(Var, usize, usize),
    Im2col3x3 { x: Var, side: usize },
    /// Scalar output whose local gradient with respect to each input was
    /// computed during the forward pass.
    Scalar(Vec<(Var, Matrix)>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// `Σ cᵢ · xᵢ` over same-shaped inputs.
    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "empty linear combination");
        let (r, c) = self.value(terms[0].0).shape();
        let mut v = Matrix::zeros(r, c);
        for &(x, coef) in terms {
            v.axpy(coef, self.value(x));
        }
        let ng = terms.iter().any(|&(x, _)| self.ng(x));
        self.push(v, Op::LinComb(terms.to_vec()), ng)
    }

    /// Adds the `(1, C)` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let bv = self.value(b);
        assert_eq!(bv.rows(), 1, "add_row expects a single row");
        assert_eq!(bv.cols(), self.value(x).cols(), "add_row width mismatch");
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            for (o, bb) in v.row_mut(r).iter_mut().zip(self.nodes[b.0].value.data()) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(v, Op::AddRow(x, b), ng)
    }

    /// Multiplies every row of `x` element-wise by the `(1, C)` row `g`.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let gv = self.value(g);
        assert_eq!(gv.rows(), 1, "mul_row expects a single row");
        assert_eq!(gv.cols(), self.value(x).cols(), "mul_row width mismatch");
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            for (o, gg) in v.row_mut(r).iter_mut().zip(self.nodes[g.0].value.data()) {
                *o *= gg;
            }
        }
        let ng = self.ng(x) || self.ng(g);
        self.push(v, Op::MulRow(x, g), ng)
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        let v = self.value(x).scale(alpha);
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, alpha), ng)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        let ng = self.ng(x);
        self.push(v, Op::Shift(x), ng)
    }

    /// Multiplies `x` by the `(1, 1)` value `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).shape(), (1, 1), "scale_by expects a scalar");
        let sv = self.value(s).get(0, 0);
        let v = self.value(x).scale(sv);
        let ng = self.ng(x) || self.ng(s);
        self.push(v, Op::ScaleBy(x, s), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        let ng = self.ng(x);
        self.push(v, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        let ng = self.ng(x);
        self.push(v, Op::SoftmaxRows(x), ng)
    }

    /// Per-row layer normalization with affine `(1, C)` parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let mut xhat = Matrix::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, a) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (a - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut v = xhat.clone();
        for r in 0..n {
            for ((o, gg), bb) in v.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gg + bb;
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(v, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    /// Batch normalization in training mode: statistics over rows, per column.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for r in 0..n {
            for (m, a) in mean.iter_mut().zip(xv.row(r)) {
                *m += a;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for r in 0..n {
            for ((s, a), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *s += (a - m) * (a - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let xhat = Matrix::from_fn(n, c, |r, k| (xv.get(r, k) - mean[k]) * inv_std[k]);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let v = Matrix::from_fn(n, c, |r, k| xhat.get(r, k) * g[k] + b[k]);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(v, Op::BatchNorm { x, gamma, beta, xhat, inv_std, mean, var }, ng)
    }

    /// Per-column mean and biased variance recorded by a `batch_norm` node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// Divides every row by `max(‖row‖₂, eps)`.
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let mut v = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = xv.row(r).iter().map(|a| a * a).sum::<f64>().sqrt();
            let d = n.max(eps);
            v.row_mut(r).iter_mut().for_each(|a| *a /= d);
            norms.push(n);
        }
        let ng = self.ng(x);
        self.push(v, Op::RowNormalize { x, norms, eps }, ng)
    }

    /// Column means as a `(1, C)` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let n = self.value(x).rows() as f64;
        let v = self.value(x).col_sums().scale(1.0 / n);
        let ng = self.ng(x);
        self.push(v, Op::MeanRows(x), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_rows(start, len);
        let ng = self.ng(x);
        self.push(v, Op::SliceRows(x, start), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_cols(start, len);
        let ng = self.ng(x);
        self.push(v, Op::SliceCols(x, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&vals);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&vals);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// The single element `x[r, c]` as a `(1, 1)` value.
    pub fn element(&mut self, x: Var, r: usize, c: usize) -> Var {
        let v = Matrix::scalar(self.value(x).get(r, c));
        let ng = self.ng(x);
        self.push(v, Op::Element(x, r, c), ng)
    }

    /// Unfolds a `(side², C)` grid into `(side², 9C)` 3×3 neighbourhoods with
    /// zero padding, ordered row-major over the kernel window.
    pub fn im2col3x3(&mut self, x: Var, side: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), side * side, "im2col expects side² rows");
        let c = xv.cols();
        let mut v = Matrix::zeros(side * side, 9 * c);
        for_each_window(side, |out_row, k, src| {
            if let Some(src) = src {
                v.row_mut(out_row)[k * c..(k + 1) * c].copy_from_slice(xv.row(src));
            }
        });
        let ng = self.ng(x);
        self.push(v, Op::Im2col3x3 { x, side }, ng)
    }

    /// A scalar node with value `value` and precomputed local gradients
    /// `∂value/∂input` for each input.
    pub fn scalar_fn(&mut self, value: f64, local: Vec<(Var, Matrix)>) -> Var {
        for (v, g) in &local {
            assert_eq!(self.value(*v).shape(), g.shape(), "local gradient shape mismatch");
        }
        let ng = local.iter().any(|(v, _)| self.ng(*v));
        self.push(Matrix::scalar(value), Op::Scalar(local), ng)
    }

    /// Mean of all elements as a scalar node.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.len() as f64;
        let value = xv.mean();
        let g = Matrix::filled(xv.rows(), xv.cols(), 1.0 / n);
        self.scalar_fn(value, vec![(x, g)])
    }

    /// Runs reverse accumulation from the scalar `root`.
    pub fn backward(&mut self, root: Var) {
        self.backward_with(root, 1.0);
    }

    pub fn backward_with(&mut self, root: Var, seed: f64) {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be a scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Matrix::scalar(seed));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else { continue };
            self.propagate(i, &dy);
            self.grads[i] = Some(dy);
        }
    }

    fn accum(&mut self, v: Var, g: Matrix) {
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, dy: &Matrix) {
        let parents = self.parent_grads(i, dy);
        for (v, g) in parents {
            self.accum(v, g);
        }
    }

    /// Gradients for the parents of node `i` that need one.
    fn parent_grads(&self, i: usize, dy: &Matrix) -> Vec<(Var, Matrix)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out: Vec<(Var, Matrix)> = Vec::new();
        let mut push = |v: Var, f: &dyn Fn() -> Matrix| {
            if self.nodes[v.0].needs_grad {
                out.push((v, f()));
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                push(a, &|| dy.matmul_nt(val(b)));
                push(b, &|| val(a).matmul_tn(dy));
            }
            &Op::MatMulNT(a, b) => {
                // y = a bᵀ
                push(a, &|| dy.matmul(val(b)));
                push(b, &|| dy.matmul_tn(val(a)));
            }
            &Op::Add(a, b) => {
                push(a, &|| dy.clone());
                push(b, &|| dy.clone());
            }
            Op::LinComb(terms) => {
                for &(x, c) in terms {
                    push(x, &|| dy.scale(c));
                }
            }
            &Op::AddRow(x, b) => {
                push(x, &|| dy.clone());
                push(b, &|| dy.col_sums());
            }
            &Op::MulRow(x, g) => {
                push(x, &|| {
                    let gv = val(g);
                    let mut dx = dy.clone();
                    for r in 0..dx.rows() {
                        for (o, gg) in dx.row_mut(r).iter_mut().zip(gv.data()) {
                            *o *= gg;
                        }
                    }
                    dx
                });
                push(g, &|| dy.zip_map(val(x), |a, b| a * b).col_sums());
            }
            &Op::Scale(x, alpha) => push(x, &|| dy.scale(alpha)),
            &Op::Shift(x) => push(x, &|| dy.clone()),
            &Op::ScaleBy(x, s) => {
                push(x, &|| dy.scale(val(s).get(0, 0)));
                push(s, &|| Matrix::scalar(dy.data().iter().zip(val(x).data()).map(|(a, b)| a * b).sum()));
            }
            &Op::Relu(x) => push(x, &|| dy.zip_map(val(x), |d, a| if a > 0.0 { d } else { 0.0 })),
            &Op::Gelu(x) => push(x, &|| dy.zip_map(val(x), |d, a| d * gelu_grad(a))),
            &Op::Sigmoid(x) => push(x, &|| dy.zip_map(&node.value, |d, y| d * y * (1.0 - y))),
            &Op::SoftmaxRows(x) => push(x, &|| {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dr = dy.row(r);
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((o, a), b) in dx.row_mut(r).iter_mut().zip(yr).zip(dr) {
                        *o = a * (b - dot);
                    }
                }
                dx
            }),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gv = val(*gamma).data();
                let (n, c) = xhat.shape();
                push(*x, &|| {
                    let mut dx = Matrix::zeros(n, c);
                    let mut dxh = vec![0.0; c];
                    for r in 0..n {
                        let xr = xhat.row(r);
                        let dr = dy.row(r);
                        for k in 0..c {
                            dxh[k] = dr[k] * gv[k];
                        }
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let is = inv_std[r];
                        for ((o, d), xh) in dx.row_mut(r).iter_mut().zip(&dxh).zip(xr) {
                            *o = is * (d - m1 - xh * m2);
                        }
                    }
                    dx
                });
                push(*gamma, &|| dy.zip_map(xhat, |a, b| a * b).col_sums());
                push(*beta, &|| dy.col_sums());
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, .. } => {
                let gv = val(*gamma).data();
                let (n, c) = xhat.shape();
                push(*x, &|| {
                    let mut m1 = vec![0.0; c];
                    let mut m2 = vec![0.0; c];
                    for r in 0..n {
                        for k in 0..c {
                            let d = dy.get(r, k) * gv[k];
                            m1[k] += d;
                            m2[k] += d * xhat.get(r, k);
                        }
                    }
                    Matrix::from_fn(n, c, |r, k| {
                        inv_std[k] * (dy.get(r, k) * gv[k] - m1[k] / n as f64 - xhat.get(r, k) * m2[k] / n as f64)
                    })
                });
                push(*gamma, &|| dy.zip_map(xhat, |a, b| a * b).col_sums());
                push(*beta, &|| dy.col_sums());
            }
            Op::RowNormalize { x, norms, eps } => push(*x, &|| {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let n = norms[r];
                    let yr = y.row(r);
                    let dr = dy.row(r);
                    if n > *eps {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for ((o, a), b) in dx.row_mut(r).iter_mut().zip(yr).zip(dr) {
                            *o = (b - a * dot) / n;
                        }
                    } else {
                        for (o, b) in dx.row_mut(r).iter_mut().zip(dr) {
                            *o = b / eps;
                        }
                    }
                }
                dx
            }),
            &Op::MeanRows(x) => push(x, &|| {
                let (n, c) = val(x).shape();
                Matrix::from_fn(n, c, |_, k| dy.data()[k] / n as f64)
            }),
            &Op::SliceRows(x, start) => push(x, &|| {
                let (n, c) = val(x).shape();
                let mut g = Matrix::zeros(n, c);
                g.data_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                g
            }),
            &Op::SliceCols(x, start) => push(x, &|| {
                let (n, c) = val(x).shape();
                let mut g = Matrix::zeros(n, c);
                for r in 0..n {
                    g.row_mut(r)[start..start + dy.cols()].copy_from_slice(dy.row(r));
                }
                g
            }),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = val(p).rows();
                    push(p, &|| dy.slice_rows(start, len));
                    start += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = val(p).cols();
                    push(p, &|| dy.slice_cols(start, len));
                    start += len;
                }
            }
            &Op::Element(x, r, c) => push(x, &|| {
                let (n, m) = val(x).shape();
                let mut g = Matrix::zeros(n, m);
                g.set(r, c, dy.get(0, 0));
                g
            }),
            &Op::Im2col3x3 { x, side } => push(x, &|| {
                let (n, c) = val(x).shape();
                let mut g = Matrix::zeros(n, c);
                for_each_window(side, |out_row, k, src| {
                    if let Some(src) = src {
                        let d = &dy.row(out_row)[k * c..(k + 1) * c];
                        for (o, v) in g.row_mut(src).iter_mut().zip(d) {
                            *o += v;
                        }
                    }
                });
                g
            }),
            Op::Scalar(local) => {
                let d = dy.get(0, 0);
                for (v, g) in local {
                    push(*v, &|| g.scale(d));
                }
            }
        }
        out
    }
}

/// Calls `f(out_row, kernel_index, source_row)` for every 3×3 window cell;
/// `source_row` is `None` where the window leaves the grid.
fn for_each_window(side: usize, mut f: impl FnMut(usize, usize, Option<usize>)) {
    for i in 0..side {
        for j in 0..side {
            let out_row = i * side + j;
            for di in 0..3 {
                for dj in 0..3 {
                    let k = di * 3 + dj;
                    let si = i as isize + di as isize - 1;
                    let sj = j as isize + dj as isize - 1;
                    let src = if si >= 0 && sj >= 0 && (si as usize) < side && (sj as usize) < side {
                        Some(si as usize * side + sj as usize)
                    } else {
                        None
                    };
                    f(out_row, k, src);
                }
            }
        }
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

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
