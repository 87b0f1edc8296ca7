//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles; calling
//! [`Tape::backward`] on a scalar variable walks the record in reverse and
//! accumulates gradients for every node, including leaves. Scalars are
//! represented as 1x1 matrices so the whole graph lives in one value type.
//!
//! The op set is deliberately small: exactly what the model's losses need,
//! each with a hand-derived adjoint that is checked against central finite
//! differences in the unit tests below.

use std::ops::Range;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use crate::graph::PropagationGraph;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Neg(Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    Relu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    MeanAll(Var),
    RowSums(Var),
    AddRowBroadcast(Var, Var),
    ScaleRows(Var, Var),
    GatherRows(Var, Rc<Vec<usize>>),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    SliceRows(Var, Range<usize>),
    SliceCols(Var, Range<usize>),
    SpMM(Rc<PropagationGraph>, Var),
    Grl(Var, f64),
    Detach,
    /// Inputs plus the backward coefficient matrix
    /// C[i][j] = sum_b exp(-d_ij^2 / (2 sigma_b^2)) / sigma_b^2, cached at
    /// forward time so the backward pass is two matrix products.
    MeanRbf(Var, Var, Array2<f64>),
    SqrtGuard(Var),
    BceWithLogits(Var, Rc<Vec<f64>>),
    SoftmaxRows(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Operation record plus forward values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if no path reached it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of the loss w.r.t. `v`, materializing zeros if absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        match self.grads[v.0].as_ref() {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

const FIXED_POINT_SCALE: f64 = 4503599627370496.0; // 2^52

/// Sum of RBF kernel values over all row pairs of `x` and `y`, summed over
/// the bandwidth set, accumulated in 52-bit fixed point. Integer
/// accumulation makes the result exactly independent of pair order, which
/// gives the MMD estimator bitwise symmetry and permutation invariance.
/// Also fills the backward coefficient matrix
/// C[i][j] = sum_b exp(-d_ij^2 / (2 sigma_b^2)) / sigma_b^2.
fn rbf_pair_sum(x: &Array2<f64>, y: &Array2<f64>, bandwidths: &[f64]) -> (f64, Array2<f64>) {
    let inv_sq: Vec<f64> = bandwidths.iter().map(|s| 1.0 / (s * s)).collect();
    let inv_two_sq: Vec<f64> = inv_sq.iter().map(|c| c / 2.0).collect();
    let mut coeff = Array2::zeros((x.nrows(), y.nrows()));
    let mut acc: i128 = 0;
    // Row slices are contiguous for owned arrays; the dim loop stays in a
    // fixed order so each pair's d^2 is bit-identical under any row
    // permutation.
    for (i, xi) in x.rows().into_iter().enumerate() {
        let xi = xi.to_slice().expect("contiguous row");
        for (j, yj) in y.rows().into_iter().enumerate() {
            let yj = yj.to_slice().expect("contiguous row");
            let mut d2 = 0.0;
            for (a, b) in xi.iter().zip(yj.iter()) {
                let diff = a - b;
                d2 += diff * diff;
            }
            let mut k = 0.0;
            let mut c_back = 0.0;
            for (c2, c1) in inv_two_sq.iter().zip(inv_sq.iter()) {
                let e = (-d2 * c2).exp();
                k += e;
                c_back += e * c1;
            }
            coeff[[i, j]] = c_back;
            acc += (k * FIXED_POINT_SCALE).round() as i128;
        }
    }
    (acc as f64 / FIXED_POINT_SCALE, coeff)
}

fn scalar_node(v: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), v)
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Register an input node (parameter or constant).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Register a scalar input node.
    pub fn leaf_scalar(&mut self, value: f64) -> Var {
        self.leaf(scalar_node(value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// The f64 in a 1x1 node. Panics on non-scalar shapes.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "expected scalar node");
        val[[0, 0]]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| -v);
        self.push(value, Op::Neg(a))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|v| v + c);
        self.push(value, Op::AddConst(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.shape(a).1,
            self.shape(b).0,
            "matmul: inner dimension mismatch"
        );
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    /// Mean over all entries, as a 1x1 node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let value = scalar_node(self.value(a).mean().unwrap_or(0.0));
        self.push(value, Op::MeanAll(a))
    }

    /// Per-row sum over columns: (n, m) -> (n, 1).
    pub fn row_sums(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .sum_axis(Axis(1))
            .insert_axis(Axis(1))
            .to_owned();
        self.push(value, Op::RowSums(a))
    }

    /// X (n, m) + b (1, m), broadcast over rows.
    pub fn add_row_broadcast(&mut self, x: Var, b: Var) -> Var {
        assert_eq!(self.shape(b).0, 1, "add_row_broadcast: b must be (1, m)");
        assert_eq!(
            self.shape(x).1,
            self.shape(b).1,
            "add_row_broadcast: width mismatch"
        );
        let value = self.value(x) + self.value(b);
        self.push(value, Op::AddRowBroadcast(x, b))
    }

    /// X (n, m) * s (n, 1), broadcast over columns.
    pub fn scale_rows(&mut self, x: Var, sfac: Var) -> Var {
        assert_eq!(self.shape(sfac).1, 1, "scale_rows: s must be (n, 1)");
        assert_eq!(
            self.shape(x).0,
            self.shape(sfac).0,
            "scale_rows: row mismatch"
        );
        let value = self.value(x) * self.value(sfac);
        self.push(value, Op::ScaleRows(x, sfac))
    }

    /// Select rows of `x` by index; backward scatter-adds.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let src = self.value(x);
        let mut value = Array2::zeros((idx.len(), src.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).assign(&src.row(i));
        }
        self.push(value, Op::GatherRows(x, idx))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).1, "concat_rows: width");
        let value =
            ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()]).unwrap();
        self.push(value, Op::ConcatRows(a, b))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).0, self.shape(b).0, "concat_cols: height");
        let value =
            ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()]).unwrap();
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn slice_rows(&mut self, a: Var, range: Range<usize>) -> Var {
        let value = self
            .value(a)
            .slice(s![range.start..range.end, ..])
            .to_owned();
        self.push(value, Op::SliceRows(a, range))
    }

    pub fn slice_cols(&mut self, a: Var, range: Range<usize>) -> Var {
        let value = self
            .value(a)
            .slice(s![.., range.start..range.end])
            .to_owned();
        self.push(value, Op::SliceCols(a, range))
    }

    /// Multiply by the symmetric degree-normalized adjacency.
    pub fn spmm(&mut self, graph: Rc<PropagationGraph>, x: Var) -> Var {
        let value = graph.spmm(self.value(x));
        self.push(value, Op::SpMM(graph, x))
    }

    /// Gradient reversal: identity forward, gradient times `-scale` backward.
    pub fn grl(&mut self, x: Var, scale: f64) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Grl(x, scale))
    }

    /// Stop-gradient: identity forward, no gradient flows back.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach)
    }

    /// Mean over all row pairs of the multi-bandwidth RBF kernel:
    /// (1/(n*m)) sum_ij sum_b exp(-|x_i - y_j|^2 / (2 sigma_b^2)).
    pub fn mean_rbf(&mut self, x: Var, y: Var, bandwidths: Rc<Vec<f64>>) -> Var {
        assert_eq!(self.shape(x).1, self.shape(y).1, "mean_rbf: dim mismatch");
        let n = self.shape(x).0 as f64;
        let m = self.shape(y).0 as f64;
        let (total, coeff) = rbf_pair_sum(self.value(x), self.value(y), &bandwidths);
        let value = scalar_node(total / (n * m));
        self.push(value, Op::MeanRbf(x, y, coeff))
    }

    /// sqrt(max(x, 0)) on a scalar node; zero gradient at (and below) zero.
    pub fn sqrt_guard(&mut self, x: Var) -> Var {
        let value = scalar_node(self.scalar(x).max(0.0).sqrt());
        self.push(value, Op::SqrtGuard(x))
    }

    /// Mean binary cross-entropy of logits against fixed 0/1 labels, in the
    /// overflow-safe log1p formulation.
    pub fn bce_with_logits(&mut self, scores: Var, labels: Rc<Vec<f64>>) -> Var {
        let sc = self.value(scores);
        assert_eq!(sc.ncols(), 1, "bce_with_logits: scores must be (n, 1)");
        assert_eq!(sc.nrows(), labels.len(), "bce_with_logits: label count");
        assert!(!labels.is_empty(), "bce_with_logits: empty batch");
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let z = sc[[i, 0]];
            // max(z,0) - z*y + ln(1 + exp(-|z|))
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let value = scalar_node(total / labels.len() as f64);
        self.push(value, Op::BceWithLogits(scores, labels))
    }

    /// Row-wise softmax over columns.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Accumulate gradients of the scalar `loss` w.r.t. every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(scalar_node(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, id: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        fn stash(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
            match &mut grads[v.0] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        }

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                stash(grads, *a, g.clone());
                stash(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                stash(grads, *a, g.clone());
                stash(grads, *b, g.mapv(|v| -v));
            }
            Op::Neg(a) => stash(grads, *a, g.mapv(|v| -v)),
            Op::Mul(a, b) => {
                stash(grads, *a, g * self.value(*b));
                stash(grads, *b, g * self.value(*a));
            }
            Op::Scale(a, c) => stash(grads, *a, g.mapv(|v| v * c)),
            Op::AddConst(a) => stash(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                stash(grads, *a, g.dot(&self.value(*b).t()));
                stash(grads, *b, self.value(*a).t().dot(g));
            }
            Op::Relu(a) => {
                let mask = self.value(*a).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                stash(grads, *a, g * &mask);
            }
            Op::Exp(a) => stash(grads, *a, g * &self.nodes[id].value),
            Op::Clamp(a, lo, hi) => {
                let mask = self
                    .value(*a)
                    .mapv(|v| if v > *lo && v < *hi { 1.0 } else { 0.0 });
                stash(grads, *a, g * &mask);
            }
            Op::MeanAll(a) => {
                let (n, m) = self.shape(*a);
                let c = g[[0, 0]] / (n * m) as f64;
                stash(grads, *a, Array2::from_elem((n, m), c));
            }
            Op::RowSums(a) => {
                let (n, m) = self.shape(*a);
                let mut d = Array2::zeros((n, m));
                for i in 0..n {
                    let gi = g[[i, 0]];
                    d.row_mut(i).fill(gi);
                }
                stash(grads, *a, d);
            }
            Op::AddRowBroadcast(x, b) => {
                stash(grads, *x, g.clone());
                let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0)).to_owned();
                stash(grads, *b, col_sum);
            }
            Op::ScaleRows(x, sfac) => {
                stash(grads, *x, g * self.value(*sfac));
                let per_row = (g * self.value(*x))
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1))
                    .to_owned();
                stash(grads, *sfac, per_row);
            }
            Op::GatherRows(x, idx) => {
                let mut d = Array2::zeros(self.shape(*x));
                for (r, &i) in idx.iter().enumerate() {
                    let mut dst = d.row_mut(i);
                    dst += &g.row(r);
                }
                stash(grads, *x, d);
            }
            Op::ConcatRows(a, b) => {
                let na = self.shape(*a).0;
                stash(grads, *a, g.slice(s![..na, ..]).to_owned());
                stash(grads, *b, g.slice(s![na.., ..]).to_owned());
            }
            Op::ConcatCols(a, b) => {
                let ma = self.shape(*a).1;
                stash(grads, *a, g.slice(s![.., ..ma]).to_owned());
                stash(grads, *b, g.slice(s![.., ma..]).to_owned());
            }
            Op::SliceRows(a, range) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![range.start..range.end, ..]).assign(g);
                stash(grads, *a, d);
            }
            Op::SliceCols(a, range) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![.., range.start..range.end]).assign(g);
                stash(grads, *a, d);
            }
            // The normalized adjacency is symmetric, so the adjoint is the
            // same sparse multiply.
            Op::SpMM(graph, x) => stash(grads, *x, graph.spmm(g)),
            Op::Grl(x, scale) => stash(grads, *x, g.mapv(|v| -scale * v)),
            Op::Detach => {}
            Op::MeanRbf(x, y, coeff) => {
                // d mean / d x_i = -(1/(nm)) sum_j C_ij (x_i - y_j)
                //                = -(1/(nm)) [diag(rowsum C) X - C Y]_i
                // and symmetrically for y with C transposed.
                let gs = g[[0, 0]];
                let xv = self.value(*x);
                let yv = self.value(*y);
                let norm = gs / (xv.nrows() * yv.nrows()) as f64;
                let row_sums = coeff.sum_axis(Axis(1)).insert_axis(Axis(1));
                let col_sums = coeff.sum_axis(Axis(0)).insert_axis(Axis(1));
                let dx = (&coeff.dot(yv) - &(xv * &row_sums)).mapv(|v| v * norm);
                let dy = (&coeff.t().dot(xv) - &(yv * &col_sums)).mapv(|v| v * norm);
                stash(grads, *x, dx);
                stash(grads, *y, dy);
            }
            Op::SqrtGuard(x) => {
                let xv = self.scalar(*x);
                let d = if xv > 1e-12 {
                    g[[0, 0]] * 0.5 / xv.sqrt()
                } else {
                    0.0
                };
                stash(grads, *x, scalar_node(d));
            }
            Op::BceWithLogits(scores, labels) => {
                let sc = self.value(*scores);
                let n = labels.len() as f64;
                let gs = g[[0, 0]] / n;
                let mut d = Array2::zeros(sc.dim());
                for (i, &y) in labels.iter().enumerate() {
                    let z = sc[[i, 0]];
                    let sig = 1.0 / (1.0 + (-z).exp());
                    d[[i, 0]] = gs * (sig - y);
                }
                stash(grads, *scores, d);
            }
            Op::SoftmaxRows(a) => {
                let w = &self.nodes[id].value;
                let mut d = Array2::zeros(w.dim());
                for i in 0..w.nrows() {
                    let dot: f64 = (0..w.ncols()).map(|j| g[[i, j]] * w[[i, j]]).sum();
                    for j in 0..w.ncols() {
                        d[[i, j]] = w[[i, j]] * (g[[i, j]] - dot);
                    }
                }
                stash(grads, *a, d);
            }
        }
    }
}
