//! Minimal reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse. Vectors are
//! represented as `1 × n` rows. Parameters are pulled from a [`ParamStore`]
//! once per graph and their gradients are reported by [`ParamId`].

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::params::{Mat, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Products below this many multiply-adds use a direct row kernel; the
/// packed GEMM only pays off for larger operands.
const DIRECT_MATMUL_LIMIT: usize = 64 * 64 * 64;

fn mm(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Mat {
    let (m, k) = a.dim();
    let n = b.ncols();
    debug_assert_eq!(k, b.nrows());
    if m * k * n > DIRECT_MATMUL_LIMIT {
        return a.dot(&b);
    }
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let (a, b) = (a.as_slice().expect("standard layout"), b.as_slice().expect("standard layout"));
    let mut out = vec![0.0; m * n];
    for (row, a_row) in out.chunks_exact_mut(n.max(1)).zip(a.chunks_exact(k.max(1))) {
        for (&x, b_row) in a_row.iter().zip(b.chunks_exact(n.max(1))) {
            for (o, &y) in row.iter_mut().zip(b_row) {
                *o += x * y;
            }
        }
    }
    Array2::from_shape_vec((m, n), out).expect("shape matches buffer")
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// `m × n` plus a broadcast `1 × n` row.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `m × n` times a broadcast `1 × n` row.
    MulRow(NodeId, NodeId),
    /// `m × n` times a broadcast `m × 1` column.
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Gelu(NodeId),
    Relu(NodeId),
    Elu(NodeId),
    Square(NodeId),
    /// Row-wise softmax; `mask[j] == false` excludes column `j`.
    SoftmaxRows(NodeId),
    /// Column-wise softmax (normalised over rows).
    SoftmaxCols(NodeId),
    /// Row-wise normalisation without affine terms; keeps `1/σ` per row.
    LayerNorm(NodeId, Vec<f64>),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    /// Mean over the rows selected by the mask (all rows when absent).
    MeanRows(NodeId, Option<Vec<bool>>),
    GatherRows(NodeId, Vec<usize>),
    SumAll(NodeId),
    /// Softmax cross-entropy against a class index; keeps the probabilities.
    CrossEntropy(NodeId, usize, Mat),
}

#[derive(Clone, Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    /// Gradient of the root with respect to `node`, if it influenced the root.
    pub fn wrt(&self, node: NodeId) -> Option<&Mat> {
        self.nodes[node.0].as_ref()
    }

    /// Gradients for every parameter touched by the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.params
            .iter()
            .filter_map(|&(pid, nid)| self.nodes[nid.0].as_ref().map(|g| (pid, g)))
    }

    /// Adds `scale · ∂root/∂θ` into an accumulator indexed by [`ParamId`].
    pub fn accumulate_into(&self, acc: &mut [Option<Mat>], scale: f64) {
        for (pid, g) in self.params() {
            match &mut acc[pid.index()] {
                Some(a) => a.scaled_add(scale, g),
                slot @ None => *slot = Some(g * scale),
            }
        }
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_row_into(row: ndarray::ArrayView1<f64>, mask: Option<&[bool]>, out: &mut [f64]) {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| keep(j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (j, &v) in row.iter().enumerate() {
        out[j] = if keep(j) { (v - max).exp() } else { 0.0 };
        sum += out[j];
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(1024),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(self.store.get(id).clone(), Op::Param);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = mm(self.value(a).view(), self.value(b).view());
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = mm(self.value(a).view(), self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row width mismatch");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "mul_row width mismatch");
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        assert_eq!(self.shape(col).1, 1);
        assert_eq!(self.shape(a).0, self.shape(col).0, "mul_col height mismatch");
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .mapv(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.push(v, Op::Elu(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Softmax along each row. Masked columns get exactly zero weight.
    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<Vec<bool>>) -> NodeId {
        let x = self.value(a);
        if let Some(m) = &mask {
            assert_eq!(m.len(), x.ncols(), "mask width mismatch");
            assert!(m.iter().any(|&k| k), "softmax mask excludes every position");
        }
        let mut out = Array2::zeros(x.dim());
        let mut buf = vec![0.0; x.ncols()];
        for (i, row) in x.rows().into_iter().enumerate() {
            softmax_row_into(row, mask.as_deref(), &mut buf);
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&buf[..]));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Softmax along each column, i.e. normalised over positions.
    pub fn softmax_cols(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut out = Array2::zeros(x.dim());
        let mut buf = vec![0.0; x.nrows()];
        for (j, col) in x.columns().into_iter().enumerate() {
            softmax_row_into(col, None, &mut buf);
            out.column_mut(j).assign(&ndarray::ArrayView1::from(&buf[..]));
        }
        self.push(out, Op::SoftmaxCols(a))
    }

    /// Per-row standardisation `(x − μ) / √(σ² + ε)`.
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * r);
            inv_std.push(r);
        }
        self.push(out, Op::LayerNorm(a, inv_std))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows col mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    /// Mean over rows, optionally restricted to `mask[i] == true`.
    pub fn mean_rows(&mut self, a: NodeId, mask: Option<Vec<bool>>) -> NodeId {
        let x = self.value(a);
        let mut acc = Array2::zeros((1, x.ncols()));
        let mut count = 0usize;
        for (i, row) in x.rows().into_iter().enumerate() {
            if mask.as_ref().is_none_or(|m| m[i]) {
                acc.row_mut(0).scaled_add(1.0, &row);
                count += 1;
            }
        }
        assert!(count > 0, "mean over an empty row set");
        acc /= count as f64;
        self.push(acc, Op::MeanRows(a, mask))
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: Vec<usize>) -> NodeId {
        let t = self.value(table);
        let v = t.select(Axis(0), &idx);
        self.push(v, Op::GatherRows(table, idx))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// `−log softmax(logits)[label]` for a `1 × A` logit row.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> NodeId {
        let x = self.value(logits);
        assert_eq!(x.nrows(), 1);
        let mut p = vec![0.0; x.ncols()];
        softmax_row_into(x.row(0), None, &mut p);
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - x[[0, label]];
        let probs = Array2::from_shape_vec((1, p.len()), p).expect("row shape");
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy(logits, label, probs),
        )
    }

    /// Inverted dropout: zeroes entries with probability `rate` and rescales
    /// survivors by `1/(1−rate)`. Identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: NodeId, rate: f64, rng: &mut R) -> NodeId {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = self
            .value(a)
            .mapv(|_| if rng.random::<f64>() < rate { 0.0 } else { keep });
        let m = self.input(mask);
        self.mul(a, m)
    }

    /// Back-propagates from a `1 × 1` root.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
            match &mut grads[id.0] {
                Some(x) => *x += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let ga = mm(gy.view(), self.value(*b).t());
                    let gb = mm(self.value(*a).t(), gy.view());
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = mm(gy.view(), self.value(*b).view());
                    let gb = mm(gy.t(), self.value(*a).view());
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, gy.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, gy.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&gy);
                    acc(&mut grads, *a, gy.clone());
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *r, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, gy.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &gy * self.value(*b));
                    acc(&mut grads, *b, &gy * self.value(*a));
                }
                Op::MulRow(a, r) => {
                    let gr = (&gy * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *r, gr);
                    acc(&mut grads, *a, &gy * self.value(*r));
                }
                Op::MulCol(a, c) => {
                    let gc = (&gy * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *c, gc);
                    acc(&mut grads, *a, &gy * self.value(*c));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &gy * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, gy.clone()),
                Op::Gelu(a) => {
                    let g = ndarray::Zip::from(&gy)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| g * gelu_grad(x));
                    acc(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let g = ndarray::Zip::from(&gy)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                    acc(&mut grads, *a, g);
                }
                Op::Elu(a) => {
                    let g = ndarray::Zip::from(&gy)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| if x > 0.0 { g } else { g * x.exp() });
                    acc(&mut grads, *a, g);
                }
                Op::Square(a) => {
                    let g = &gy * &(self.value(*a) * 2.0);
                    acc(&mut grads, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dot = (&gy * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let g = y * &(&gy - &dot);
                    acc(&mut grads, *a, g);
                }
                Op::SoftmaxCols(a) => {
                    let y = &node.value;
                    let dot = (&gy * y).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let g = y * &(&gy - &dot);
                    acc(&mut grads, *a, g);
                }
                Op::LayerNorm(a, inv_std) => {
                    let xhat = &node.value;
                    let n = xhat.ncols() as f64;
                    let mut g = Array2::zeros(xhat.dim());
                    for (r, ((gx, dy), xh)) in g
                        .rows_mut()
                        .into_iter()
                        .zip(gy.rows())
                        .zip(xhat.rows())
                        .enumerate()
                    {
                        let sum_dy = dy.sum();
                        let sum_dy_xh = dy.dot(&xh);
                        let k = inv_std[r] / n;
                        let mut gx = gx;
                        for j in 0..gx.len() {
                            gx[j] = k * (n * dy[j] - sum_dy - xh[j] * sum_dy_xh);
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(&mut grads, p, gy.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        acc(&mut grads, p, gy.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut g = Array2::zeros(self.shape(*a));
                    let w = gy.ncols();
                    g.slice_mut(s![.., *start..*start + w]).assign(&gy);
                    acc(&mut grads, *a, g);
                }
                Op::SliceRows(a, start) => {
                    let mut g = Array2::zeros(self.shape(*a));
                    let h = gy.nrows();
                    g.slice_mut(s![*start..*start + h, ..]).assign(&gy);
                    acc(&mut grads, *a, g);
                }
                Op::MeanRows(a, mask) => {
                    let (rows, cols) = self.shape(*a);
                    let count = mask
                        .as_ref()
                        .map_or(rows, |m| m.iter().filter(|&&k| k).count());
                    let mut g = Array2::zeros((rows, cols));
                    let share = &gy.row(0) / count as f64;
                    for (i, mut row) in g.rows_mut().into_iter().enumerate() {
                        if mask.as_ref().is_none_or(|m| m[i]) {
                            row.assign(&share);
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::GatherRows(t, idx) => {
                    let mut g = Array2::zeros(self.shape(*t));
                    for (r, &i) in idx.iter().enumerate() {
                        let mut dst = g.row_mut(i);
                        dst += &gy.row(r);
                    }
                    acc(&mut grads, *t, g);
                }
                Op::SumAll(a) => {
                    let g = Array2::from_elem(self.shape(*a), gy[[0, 0]]);
                    acc(&mut grads, *a, g);
                }
                Op::CrossEntropy(a, label, probs) => {
                    let mut g = probs.clone();
                    g[[0, *label]] -= 1.0;
                    g *= gy[[0, 0]];
                    acc(&mut grads, *a, g);
                }
            }
            grads[i] = Some(gy);
        }

        let mut params: Vec<_> = self.param_nodes.iter().map(|(&p, &n)| (p, n)).collect();
        params.sort();
        Gradients {
            nodes: grads,
            params,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric<F: Fn(&Mat) -> f64>(x: &Mat, f: F) -> Mat {
        let h = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check<B: Fn(&mut Graph, NodeId) -> NodeId>(x: Mat, build: B) {
        let store = ParamStore::new();
        let eval = |x: &Mat| {
            let mut g = Graph::new(&store);
            let n = g.input(x.clone());
            let y = build(&mut g, n);
            let s = g.sum_all(y);
            g.scalar(s)
        };
        let mut g = Graph::new(&store);
        let n = g.input(x.clone());
        let y = build(&mut g, n);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        let analytic = grads.wrt(n).unwrap().clone();
        let numeric = numeric(&x, eval);
        for (a, b) in analytic.iter().zip(numeric.iter()) {
            assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    fn sample() -> Mat {
        array![[0.3, -1.2, 0.7], [1.5, 0.2, -0.4]]
    }

    #[test]
    fn elementwise_gradients() {
        let w = array![[0.5, -1.0, 2.0], [1.0, 0.25, -0.5]];
        check(sample(), |g, x| g.gelu(x));
        check(sample(), |g, x| g.elu(x));
        check(sample(), |g, x| g.relu(x));
        check(sample(), |g, x| {
            let s = g.square(x);
            g.scale(s, 0.5)
        });
        check(sample(), move |g, x| {
            let c = g.input(w.clone());
            let y = g.softmax_rows(x, None);
            g.mul(y, c)
        });
    }

    #[test]
    fn normalisation_gradients() {
        let w = array![[0.5, -1.0, 2.0], [1.0, 0.25, -0.5]];
        let w2 = w.clone();
        check(sample(), move |g, x| {
            let c = g.input(w.clone());
            let y = g.layer_norm(x);
            g.mul(y, c)
        });
        check(sample(), move |g, x| {
            let c = g.input(w2.clone());
            let y = g.softmax_cols(x);
            g.mul(y, c)
        });
    }

    #[test]
    fn structural_gradients() {
        check(sample(), |g, x| {
            let t = g.transpose(x);
            let y = g.matmul(x, t);
            g.square(y)
        });
        check(sample(), |g, x| {
            let y = g.matmul_t(x, x);
            let z = g.concat_cols(&[y, x]);
            let r = g.slice_rows(z, 1, 1);
            g.square(r)
        });
        check(sample(), |g, x| {
            let rows = g.gather_rows(x, vec![1, 1, 0]);
            let m = g.mean_rows(rows, Some(vec![true, false, true]));
            let ce = g.cross_entropy(m, 2);
            g.square(ce)
        });
    }

    #[test]
    fn masked_softmax_zeroes_excluded_columns() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(array![[5.0, 1.0, 100.0]]);
        let y = g.softmax_rows(x, Some(vec![true, true, false]));
        let v = g.value(y);
        assert_eq!(v[[0, 2]], 0.0);
        assert!((v.sum() - 1.0).abs() < 1e-12);
    }
}
