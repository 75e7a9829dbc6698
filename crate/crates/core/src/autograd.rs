//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse and returns the gradient of a scalar root with respect
//! to every node that transitively depends on a trainable leaf.

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    AddScalarVar(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Elu(Var),
    Gelu(Var),
    Sigmoid(Var),
    SumAll(Var),
    SumCols(Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    SegmentMean(Var, Vec<usize>, Vec<T>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    LayerNorm(Var, Vec<T>),
    BlockQk {
        q: Var,
        k: Var,
        block: usize,
        heads: usize,
        scale: T,
    },
    SoftmaxGroups(Var, usize),
    BlockAv {
        p: Var,
        v: Var,
        block: usize,
        heads: usize,
    },
    RowDot(Var, Var),
    RowCosDist(Var, Var, T),
    BceLogits(Var, Vec<T>, Vec<T>),
    WeightedSum(Var, Vec<T>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[inline]
fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let k = T::c(0.044715);
    let half = T::c(0.5);
    let one = T::one();
    let x3 = x * x * x;
    let u = c * (x + k * x3);
    let t = u.tanh();
    let value = half * x * (one + t);
    let du = c * (one + T::c(3.0) * k * x * x);
    let deriv = half * (one + t) + half * x * (one - t * t) * du;
    (value, deriv)
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Broadcast-add a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(rv.shape(), (1, av.cols()), "add_row expects a 1 x cols row");
        let mut out = av.clone();
        let r = rv.data().to_vec();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// Broadcast-multiply every row of `a` by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(rv.shape(), (1, av.cols()), "mul_row expects a 1 x cols row");
        let mut out = av.clone();
        let r = rv.data().to_vec();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::MulRow(a, row), rg)
    }

    /// Scale row `i` of `a` by `col[i]` (`col` is `rows x 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let av = self.value(a);
        let cv = self.value(col);
        assert_eq!(cv.shape(), (av.rows(), 1), "mul_col expects a rows x 1 column");
        let mut out = av.clone();
        for i in 0..out.rows() {
            let s = cv.data()[i];
            for o in out.row_mut(i) {
                *o *= s;
            }
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(out, Op::MulCol(a, col), rg)
    }

    /// Add a `1 x 1` variable to every entry.
    pub fn add_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x + sv);
        let rg = self.rg(a) || self.rg(s);
        self.push(out, Op::AddScalarVar(a, s), rg)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn add_const(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(out, Op::AddConst(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(a);
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            if x > T::zero() {
                x
            } else {
                x.exp() - T::one()
            }
        });
        let rg = self.rg(a);
        self.push(out, Op::Elu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu_parts(x).0);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Row sums as a `rows x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|i| av.row(i).iter().copied().sum()).collect();
        let out = Matrix::column(data);
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            data.extend_from_slice(av.row(i));
        }
        let out = Matrix::from_vec(idx.len(), cols, data);
        let rg = self.rg(a);
        self.push(out, Op::GatherRows(a, idx), rg)
    }

    /// `out[idx[e]] += a[e]` into an `n_out x cols` matrix.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Vec<usize>, n_out: usize) -> Var {
        let av = self.value(a);
        assert_eq!(idx.len(), av.rows(), "scatter index length mismatch");
        let mut out = Matrix::zeros(n_out, av.cols());
        for (e, &t) in idx.iter().enumerate() {
            for (o, &x) in out.row_mut(t).iter_mut().zip(av.row(e)) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::ScatterAddRows(a, idx), rg)
    }

    /// Softmax of a column vector within groups given by `group[i]`.
    pub fn segment_softmax(&mut self, a: Var, group: Vec<usize>, n_groups: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols(), 1, "segment_softmax expects a column");
        assert_eq!(group.len(), av.rows(), "segment_softmax group length mismatch");
        let x = av.data();
        let mut max = vec![T::neg_infinity(); n_groups];
        for (i, &g) in group.iter().enumerate() {
            max[g] = max[g].max(x[i]);
        }
        let mut e: Vec<T> = group.iter().enumerate().map(|(i, &g)| (x[i] - max[g]).exp()).collect();
        let mut denom = vec![T::zero(); n_groups];
        for (i, &g) in group.iter().enumerate() {
            denom[g] += e[i];
        }
        for (i, &g) in group.iter().enumerate() {
            e[i] /= denom[g];
        }
        let out = Matrix::column(e);
        let rg = self.rg(a);
        self.push(out, Op::SegmentSoftmax(a, group), rg)
    }

    /// Mean of the rows sharing a segment id; empty segments yield zero rows.
    pub fn segment_mean(&mut self, a: Var, seg: Vec<usize>, n_seg: usize) -> Var {
        let av = self.value(a);
        assert_eq!(seg.len(), av.rows(), "segment_mean index length mismatch");
        let mut counts = vec![T::zero(); n_seg];
        for &s in &seg {
            counts[s] += T::one();
        }
        let mut out = Matrix::zeros(n_seg, av.cols());
        for (r, &s) in seg.iter().enumerate() {
            let inv = T::one() / counts[s];
            for (o, &x) in out.row_mut(s).iter_mut().zip(av.row(r)) {
                *o += x * inv;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SegmentMean(a, seg, counts), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
            }
            off += pv.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let out = Matrix::from_vec(rows, cols, data);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Per-row standardisation (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let av = self.value(a);
        let n = T::c(av.cols() as f64);
        let mut out = av.clone();
        let mut inv_std = Vec::with_capacity(av.rows());
        for i in 0..av.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm(a, inv_std), rg)
    }

    /// Per-block multi-head attention scores.
    ///
    /// Rows of `q`/`k` come in consecutive blocks of `block` tokens. The output
    /// has one row per query token and `heads * block` columns; column
    /// `h * block + j` holds `scale * <q_i, k_j>` restricted to head `h`'s
    /// feature slice.
    pub fn block_qk(&mut self, q: Var, k: Var, block: usize, heads: usize, scale: T) -> Var {
        let qv = self.value(q);
        let kv = self.value(k);
        assert_eq!(qv.shape(), kv.shape(), "block_qk shape mismatch");
        let (rows, cols) = qv.shape();
        assert!(rows % block == 0 && cols % heads == 0, "block_qk layout mismatch");
        let dh = cols / heads;
        let mut out = Matrix::zeros(rows, heads * block);
        for b0 in (0..rows).step_by(block) {
            for i in 0..block {
                let qi = qv.row(b0 + i);
                let orow = out.row_mut(b0 + i);
                for h in 0..heads {
                    let qs = &qi[h * dh..(h + 1) * dh];
                    for j in 0..block {
                        let ks = &kv.row(b0 + j)[h * dh..(h + 1) * dh];
                        let dot: T = qs.iter().zip(ks).map(|(&x, &y)| x * y).sum();
                        orow[h * block + j] = dot * scale;
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k);
        self.push(
            out,
            Op::BlockQk {
                q,
                k,
                block,
                heads,
                scale,
            },
            rg,
        )
    }

    /// Softmax over each consecutive group of `group` columns in every row.
    pub fn softmax_groups(&mut self, a: Var, group: usize) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.cols() % group, 0, "softmax_groups layout mismatch");
        for i in 0..out.rows() {
            for chunk in out.row_mut(i).chunks_mut(group) {
                let m = chunk.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for x in chunk.iter_mut() {
                    *x = (*x - m).exp();
                    s += *x;
                }
                for x in chunk.iter_mut() {
                    *x /= s;
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxGroups(a, group), rg)
    }

    /// Attention-weighted sum of values, inverse layout of [`Tape::block_qk`].
    pub fn block_av(&mut self, p: Var, v: Var, block: usize, heads: usize) -> Var {
        let pv = self.value(p);
        let vv = self.value(v);
        let (rows, cols) = vv.shape();
        assert_eq!(pv.shape(), (rows, heads * block), "block_av layout mismatch");
        let dh = cols / heads;
        let mut out = Matrix::zeros(rows, cols);
        for b0 in (0..rows).step_by(block) {
            for i in 0..block {
                let prow = pv.row(b0 + i).to_vec();
                let orow = out.row_mut(b0 + i);
                for h in 0..heads {
                    for j in 0..block {
                        let w = prow[h * block + j];
                        let vs = &vv.row(b0 + j)[h * dh..(h + 1) * dh];
                        for (o, &x) in orow[h * dh..(h + 1) * dh].iter_mut().zip(vs) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(p) || self.rg(v);
        self.push(
            out,
            Op::BlockAv {
                p,
                v,
                block,
                heads,
            },
            rg,
        )
    }

    /// Row-wise inner products as a column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "row_dot shape mismatch");
        let data = (0..av.rows())
            .map(|i| av.row(i).iter().zip(bv.row(i)).map(|(&x, &y)| x * y).sum())
            .collect();
        let out = Matrix::column(data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::RowDot(a, b), rg)
    }

    /// Row-wise cosine distance `1 - <a,b> / ((|a|+eps)(|b|+eps))`.
    pub fn row_cos_dist(&mut self, a: Var, b: Var, eps: T) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "row_cos_dist shape mismatch");
        let data = (0..av.rows())
            .map(|i| {
                let (ra, rb) = (av.row(i), bv.row(i));
                let s: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
                let na = ra.iter().map(|&x| x * x).sum::<T>().sqrt() + eps;
                let nb = rb.iter().map(|&x| x * x).sum::<T>().sqrt() + eps;
                T::one() - s / (na * nb)
            })
            .collect();
        let out = Matrix::column(data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::RowCosDist(a, b, eps), rg)
    }

    /// `sum_i w_i * BCE(sigmoid(z_i), y_i)` for a column of logits `z`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<T>, weights: Vec<T>) -> Var {
        let zv = self.value(logits);
        assert_eq!(zv.shape(), (targets.len(), 1), "bce logits must be a column");
        assert_eq!(targets.len(), weights.len(), "bce weight length mismatch");
        let mut total = T::zero();
        for ((&z, &y), &w) in zv.data().iter().zip(&targets).zip(&weights) {
            let l = z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln();
            total += w * l;
        }
        let rg = self.rg(logits);
        self.push(Matrix::scalar(total), Op::BceLogits(logits, targets, weights), rg)
    }

    /// `sum_i w_i * a_i` for a column `a`.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<T>) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), (weights.len(), 1), "weighted_sum expects a column");
        let total = av.data().iter().zip(&weights).map(|(&x, &w)| x * w).sum();
        let rg = self.rg(a);
        self.push(Matrix::scalar(total), Op::WeightedSum(a, weights), rg)
    }

    /// Gradients of the scalar `root` with respect to every node on the tape.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(T::one()));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, delta: Matrix<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_scaled(&delta, T::one()),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let da = g.matmul_t(false, self.value(*b), true);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let db = self.value(*a).matmul_t(true, g, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, &x) in dr.data_mut().iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if self.rg(*a) {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        for (d, &r) in da.row_mut(i).iter_mut().zip(rv.data()) {
                            *d *= r;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*row) {
                    let av = self.value(*a);
                    let mut dr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for ((d, &x), &y) in dr.data_mut().iter_mut().zip(g.row(i)).zip(av.row(i)) {
                            *d += x * y;
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::MulCol(a, col) => {
                let cv = self.value(*col);
                if self.rg(*a) {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        let s = cv.data()[i];
                        for d in da.row_mut(i) {
                            *d *= s;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*col) {
                    let av = self.value(*a);
                    let data = (0..g.rows())
                        .map(|i| g.row(i).iter().zip(av.row(i)).map(|(&x, &y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, *col, Matrix::column(data));
                }
            }
            Op::AddScalarVar(a, s) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *s, Matrix::scalar(g.sum()));
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.accumulate(grads, *a, g.map(|x| x * k));
            }
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let da = g.zip_map(self.value(*a), |d, x| if x > T::zero() { d } else { T::zero() });
                self.accumulate(grads, *a, da);
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let da = g.zip_map(self.value(*a), |d, x| if x > T::zero() { d } else { d * slope });
                self.accumulate(grads, *a, da);
            }
            Op::Elu(a) => {
                let da = g.zip_map(out, |d, y| if y > T::zero() { d } else { d * (y + T::one()) });
                self.accumulate(grads, *a, da);
            }
            Op::Gelu(a) => {
                let da = g.zip_map(self.value(*a), |d, x| d * gelu_parts(x).1);
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let da = g.zip_map(out, |d, y| d * y * (T::one() - y));
                self.accumulate(grads, *a, da);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Matrix::filled(r, c, g.item()));
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let mut da = Matrix::zeros(r, c);
                for i in 0..r {
                    let s = g.data()[i];
                    for d in da.row_mut(i) {
                        *d = s;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut da = Matrix::zeros(r, c);
                for (e, &src) in idx.iter().enumerate() {
                    for (d, &x) in da.row_mut(src).iter_mut().zip(g.row(e)) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::ScatterAddRows(a, idx) => {
                let c = g.cols();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &t in idx {
                    data.extend_from_slice(g.row(t));
                }
                self.accumulate(grads, *a, Matrix::from_vec(idx.len(), c, data));
            }
            Op::SegmentSoftmax(a, group) => {
                let y = out.data();
                let n_groups = group.iter().copied().max().map_or(0, |m| m + 1);
                let mut dots = vec![T::zero(); n_groups];
                for (i, &gid) in group.iter().enumerate() {
                    dots[gid] += y[i] * g.data()[i];
                }
                let data = group
                    .iter()
                    .enumerate()
                    .map(|(i, &gid)| y[i] * (g.data()[i] - dots[gid]))
                    .collect();
                self.accumulate(grads, *a, Matrix::column(data));
            }
            Op::SegmentMean(a, seg, counts) => {
                let c = g.cols();
                let mut data = Vec::with_capacity(seg.len() * c);
                for &s in seg {
                    let inv = T::one() / counts[s];
                    data.extend(g.row(s).iter().map(|&x| x * inv));
                }
                self.accumulate(grads, *a, Matrix::from_vec(seg.len(), c, data));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.rg(p) {
                        let mut dp = Matrix::zeros(r, c);
                        for i in 0..r {
                            dp.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.rg(p) {
                        let dp = Matrix::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                        self.accumulate(grads, p, dp);
                    }
                    off += r;
                }
            }
            Op::LayerNorm(a, inv_std) => {
                let (r, c) = out.shape();
                let n = T::c(c as f64);
                let mut da = Matrix::zeros(r, c);
                for i in 0..r {
                    let y = out.row(i);
                    let dy = g.row(i);
                    let mean_dy = dy.iter().copied().sum::<T>() / n;
                    let mean_dyy = dy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for ((d, &dyj), &yj) in da.row_mut(i).iter_mut().zip(dy).zip(y) {
                        *d = inv_std[i] * (dyj - mean_dy - yj * mean_dyy);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::BlockQk {
                q,
                k,
                block,
                heads,
                scale,
            } => {
                let (block, heads, scale) = (*block, *heads, *scale);
                let qv = self.value(*q);
                let kv = self.value(*k);
                let (rows, cols) = qv.shape();
                let dh = cols / heads;
                let mut dq = Matrix::zeros(rows, cols);
                let mut dk = Matrix::zeros(rows, cols);
                for b0 in (0..rows).step_by(block) {
                    for i in 0..block {
                        let grow = g.row(b0 + i);
                        for h in 0..heads {
                            for j in 0..block {
                                let s = grow[h * block + j] * scale;
                                if s == T::zero() {
                                    continue;
                                }
                                for c in h * dh..(h + 1) * dh {
                                    let qic = qv.get(b0 + i, c);
                                    let kjc = kv.get(b0 + j, c);
                                    dq.row_mut(b0 + i)[c] += s * kjc;
                                    dk.row_mut(b0 + j)[c] += s * qic;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
            }
            Op::SoftmaxGroups(a, group) => {
                let mut da = g.clone();
                for i in 0..out.rows() {
                    for (dchunk, ychunk) in da.row_mut(i).chunks_mut(*group).zip(out.row(i).chunks(*group)) {
                        let dot: T = dchunk.iter().zip(ychunk).map(|(&d, &y)| d * y).sum();
                        for (d, &y) in dchunk.iter_mut().zip(ychunk) {
                            *d = y * (*d - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::BlockAv {
                p,
                v,
                block,
                heads,
            } => {
                let (block, heads) = (*block, *heads);
                let pv = self.value(*p);
                let vv = self.value(*v);
                let (rows, cols) = vv.shape();
                let dh = cols / heads;
                let mut dp = Matrix::zeros(rows, heads * block);
                let mut dv = Matrix::zeros(rows, cols);
                for b0 in (0..rows).step_by(block) {
                    for i in 0..block {
                        let grow = g.row(b0 + i);
                        for h in 0..heads {
                            let gs = &grow[h * dh..(h + 1) * dh];
                            for j in 0..block {
                                let w = pv.get(b0 + i, h * block + j);
                                let vs = &vv.row(b0 + j)[h * dh..(h + 1) * dh];
                                let dot: T = gs.iter().zip(vs).map(|(&x, &y)| x * y).sum();
                                dp.row_mut(b0 + i)[h * block + j] += dot;
                                for (d, &x) in dv.row_mut(b0 + j)[h * dh..(h + 1) * dh].iter_mut().zip(gs) {
                                    *d += w * x;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *p, dp);
                self.accumulate(grads, *v, dv);
            }
            Op::RowDot(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.rg(*a) {
                    let mut da = bv.clone();
                    for i in 0..da.rows() {
                        let s = g.data()[i];
                        for d in da.row_mut(i) {
                            *d *= s;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = av.clone();
                    for i in 0..db.rows() {
                        let s = g.data()[i];
                        for d in db.row_mut(i) {
                            *d *= s;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::RowCosDist(a, b, eps) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (r, c) = av.shape();
                let mut da = Matrix::zeros(r, c);
                let mut db = Matrix::zeros(r, c);
                for i in 0..r {
                    let (ra, rb) = (av.row(i), bv.row(i));
                    let s: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
                    let la = ra.iter().map(|&x| x * x).sum::<T>().sqrt();
                    let lb = rb.iter().map(|&x| x * x).sum::<T>().sqrt();
                    let (na, nb) = (la + *eps, lb + *eps);
                    // d(dist) = -d(cos); cos = s / (na * nb)
                    let gi = -g.data()[i];
                    let inv = T::one() / (na * nb);
                    let ka = if la > T::zero() { s * inv / (na * la) } else { T::zero() };
                    let kb = if lb > T::zero() { s * inv / (nb * lb) } else { T::zero() };
                    for j in 0..c {
                        da.row_mut(i)[j] = gi * (rb[j] * inv - ka * ra[j]);
                        db.row_mut(i)[j] = gi * (ra[j] * inv - kb * rb[j]);
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::BceLogits(z, targets, weights) => {
                let gs = g.item();
                let zv = self.value(*z);
                let data = zv
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&zz, &y), &w)| gs * w * (sigmoid(zz) - y))
                    .collect();
                self.accumulate(grads, *z, Matrix::column(data));
            }
            Op::WeightedSum(a, weights) => {
                let gs = g.item();
                let data = weights.iter().map(|&w| gs * w).collect();
                self.accumulate(grads, *a, Matrix::column(data));
            }
        }
    }
}
