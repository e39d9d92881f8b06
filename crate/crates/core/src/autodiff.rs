//! Minimal reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation as a node; [`Tape::backward`] walks the
//! nodes in reverse and accumulates adjoints. Binary element-wise operations
//! broadcast dimensions of size one, and their adjoints are summed back to the
//! operand shape.
//!
//! The tape uses interior mutability so nested expressions such as
//! `t.add(t.matmul(x, w), b)` compile without juggling temporaries.

use std::cell::{Ref, RefCell};
use std::f64::consts::PI;
use std::rc::Rc;

use crate::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Abs(Var),
    Square(Var),
    Sigmoid(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    Clamp(Var, f64, f64),
    Transpose(Var),
    SumOverRows(Var),
    SumOverCols(Var),
    MaxOverRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    UnfoldSame(Var, usize, Padding),
    DepthwiseConvSame(Var, Var),
    SincBandpass { low: Var, high: Var, window: Rc<[f64]> },
    PairSum(Var, Var),
    MaskedSoftmaxRows(Var),
    SegmentLogSumExp(Var, Rc<[usize]>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Boundary handling for [`Tape::unfold_same`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Out-of-range frames read as zero.
    Zero,
    /// Out-of-range frames mirror the sequence including the edge frame
    /// (`x[-1] = x[0]`, `x[T] = x[T-1]`).
    Symmetric,
}

impl Padding {
    fn source(self, src: isize, len: usize) -> Option<usize> {
        let n = len as isize;
        if (0..n).contains(&src) {
            return Some(src as usize);
        }
        match self {
            Padding::Zero => None,
            Padding::Symmetric => {
                let mirrored = if src < 0 { -src - 1 } else { 2 * n - src - 1 };
                Some(mirrored.clamp(0, n - 1) as usize)
            }
        }
    }
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`; zeros when `v` did not influence the output.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        assert!(
            x == y || x == 1 || y == 1,
            "incompatible broadcast shapes {a:?} and {b:?}"
        );
        x.max(y)
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

#[inline]
fn bidx(m: &Matrix, i: usize, j: usize) -> f64 {
    let r = if m.rows() == 1 { 0 } else { i };
    let c = if m.cols() == 1 { 0 } else { j };
    m[(r, c)]
}

fn broadcast_zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let (r, c) = broadcast_shape(a.shape(), b.shape());
    Matrix::from_fn(r, c, |i, j| f(bidx(a, i, j), bidx(b, i, j)))
}

/// Sums `g` over the dimensions along which an operand of `shape` was broadcast.
fn reduce_to(g: Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        return g;
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let r = if shape.0 == 1 { 0 } else { i };
            let c = if shape.1 == 1 { 0 } else { j };
            out[(r, c)] += g[(i, j)];
        }
    }
    out
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sin(2π f n) / (π n)`, i.e. the ideal low-pass impulse response `2f·sinc(2fn)`.
pub(crate) fn lowpass_tap(f: f64, n: f64) -> f64 {
    if n == 0.0 {
        2.0 * f
    } else {
        (2.0 * PI * f * n).sin() / (PI * n)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Registers an input. Inputs and parameters are both leaves.
    pub fn leaf(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            broadcast_zip(&nodes[a.0].value, &nodes[b.0].value, f)
        };
        self.push(value, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)
        };
        self.push(value, Op::MatMul(a, b))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Adds a constant to every entry.
    pub fn offset(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    /// `1 - a`, element-wise.
    pub fn one_minus(&self, a: Var) -> Var {
        self.offset(self.neg(a), 1.0)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, stable_sigmoid, Op::Sigmoid(a))
    }

    /// ELU with unit scale: `x` for positive inputs, `e^x - 1` otherwise.
    pub fn elu(&self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Column sums: `n × m → 1 × m`.
    pub fn sum_over_rows(&self, a: Var) -> Var {
        let value = {
            let m = self.value(a);
            let mut out = Matrix::zeros(1, m.cols());
            for r in m.iter_rows() {
                for (o, v) in out.as_mut_slice().iter_mut().zip(r) {
                    *o += v;
                }
            }
            out
        };
        self.push(value, Op::SumOverRows(a))
    }

    /// Row sums: `n × m → n × 1`.
    pub fn sum_over_cols(&self, a: Var) -> Var {
        let value = {
            let m = self.value(a);
            Matrix::from_vec(m.rows(), 1, m.iter_rows().map(|r| r.iter().sum()).collect())
        };
        self.push(value, Op::SumOverCols(a))
    }

    /// Column means: `n × m → 1 × m`.
    pub fn mean_over_rows(&self, a: Var) -> Var {
        let n = self.shape(a).0;
        self.scale(self.sum_over_rows(a), 1.0 / n as f64)
    }

    /// Row means: `n × m → n × 1`.
    pub fn mean_over_cols(&self, a: Var) -> Var {
        let m = self.shape(a).1;
        self.scale(self.sum_over_cols(a), 1.0 / m as f64)
    }

    /// Sum of every entry as a `1 × 1` node.
    pub fn sum_all(&self, a: Var) -> Var {
        self.sum_over_cols(self.sum_over_rows(a))
    }

    /// Column maxima: `n × m → 1 × m`. Ties resolve to the first row.
    pub fn max_over_rows(&self, a: Var) -> Var {
        let (value, argmax) = {
            let m = self.value(a);
            let mut best = vec![0usize; m.cols()];
            for j in 0..m.cols() {
                for i in 1..m.rows() {
                    if m[(i, j)] > m[(best[j], j)] {
                        best[j] = i;
                    }
                }
            }
            let v = Matrix::from_fn(1, m.cols(), |_, j| m[(best[j], j)]);
            (v, best)
        };
        self.push(value, Op::MaxOverRows(a, argmax))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        let value = {
            let m = self.value(a);
            assert!(start <= end && end <= m.rows(), "slice_rows out of range");
            Matrix::from_vec(
                end - start,
                m.cols(),
                m.as_slice()[start * m.cols()..end * m.cols()].to_vec(),
            )
        };
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn row(&self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, i + 1)
    }

    /// Stacks the selected rows (repetition allowed) into a new matrix.
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Var {
        let value = {
            let m = self.value(a);
            let mut data = Vec::with_capacity(indices.len() * m.cols());
            for &i in indices {
                data.extend_from_slice(m.row(i));
            }
            Matrix::from_vec(indices.len(), m.cols(), data)
        };
        self.push(value, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let m = &nodes[p.0].value;
                assert_eq!(m.cols(), cols, "concat_rows column mismatch");
                rows += m.rows();
                data.extend_from_slice(m.as_slice());
            }
            Matrix::from_vec(rows, cols, data)
        };
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let cols: usize = parts.iter().map(|p| nodes[p.0].value.cols()).sum();
            let mut out = Matrix::zeros(rows, cols);
            let mut offset = 0;
            for p in parts {
                let m = &nodes[p.0].value;
                assert_eq!(m.rows(), rows, "concat_cols row mismatch");
                for i in 0..rows {
                    out.row_mut(i)[offset..offset + m.cols()].copy_from_slice(m.row(i));
                }
                offset += m.cols();
            }
            out
        };
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// "Same" im2col along the time (row) axis.
    ///
    /// `T × C → T × (K·C)`; column `k·C + c` of row `t` holds `x[t + k - K/2, c]`.
    pub fn unfold_same(&self, a: Var, kernel: usize, padding: Padding) -> Var {
        assert!(kernel % 2 == 1, "kernel length must be odd");
        let value = {
            let x = self.value(a);
            let (t_len, c) = x.shape();
            let half = (kernel / 2) as isize;
            let mut out = Matrix::zeros(t_len, kernel * c);
            for t in 0..t_len {
                for k in 0..kernel {
                    let Some(src) = padding.source(t as isize + k as isize - half, t_len) else {
                        continue;
                    };
                    out.row_mut(t)[k * c..(k + 1) * c].copy_from_slice(x.row(src));
                }
            }
            out
        };
        self.push(value, Op::UnfoldSame(a, kernel, padding))
    }

    /// Per-channel "same" convolution along time.
    ///
    /// `x: T × F`, `kernels: F × K`; `y[t, f] = Σ_k kernels[f, k] · x[t + k - K/2, f]`.
    pub fn depthwise_conv_same(&self, x: Var, kernels: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (xm, h) = (&nodes[x.0].value, &nodes[kernels.0].value);
            let (t_len, f_len) = xm.shape();
            assert_eq!(h.rows(), f_len, "depthwise kernel count mismatch");
            let half = (h.cols() / 2) as isize;
            Matrix::from_fn(t_len, f_len, |t, f| {
                let mut acc = 0.0;
                for k in 0..h.cols() {
                    let src = t as isize + k as isize - half;
                    if src >= 0 && src < t_len as isize {
                        acc += h[(f, k)] * xm[(src as usize, f)];
                    }
                }
                acc
            })
        };
        self.push(value, Op::DepthwiseConvSame(x, kernels))
    }

    /// Windowed band-pass kernels from cutoff columns `low, high: F × 1`.
    ///
    /// Row `f` is `(2·high·sinc(2·high·n) - 2·low·sinc(2·low·n)) · window[n]` for
    /// `n = -K/2..=K/2`.
    pub fn sinc_bandpass(&self, low: Var, high: Var, window: &[f64]) -> Var {
        let k_len = window.len();
        let half = (k_len / 2) as f64;
        let value = {
            let nodes = self.nodes.borrow();
            let (lo, hi) = (&nodes[low.0].value, &nodes[high.0].value);
            assert_eq!(lo.shape(), hi.shape(), "cutoff shape mismatch");
            Matrix::from_fn(lo.rows(), k_len, |f, k| {
                let n = k as f64 - half;
                (lowpass_tap(hi[(f, 0)], n) - lowpass_tap(lo[(f, 0)], n)) * window[k]
            })
        };
        self.push(
            value,
            Op::SincBandpass {
                low,
                high,
                window: window.into(),
            },
        )
    }

    /// Outer sum of two column vectors: `out[i, j] = a[i] + b[j]`.
    pub fn pair_sum(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (am, bm) = (&nodes[a.0].value, &nodes[b.0].value);
            assert!(am.cols() == 1 && bm.cols() == 1, "pair_sum expects columns");
            Matrix::from_fn(am.rows(), bm.rows(), |i, j| am[(i, 0)] + bm[(j, 0)])
        };
        self.push(value, Op::PairSum(a, b))
    }

    /// Row-wise softmax restricted to entries where `mask` (row-major) is true.
    /// Masked-out entries are exactly zero. Every row needs a true entry.
    pub fn masked_softmax_rows(&self, a: Var, mask: Rc<[bool]>) -> Var {
        let value = {
            let m = self.value(a);
            assert_eq!(mask.len(), m.len(), "mask size mismatch");
            let mut out = Matrix::zeros(m.rows(), m.cols());
            for i in 0..m.rows() {
                let row_mask = &mask[i * m.cols()..(i + 1) * m.cols()];
                let max = m
                    .row(i)
                    .iter()
                    .zip(row_mask)
                    .filter(|(_, &keep)| keep)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(max > f64::NEG_INFINITY, "row {i} has an empty neighborhood");
                let mut total = 0.0;
                for j in 0..m.cols() {
                    if row_mask[j] {
                        let e = (m[(i, j)] - max).exp();
                        out[(i, j)] = e;
                        total += e;
                    }
                }
                for v in out.row_mut(i) {
                    *v /= total;
                }
            }
            out
        };
        self.push(value, Op::MaskedSoftmaxRows(a))
    }

    /// Log-sum-exp over contiguous segments of a column vector.
    ///
    /// Segment `s` spans rows `offsets[s]..offsets[s + 1]` and must be non-empty.
    pub fn segment_logsumexp(&self, a: Var, offsets: &[usize]) -> Var {
        let value = {
            let m = self.value(a);
            assert_eq!(m.cols(), 1, "segment_logsumexp expects a column");
            let vals = m.as_slice();
            let out: Vec<f64> = offsets
                .windows(2)
                .map(|w| {
                    let seg = &vals[w[0]..w[1]];
                    assert!(!seg.is_empty(), "empty segment");
                    let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    max + seg.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
                })
                .collect();
            Matrix::col_vector(&out)
        };
        self.push(value, Op::SegmentLogSumExp(a, offsets.into()))
    }

    // Composite helpers.

    /// Row-wise layer normalization without affine terms.
    pub fn layer_norm_rows(&self, x: Var, eps: f64) -> Var {
        let mean = self.mean_over_cols(x);
        let centered = self.sub(x, mean);
        let var = self.mean_over_cols(self.square(centered));
        let std = self.sqrt(self.offset(var, eps));
        self.div(centered, std)
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Var {
        self.add(self.matmul(x, w), b)
    }

    /// Dot product of matching rows: `n × d, n × d → n × 1`.
    pub fn row_dot(&self, a: Var, b: Var) -> Var {
        self.sum_over_cols(self.mul(a, b))
    }

    /// `sqrt(|row|² + eps²)` per row.
    pub fn row_norm(&self, a: Var, eps: f64) -> Var {
        self.sqrt(self.offset(self.row_dot(a, a), eps * eps))
    }

    /// Cosine similarity of matching rows with smoothed norms.
    pub fn row_cosine(&self, a: Var, b: Var, eps: f64) -> Var {
        let dot = self.row_dot(a, b);
        let norms = self.mul(self.row_norm(a, eps), self.row_norm(b, eps));
        self.div(dot, norms)
    }

    /// Consecutive row differences `x[j + 1] - x[j]`: `T × d → (T-1) × d`.
    pub fn row_diff(&self, x: Var) -> Var {
        let t = self.shape(x).0;
        self.sub(self.slice_rows(x, 1, t), self.slice_rows(x, 0, t - 1))
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.0].value.shape(),
            (1, 1),
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[output.0] = Some(Matrix::scalar(1.0));

        let accumulate = |grads: &mut Vec<Option<Matrix>>, v: Var, g: Matrix| match &mut grads[v.0]
        {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => grads[i] = Some(g),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(g.clone(), val(*a).shape()));
                    accumulate(&mut grads, *b, reduce_to(g.clone(), val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(g.clone(), val(*a).shape()));
                    accumulate(&mut grads, *b, reduce_to(g.map(|x| -x), val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (am, bm) = (val(*a), val(*b));
                    let ga = broadcast_zip(&g, bm, |gv, bv| gv * bv);
                    let gb = broadcast_zip(&g, am, |gv, av| gv * av);
                    accumulate(&mut grads, *a, reduce_to(ga, am.shape()));
                    accumulate(&mut grads, *b, reduce_to(gb, bm.shape()));
                }
                Op::Div(a, b) => {
                    let (am, bm) = (val(*a), val(*b));
                    let ga = broadcast_zip(&g, bm, |gv, bv| gv / bv);
                    let (r, c) = g.shape();
                    let gb = Matrix::from_fn(r, c, |ii, jj| {
                        let bv = bidx(bm, ii, jj);
                        -g[(ii, jj)] * bidx(am, ii, jj) / (bv * bv)
                    });
                    accumulate(&mut grads, *a, reduce_to(ga, am.shape()));
                    accumulate(&mut grads, *b, reduce_to(gb, bm.shape()));
                }
                Op::MatMul(a, b) => {
                    let (am, bm) = (val(*a), val(*b));
                    accumulate(&mut grads, *a, g.matmul(&bm.transpose()));
                    accumulate(&mut grads, *b, am.transpose().matmul(&g));
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.map(|x| x * f)),
                Op::Offset(a) => accumulate(&mut grads, *a, g),
                Op::Exp(a) => accumulate(&mut grads, *a, g.zip_map(&node.value, |gv, y| gv * y)),
                Op::Ln(a) => accumulate(&mut grads, *a, g.zip_map(val(*a), |gv, x| gv / x)),
                Op::Sqrt(a) => {
                    accumulate(&mut grads, *a, g.zip_map(&node.value, |gv, y| 0.5 * gv / y))
                }
                Op::Abs(a) => accumulate(
                    &mut grads,
                    *a,
                    g.zip_map(val(*a), |gv, x| {
                        if x > 0.0 {
                            gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    }),
                ),
                Op::Square(a) => {
                    accumulate(&mut grads, *a, g.zip_map(val(*a), |gv, x| 2.0 * gv * x))
                }
                Op::Sigmoid(a) => accumulate(
                    &mut grads,
                    *a,
                    g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y)),
                ),
                Op::Elu(a) => accumulate(
                    &mut grads,
                    *a,
                    g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { gv * x.exp() }),
                ),
                Op::LeakyRelu(a, slope) => accumulate(
                    &mut grads,
                    *a,
                    g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { gv * slope }),
                ),
                Op::Clamp(a, lo, hi) => accumulate(
                    &mut grads,
                    *a,
                    g.zip_map(val(*a), |gv, x| if x > *lo && x < *hi { gv } else { 0.0 }),
                ),
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::SumOverRows(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads, *a, Matrix::from_fn(r, c, |_, j| g[(0, j)]));
                }
                Op::SumOverCols(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads, *a, Matrix::from_fn(r, c, |ii, _| g[(ii, 0)]));
                }
                Op::MaxOverRows(a, argmax) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for (j, &row) in argmax.iter().enumerate() {
                        ga[(row, j)] += g[(0, j)];
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    ga.as_mut_slice()[start * c..start * c + g.len()].copy_from_slice(g.as_slice());
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, indices) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for (k, &src) in indices.iter().enumerate() {
                        for (dst, v) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                            *dst += v;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let (r, c) = val(*p).shape();
                        let slice = g.as_slice()[start * c..(start + r) * c].to_vec();
                        accumulate(&mut grads, *p, Matrix::from_vec(r, c, slice));
                        start += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = val(*p).shape();
                        let gp = Matrix::from_fn(r, c, |ii, jj| g[(ii, offset + jj)]);
                        accumulate(&mut grads, *p, gp);
                        offset += c;
                    }
                }
                Op::UnfoldSame(a, kernel, padding) => {
                    let (t_len, c) = val(*a).shape();
                    let half = (kernel / 2) as isize;
                    let mut ga = Matrix::zeros(t_len, c);
                    for t in 0..t_len {
                        for k in 0..*kernel {
                            let Some(src) = padding.source(t as isize + k as isize - half, t_len)
                            else {
                                continue;
                            };
                            let g_row = &g.row(t)[k * c..(k + 1) * c];
                            for (dst, v) in ga.row_mut(src).iter_mut().zip(g_row) {
                                *dst += v;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::DepthwiseConvSame(x, kernels) => {
                    let (xm, h) = (val(*x), val(*kernels));
                    let (t_len, f_len) = xm.shape();
                    let half = (h.cols() / 2) as isize;
                    let mut gx = Matrix::zeros(t_len, f_len);
                    let mut gh = Matrix::zeros(h.rows(), h.cols());
                    for t in 0..t_len {
                        for f in 0..f_len {
                            let gv = g[(t, f)];
                            for k in 0..h.cols() {
                                let src = t as isize + k as isize - half;
                                if src >= 0 && src < t_len as isize {
                                    let s = src as usize;
                                    gx[(s, f)] += gv * h[(f, k)];
                                    gh[(f, k)] += gv * xm[(s, f)];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *kernels, gh);
                }
                Op::SincBandpass { low, high, window } => {
                    let (lo, hi) = (val(*low), val(*high));
                    let half = (window.len() / 2) as f64;
                    let mut g_lo = Matrix::zeros(lo.rows(), 1);
                    let mut g_hi = Matrix::zeros(hi.rows(), 1);
                    for f in 0..lo.rows() {
                        for (k, w) in window.iter().enumerate() {
                            let n = k as f64 - half;
                            // d/df [sin(2π f n)/(π n)] = 2 cos(2π f n), also at n = 0.
                            let gv = g[(f, k)] * w;
                            g_hi[(f, 0)] += gv * 2.0 * (2.0 * PI * hi[(f, 0)] * n).cos();
                            g_lo[(f, 0)] -= gv * 2.0 * (2.0 * PI * lo[(f, 0)] * n).cos();
                        }
                    }
                    accumulate(&mut grads, *low, g_lo);
                    accumulate(&mut grads, *high, g_hi);
                }
                Op::PairSum(a, b) => {
                    let (r, c) = g.shape();
                    let ga = Matrix::from_vec(r, 1, g.iter_rows().map(|row| row.iter().sum()).collect());
                    let gb = Matrix::from_fn(c, 1, |j, _| (0..r).map(|ii| g[(ii, j)]).sum());
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MaskedSoftmaxRows(a) => {
                    let y = &node.value;
                    let (r, c) = y.shape();
                    let mut ga = Matrix::zeros(r, c);
                    for ii in 0..r {
                        let dot: f64 = y.row(ii).iter().zip(g.row(ii)).map(|(a, b)| a * b).sum();
                        for jj in 0..c {
                            ga[(ii, jj)] = y[(ii, jj)] * (g[(ii, jj)] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SegmentLogSumExp(a, offsets) => {
                    let x = val(*a);
                    let mut ga = Matrix::zeros(x.rows(), 1);
                    for (s, w) in offsets.windows(2).enumerate() {
                        let lse = node.value[(s, 0)];
                        for l in w[0]..w[1] {
                            ga[(l, 0)] = g[(s, 0)] * (x[(l, 0)] - lse).exp();
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }

        // Interior adjoints were consumed by the sweep; only leaves keep theirs.
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Gradients { grads, shapes }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Compares the tape gradient of `f` with central differences for each input.
    fn check(inputs: &[Matrix], f: impl Fn(&Tape, &[Var]) -> Var) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(out);
        let eval = |xs: &[Matrix]| {
            let t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|m| t.leaf(m.clone())).collect();
            let o = f(&t, &vs);
            t.scalar_value(o)
        };
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]);
            for idx in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[k].as_mut_slice()[idx] += h;
                let mut minus = inputs.to_vec();
                minus[k].as_mut_slice()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.as_slice()[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(err < 1e-6, "input {k} entry {idx}: analytic {a}, numeric {numeric}");
            }
        }
    }

    /// Reduces any node to a scalar with non-uniform weights so every entry matters.
    fn weighted_sum(t: &Tape, v: Var) -> Var {
        let (r, c) = t.shape(v);
        let w = t.leaf(Matrix::from_fn(r, c, |i, j| 0.3 + 0.7 * ((i * 7 + j * 3) % 5) as f64));
        t.sum_all(t.mul(v, w))
    }

    #[test]
    fn broadcasting_binary_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(3, 4, &mut rng);
        let row = random(1, 4, &mut rng);
        let col = random(3, 1, &mut rng).map(|x| x + 2.0);
        let s = random(1, 1, &mut rng);
        check(&[a.clone(), row.clone()], |t, v| weighted_sum(t, t.add(v[0], v[1])));
        check(&[a.clone(), col.clone()], |t, v| weighted_sum(t, t.sub(v[0], v[1])));
        check(&[a.clone(), s.clone()], |t, v| weighted_sum(t, t.mul(v[0], v[1])));
        check(&[a.clone(), col.clone()], |t, v| weighted_sum(t, t.div(v[0], v[1])));
        check(&[row, a], |t, v| weighted_sum(t, t.mul(v[0], v[1])));
    }

    #[test]
    fn matmul_and_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(3, 4, &mut rng);
        let b = random(4, 2, &mut rng);
        check(&[a.clone(), b.clone()], |t, v| weighted_sum(t, t.matmul(v[0], v[1])));
        check(&[a.clone()], |t, v| weighted_sum(t, t.transpose(v[0])));
        check(&[a.clone()], |t, v| weighted_sum(t, t.sum_over_rows(v[0])));
        check(&[a.clone()], |t, v| weighted_sum(t, t.sum_over_cols(v[0])));
        check(&[a.clone()], |t, v| weighted_sum(t, t.max_over_rows(v[0])));
        check(&[a.clone()], |t, v| weighted_sum(t, t.slice_rows(v[0], 1, 3)));
        check(&[a.clone()], |t, v| weighted_sum(t, t.gather_rows(v[0], &[2, 0, 2])));
        check(&[a.clone(), b.transpose()], |t, v| {
            weighted_sum(t, t.concat_rows(&[v[0], v[1]]))
        });
        check(&[a.clone(), random(3, 2, &mut rng)], |t, v| {
            weighted_sum(t, t.concat_cols(&[v[0], v[1]]))
        });
        check(&[a], |t, v| weighted_sum(t, t.row_diff(v[0])));
    }

    #[test]
    fn unary_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(3, 3, &mut rng);
        let pos = a.map(|x| x.abs() + 0.5);
        check(&[a.clone()], |t, v| weighted_sum(t, t.exp(v[0])));
        check(&[pos.clone()], |t, v| weighted_sum(t, t.ln(v[0])));
        check(&[pos], |t, v| weighted_sum(t, t.sqrt(v[0])));
        check(&[a.clone()], |t, v| weighted_sum(t, t.abs(v[0])));
        check(&[a.clone()], |t, v| weighted_sum(t, t.square(v[0])));
        check(&[a.clone()], |t, v| weighted_sum(t, t.sigmoid(v[0])));
        check(&[a.clone()], |t, v| weighted_sum(t, t.elu(v[0])));
        check(&[a.clone()], |t, v| weighted_sum(t, t.leaky_relu(v[0], 0.2)));
        check(&[a.clone()], |t, v| weighted_sum(t, t.clamp(v[0], -0.5, 0.5)));
        check(&[a.clone()], |t, v| weighted_sum(t, t.scale(t.offset(v[0], 2.0), -3.0)));
        check(&[a], |t, v| weighted_sum(t, t.layer_norm_rows(v[0], 1e-5)));
    }

    #[test]
    fn convolution_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(6, 2, &mut rng);
        check(&[x.clone()], |t, v| weighted_sum(t, t.unfold_same(v[0], 3, Padding::Zero)));
        check(&[x.clone()], |t, v| weighted_sum(t, t.unfold_same(v[0], 5, Padding::Symmetric)));
        let k = random(2, 5, &mut rng);
        check(&[x, k], |t, v| weighted_sum(t, t.depthwise_conv_same(v[0], v[1])));
        let low = Matrix::col_vector(&[0.05, 0.2]);
        let high = Matrix::col_vector(&[0.15, 0.45]);
        let window: Vec<f64> = (0..7).map(|i| 0.5 + 0.1 * i as f64).collect();
        check(&[low, high], |t, v| weighted_sum(t, t.sinc_bandpass(v[0], v[1], &window)));
    }

    #[test]
    fn attention_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(4, 1, &mut rng);
        let b = random(3, 1, &mut rng);
        check(&[a, b], |t, v| weighted_sum(t, t.pair_sum(v[0], v[1])));
        let logits = random(3, 4, &mut rng);
        let mask: Rc<[bool]> = (0..12).map(|i| i % 3 != 1).collect::<Vec<_>>().into();
        check(&[logits], |t, v| {
            weighted_sum(t, t.masked_softmax_rows(v[0], mask.clone()))
        });
        let x = random(7, 1, &mut rng);
        check(&[x], |t, v| weighted_sum(t, t.segment_logsumexp(v[0], &[0, 3, 4, 7])));
    }

    #[test]
    fn cosine_helpers() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random(3, 4, &mut rng);
        let b = random(3, 4, &mut rng);
        check(&[a, b], |t, v| weighted_sum(t, t.row_cosine(v[0], v[1], 1e-8)));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[[1.0, 2.0, 3.0]]));
        let y = t.masked_softmax_rows(x, vec![true, false, true].into());
        let v = t.value(y);
        assert_eq!(v[(0, 1)], 0.0);
        assert!((v.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn symmetric_padding_mirrors_edges() {
        let t = Tape::new();
        let x = t.leaf(Matrix::col_vector(&[1.0, 2.0, 3.0]));
        let u = t.unfold_same(x, 5, Padding::Symmetric);
        assert_eq!(t.value(u).row(0), &[2.0, 1.0, 1.0, 2.0, 3.0]);
        assert_eq!(t.value(u).row(2), &[1.0, 2.0, 3.0, 3.0, 2.0]);
        let z = t.unfold_same(x, 3, Padding::Zero);
        assert_eq!(t.value(z).row(0), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let t = Tape::new();
        let x = t.leaf(Matrix::scalar(2.0));
        let unused = t.leaf(Matrix::zeros(2, 3));
        let y = t.square(x);
        let g = t.backward(y);
        assert_eq!(g.get(x).item(), 4.0);
        assert_eq!(g.get(unused), Matrix::zeros(2, 3));
    }
}
