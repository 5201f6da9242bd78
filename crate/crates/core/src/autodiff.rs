//! Reverse-mode differentiation over a small set of matrix operations.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Node ids are handed out in creation order, which is a topological order,
//! so [`Graph::backward`] walks the node list once from the loss down to
//! index zero.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    RowSelect(NodeId, Vec<usize>),
    ColumnSelect(NodeId, Vec<usize>),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Tensor<T>,
        inv_std: Vec<T>,
    },
    Relu(NodeId),
    SoftmaxRows(NodeId),
    Nll {
        probs: NodeId,
        targets: Vec<(usize, usize)>,
        clamped: usize,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Single-owner computation graph.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], one slot per node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `id`; exact zeros when `id` does
    /// not influence the loss.
    pub fn get(&self, id: NodeId) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor<T> {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[id.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn touched(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Number of probabilities clamped to [`PROB_FLOOR`] by an `nll` node.
    pub fn nll_clamped(&self, id: NodeId) -> usize {
        match &self.nodes[id.0].op {
            Op::Nll { clamped, .. } => *clamped,
            _ => 0,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<NodeId, TensorError> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).matmul_t(self.value(b))?;
        self.push(v, Op::MatMulT(a, b), "matmul_t")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b), "add")
    }

    /// Adds a `1 x cols` bias row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).add_row(self.value(bias))?;
        self.push(v, Op::AddRow(a, bias), "add_row")
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId, TensorError> {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), "scale")
    }

    /// Gathers rows of `table` (embedding lookup).
    pub fn row_select(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let t = self.value(table);
        let cols = t.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= t.rows() {
                return Err(TensorError::IndexOutOfRange {
                    op: "row_select",
                    index: i,
                    bound: t.rows(),
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::from_raw(ids.len(), cols, data);
        self.push(v, Op::RowSelect(table, ids.to_vec()), "row_select")
    }

    /// Gathers columns of `table`, returned as rows: output row `i` is
    /// column `ids[i]` of the table.
    pub fn column_select(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let t = self.value(table);
        for &i in ids {
            if i >= t.cols() {
                return Err(TensorError::IndexOutOfRange {
                    op: "column_select",
                    index: i,
                    bound: t.cols(),
                });
            }
        }
        let v = Tensor::from_fn(ids.len(), t.rows(), |r, c| t.get(c, ids[r]));
        self.push(v, Op::ColumnSelect(table, ids.to_vec()), "column_select")
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (each `1 x cols`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        for p in [gamma, beta] {
            if self.shape(p) != (1, cols) {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: (rows, cols),
                    right: self.shape(p),
                });
            }
        }
        let (normalized, inv_std) = normalize_rows(xv);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = normalized.clone();
        for r in 0..rows {
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = *o * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            "layer_norm",
        )
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), "relu")
    }

    /// Sign of every relu input, `x > 0`, in construction order.
    /// Two evaluations with different patterns straddle a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.value(a).data().iter().map(|&x| x > T::zero()));
            }
        }
        out
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Mean negative log-likelihood of `targets` (row, column) in a
    /// probability matrix. Probabilities below [`PROB_FLOOR`] are clamped.
    pub fn nll(&mut self, probs: NodeId, targets: &[(usize, usize)]) -> Result<NodeId, TensorError> {
        let p = self.value(probs);
        if targets.is_empty() {
            return Err(TensorError::IndexOutOfRange {
                op: "nll",
                index: 0,
                bound: 0,
            });
        }
        let floor = T::lit(PROB_FLOOR);
        let mut total = T::zero();
        let mut clamped = 0;
        for &(r, t) in targets {
            if r >= p.rows() {
                return Err(TensorError::IndexOutOfRange {
                    op: "nll",
                    index: r,
                    bound: p.rows(),
                });
            }
            if t >= p.cols() {
                return Err(TensorError::IndexOutOfRange {
                    op: "nll",
                    index: t,
                    bound: p.cols(),
                });
            }
            let mut q = p.get(r, t);
            if q < floor {
                q = floor;
                clamped += 1;
            }
            total -= q.ln();
        }
        let loss = total / T::lit(targets.len() as f64);
        self.push(
            Tensor::scalar(loss),
            Op::Nll {
                probs,
                targets: targets.to_vec(),
                clamped,
            },
            "nll",
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let cols = parts.first().map_or(0, |&p| self.shape(p).1);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: (rows, cols),
                    right: v.shape(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        self.push(
            Tensor::from_raw(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            "concat_rows",
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let v = self.value(a);
        if start + len > v.rows() {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: v.rows(),
            });
        }
        let cols = v.cols();
        let out = Tensor::from_raw(len, cols, v.data()[start * cols..(start + len) * cols].to_vec());
        self.push(out, Op::SliceRows(a, start), "slice_rows")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: (rows, cols),
                    right: s,
                });
            }
            cols += s.1;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(
            Tensor::from_raw(rows, cols, data),
            Op::ConcatCols(parts.to_vec()),
            "concat_cols",
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let v = self.value(a);
        if start + len > v.cols() {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: v.cols(),
            });
        }
        let out = Tensor::from_fn(v.rows(), len, |r, c| v.get(r, start + c));
        self.push(out, Op::SliceCols(a, start), "slice_cols")
    }

    /// Sum of all elements, as a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), "sum")
    }

    /// Back-propagates from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, TensorError> {
        if self.shape(loss) != (1, 1) {
            return Err(TensorError::NotScalar("backward"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].clone() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.t_matmul(self.value(*a))?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c)),
                Op::RowSelect(table, ids) => {
                    let (rows, cols) = self.shape(*table);
                    let mut gt = Tensor::zeros(rows, cols);
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, &v) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::ColumnSelect(table, ids) => {
                    let (rows, cols) = self.shape(*table);
                    let mut gt = Tensor::zeros(rows, cols);
                    for (i, &id) in ids.iter().enumerate() {
                        for (r, &v) in g.row(i).iter().enumerate() {
                            let cur = gt.get(r, id);
                            gt.set(r, id, cur + v);
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let (rows, cols) = g.shape();
                    let gam = self.value(*gamma).data();
                    let mut g_gamma = Tensor::zeros(1, cols);
                    let mut g_beta = Tensor::zeros(1, cols);
                    let mut gx = Tensor::zeros(rows, cols);
                    let n = T::lit(cols as f64);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = normalized.row(r);
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..cols {
                            g_beta.data_mut()[c] += gr[c];
                            g_gamma.data_mut()[c] += gr[c] * xh[c];
                            let d = gr[c] * gam[c];
                            mean_d += d;
                            mean_dx += d * xh[c];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            let d = gr[c] * gam[c];
                            out[c] = inv_std[r] * (d - mean_d - xh[c] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *gamma, g_gamma);
                    accumulate(&mut grads, *beta, g_beta);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Relu(a) => {
                    let input = self.value(*a);
                    let mut ga = g;
                    for (o, &x) in ga.data_mut().iter_mut().zip(input.data()) {
                        if x <= T::zero() {
                            *o = T::zero();
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let s: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for (o, (&p, &q)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = p * (q - s);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Nll { probs, targets, .. } => {
                    let p = self.value(*probs);
                    let upstream = g.data()[0];
                    let floor = T::lit(PROB_FLOOR);
                    let k = T::lit(targets.len() as f64);
                    let mut gp = Tensor::zeros(p.rows(), p.cols());
                    for &(r, t) in targets {
                        let q = p.get(r, t);
                        if q >= floor {
                            let cur = gp.get(r, t);
                            gp.set(r, t, cur - upstream / (k * q));
                        }
                    }
                    accumulate(&mut grads, *probs, gp);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.shape(p).0;
                        let part =
                            Tensor::from_raw(rows, cols, g.data()[offset * cols..(offset + rows) * cols].to_vec());
                        offset += rows;
                        accumulate(&mut grads, p, part);
                    }
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    ga.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let part = Tensor::from_fn(rows, cols, |r, c| g.get(r, offset + c));
                        offset += cols;
                        accumulate(&mut grads, p, part);
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(*a);
                    accumulate(&mut grads, *a, Tensor::filled(rows, cols, g.data()[0]));
                }
            }
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Normalises each row to zero mean and unit variance; returns the
/// normalised rows and the per-row inverse standard deviation.
pub fn normalize_rows<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let (rows, cols) = x.shape();
    let n = T::lit(cols as f64);
    let eps = T::lit(LAYER_NORM_EPS);
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = out.row_mut(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv.push(is);
    }
    (out, inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_difference;

    #[test]
    fn softmax_of_zero_row_is_uniform() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(1, 4));
        let p = g.softmax_rows(x).unwrap();
        for &v in g.value(p).data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn nll_of_uniform_is_log_width() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(1, 4));
        let p = g.softmax_rows(x).unwrap();
        let l = g.nll(p, &[(0, 0)]).unwrap();
        assert!((g.value(l).item().unwrap() - 4f32.ln()).abs() < 1e-6);
        assert!((4f32.ln() - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn nll_clamps_zero_probability() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::new(1, 2, vec![1.0, 0.0]).unwrap());
        let l = g.nll(p, &[(0, 1)]).unwrap();
        assert_eq!(g.nll_clamped(l), 1);
        assert!((g.value(l).item().unwrap() + PROB_FLOOR.ln()).abs() < 1e-9);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nll_rejects_out_of_range_target() {
        let mut g = Graph::<f32>::new();
        let p = g.leaf(Tensor::filled(1, 3, 1.0 / 3.0));
        assert!(matches!(g.nll(p, &[(0, 3)]), Err(TensorError::IndexOutOfRange { .. })));
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::<f32>::from_fn(3, 3, |r, c| (r as f32 * 1.7 - c as f32 * 0.3).sin());
        let mut g = Graph::new();
        let i = g.leaf(Tensor::identity(3));
        let an = g.leaf(a.clone());
        let p = g.matmul(i, an).unwrap();
        assert_eq!(g.value(p), &a);
    }

    #[test]
    fn sum_gradient_is_all_ones_and_unused_leaf_is_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_fn(2, 3, |r, c| (r + c) as f32));
        let unused = g.leaf(Tensor::filled(2, 2, 5.0));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).data().iter().all(|&v| v == 1.0));
        assert!(!grads.touched(unused));
        assert!(grads.get(unused).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(2, 2));
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let x = Tensor::<f32>::from_fn(5, 16, |r, c| ((r * 31 + c * 7) % 13) as f32 * 0.9 - 3.0);
        let mut g = Graph::new();
        let xn = g.leaf(x);
        let gamma = g.leaf(Tensor::filled(1, 16, 1.0));
        let beta = g.leaf(Tensor::zeros(1, 16));
        let y = g.layer_norm(xn, gamma, beta).unwrap();
        for r in 0..5 {
            let row = g.value(y).row(r);
            let mean: f32 = row.iter().sum::<f32>() / 16.0;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 16.0;
            assert!(mean.abs() <= 1e-5);
            assert!((var - 1.0).abs() <= 1e-3);
        }
    }

    /// Builds a small graph touching every op and checks all leaf gradients
    /// against central differences in f64.
    #[test]
    fn every_op_matches_finite_differences() {
        fn build(g: &mut Graph<f64>, leaves: &[Tensor<f64>]) -> (Vec<NodeId>, NodeId) {
            let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
            let (x, w, b, gam, bet, table) = (ids[0], ids[1], ids[2], ids[3], ids[4], ids[5]);
            let h = g.matmul(x, w).unwrap();
            let h = g.add_row(h, b).unwrap();
            let h = g.layer_norm(h, gam, bet).unwrap();
            let r = g.relu(h).unwrap();
            let emb = g.column_select(table, &[2, 0, 2]).unwrap();
            let rs = g.row_select(x, &[1, 1, 0]).unwrap();
            let rs = g.scale(rs, 0.5).unwrap();
            let cat = g.concat_cols(&[emb, rs]).unwrap();
            let left = g.slice_cols(cat, 0, 4).unwrap();
            let tall = g.concat_rows(&[r, left]).unwrap();
            let top = g.slice_rows(tall, 1, 3).unwrap();
            let att = g.matmul_t(top, tall).unwrap();
            let sum_back = g.add(top, top).unwrap();
            let p = g.softmax_rows(att).unwrap();
            let loss = g.nll(p, &[(0, 1), (2, 4)]).unwrap();
            let extra = g.sum(sum_back).unwrap();
            let extra = g.scale(extra, 0.01).unwrap();
            let total = g.add(loss, extra).unwrap();
            (ids, total)
        }
        let leaves = vec![
            Tensor::from_fn(3, 3, |r, c| ((r * 3 + c) as f64 * 0.37).sin()),
            Tensor::from_fn(3, 4, |r, c| ((r * 4 + c) as f64 * 0.71).cos()),
            Tensor::from_fn(1, 4, |_, c| c as f64 * 0.1 - 0.15),
            Tensor::from_fn(1, 4, |_, c| 1.0 + c as f64 * 0.05),
            Tensor::from_fn(1, 4, |_, c| 0.02 * c as f64),
            Tensor::from_fn(4, 3, |r, c| ((r + 2 * c) as f64 * 0.53).sin()),
        ];
        let mut g = Graph::new();
        let (ids, loss) = build(&mut g, &leaves);
        let grads = g.backward(loss).unwrap();
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(ids[li]);
            let numeric = central_difference(
                |theta: &[f64]| {
                    let mut ls = leaves.clone();
                    ls[li] = Tensor::new(leaf.rows(), leaf.cols(), theta.to_vec()).unwrap();
                    let mut g = Graph::new();
                    let (_, l) = build(&mut g, &ls);
                    g.value(l).item().unwrap()
                },
                leaf.data(),
                |t| 1e-5 * (1.0 + t.abs()),
            )
            .unwrap();
            for (a, n) in analytic.data().iter().zip(&numeric) {
                assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "leaf {li}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_fn(4, 4, |r, c| (r as f32 - c as f32) * 0.3));
        let w = g.leaf(Tensor::from_fn(4, 4, |r, c| ((r * c) as f32).cos()));
        let h = g.matmul(x, w).unwrap();
        let p = g.softmax_rows(h).unwrap();
        let l = g.nll(p, &[(0, 1), (3, 2)]).unwrap();
        let a = g.backward(l).unwrap();
        let b = g.backward(l).unwrap();
        assert_eq!(a.get(x).data(), b.get(x).data());
        assert_eq!(a.get(w).data(), b.get(w).data());
    }
}
