//! Reverse-mode differentiation over an explicit record of primitive
//! applications.
//!
//! Every primitive validates shapes, computes its forward value, rejects
//! non-finite outputs, and pushes a node holding enough state for its
//! adjoint. [`Tape::backward`] walks the record in reverse and accumulates
//! gradients of a scalar loss into a [`ParameterSet`].

use std::sync::Arc;

use super::{dot, DenseMatrix, ParamId, ParameterSet};
use crate::error::{HgibError, Result};
use crate::graph::{InteractionGraph, WeightedAdjacency, DEGREE_EPS};
use crate::scalar::{sigmoid, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adjoint of a user-supplied unary primitive:
/// `(input, output, output_grad) -> input_grad`.
pub type CustomAdjoint<T> =
    Box<dyn Fn(&DenseMatrix<T>, &DenseMatrix<T>, &DenseMatrix<T>) -> DenseMatrix<T> + Send + Sync>;

enum Op<T> {
    Leaf { param: Option<ParamId> },
    Matmul(Var, Var),
    Transpose(Var),
    SparsePropagate { adj: WeightedAdjacency<T>, weights: Var, x: Var },
    RowGather { x: Var, rows: Vec<usize> },
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    Scale(Var, T),
    Sum(Var),
    MeanRows(Var),
    RowSum(Var),
    L2NormRows(Var),
    NormalizeRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Column(Var, usize),
    ScaleRows(Var, Var),
    StraightThrough(Var),
    PairwiseSqDist(Var),
    Select { x: Var, picks: Vec<(usize, T)> },
    DivScalar(Var, Var),
    Center(Var),
    Custom { x: Var, name: &'static str, adjoint: CustomAdjoint<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::SparsePropagate { .. } => "sparse_propagate",
            Op::RowGather { .. } => "row_gather",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::MulElem(..) => "mul_elementwise",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::MeanRows(_) => "mean_rows",
            Op::RowSum(_) => "row_sum",
            Op::L2NormRows(_) => "l2_norm_rows",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::Column(..) => "column",
            Op::ScaleRows(..) => "scale_rows",
            Op::StraightThrough(_) => "straight_through",
            Op::PairwiseSqDist(_) => "pairwise_sq_dist",
            Op::Select { .. } => "median_off_diagonal",
            Op::DivScalar(..) => "div_scalar",
            Op::Center(_) => "center",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: DenseMatrix<T>,
}

/// The computation record.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseMatrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Name of the primitive that produced `v`.
    pub fn kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, op: Op<T>, value: DenseMatrix<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(HgibError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(HgibError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn column_vector(&self, op: &'static str, v: Var, rows: usize) -> Result<()> {
        if self.shape(v) != (rows, 1) {
            return Err(HgibError::shape(
                op,
                format!("expected a {rows}x1 column, got {:?}", self.shape(v)),
            ));
        }
        Ok(())
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: DenseMatrix<T>) -> Result<Var> {
        self.push(Op::Leaf { param: None }, value)
    }

    /// Leaf bound to a trainable parameter; its gradient flows into `params`.
    pub fn param(&mut self, params: &ParameterSet<T>, id: ParamId) -> Result<Var> {
        self.push(Op::Leaf { param: Some(id) }, params.value(id).clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(Op::Matmul(a, b), value)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    /// Symmetric-normalized propagation across `graph` with per-edge
    /// weights taken from the column vector `weights`.
    pub fn sparse_propagate(&mut self, graph: &Arc<InteractionGraph>, weights: Var, x: Var) -> Result<Var> {
        self.column_vector("sparse_propagate", weights, graph.num_edges())?;
        let adj = WeightedAdjacency::new(graph, self.value(weights).as_slice())?;
        let value = adj.propagate(self.value(x))?;
        self.push(Op::SparsePropagate { adj, weights, x }, value)
    }

    pub fn row_gather(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let value = self.value(x).gather_rows(rows)?;
        self.push(Op::RowGather { x, rows: rows.to_vec() }, value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), value)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(T::exp);
        self.push(Op::Exp(x), value)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(T::ln);
        self.push(Op::Log(x), value)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = softmax_rows(self.value(x));
        self.push(Op::SoftmaxRows(x), value)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let mut value = src.clone();
        for r in 0..src.rows() {
            let row = value.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(Op::LogSoftmaxRows(x), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul_elementwise", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::MulElem(a, b), value)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).scaled(s);
        self.push(Op::Scale(x, s), value)
    }

    /// Sum of all entries, as a 1x1 matrix.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = DenseMatrix::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value)
    }

    /// Column-wise mean over rows: `n x d -> 1 x d`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.rows() == 0 {
            return Err(HgibError::shape("mean_rows", "zero rows"));
        }
        let n = T::of_usize(src.rows());
        let value = DenseMatrix::from_fn(1, src.cols(), |_, c| {
            (0..src.rows()).map(|r| src.get(r, c)).sum::<T>() / n
        });
        self.push(Op::MeanRows(x), value)
    }

    /// Per-row sum: `n x d -> n x 1`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let value = DenseMatrix::column((0..src.rows()).map(|r| src.row(r).iter().copied().sum()).collect());
        self.push(Op::RowSum(x), value)
    }

    /// Per-row dot product of two equally shaped matrices: `n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let prod = self.mul(a, b)?;
        self.row_sum(prod)
    }

    pub fn l2_norm_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let value = DenseMatrix::column((0..src.rows()).map(|r| dot(src.row(r), src.row(r)).sqrt()).collect());
        self.push(Op::L2NormRows(x), value)
    }

    /// Scales each row to unit length; zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = dot(row, row).sqrt();
            if n > T::zero() {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        self.push(Op::NormalizeRows(x), value)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.shape(p).1).ok_or_else(|| HgibError::shape("concat_rows", "no inputs"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != cols {
                return Err(HgibError::shape("concat_rows", format!("column counts {cols} vs {}", m.cols())));
            }
            rows += m.rows();
            data.extend_from_slice(m.as_slice());
        }
        let value = DenseMatrix::from_vec(rows, cols, data)?;
        self.push(Op::ConcatRows(parts.to_vec()), value)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p).0).ok_or_else(|| HgibError::shape("concat_cols", "no inputs"))?;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(HgibError::shape("concat_cols", format!("row counts {rows} vs {}", self.shape(bad).0)));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = DenseMatrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), value)
    }

    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let src = self.value(x);
        if col >= src.cols() {
            return Err(HgibError::shape("column", format!("column {col} of {}", src.cols())));
        }
        let value = DenseMatrix::column((0..src.rows()).map(|r| src.get(r, col)).collect());
        self.push(Op::Column(x, col), value)
    }

    /// Multiplies row `r` of `x` by entry `r` of the column vector `s`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let rows = self.shape(x).0;
        self.column_vector("scale_rows", s, rows)?;
        let src = self.value(x);
        let sv = self.value(s);
        let value = DenseMatrix::from_fn(rows, src.cols(), |r, c| src.get(r, c) * sv.get(r, 0));
        self.push(Op::ScaleRows(x, s), value)
    }

    /// Forward value `hard`, gradient passed unchanged to `soft`.
    pub fn straight_through(&mut self, hard: DenseMatrix<T>, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(HgibError::shape("straight_through", format!("{:?} vs {:?}", hard.shape(), self.shape(soft))));
        }
        self.push(Op::StraightThrough(soft), hard)
    }

    /// `D[i][j] = |x_i - x_j|^2`.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let n = src.rows();
        let norms: Vec<T> = (0..n).map(|i| dot(src.row(i), src.row(i))).collect();
        let gram = src.matmul_t(src)?;
        let value = DenseMatrix::from_fn(n, n, |i, j| {
            if i == j {
                T::zero()
            } else {
                (norms[i] + norms[j] - gram.get(i, j) - gram.get(j, i)).max(T::zero())
            }
        });
        self.push(Op::PairwiseSqDist(x), value)
    }

    /// Median of the strictly-upper-triangular entries of a square matrix,
    /// as a 1x1 value. Even counts average the two middle entries.
    pub fn median_off_diagonal(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let n = src.rows();
        if src.cols() != n || n < 2 {
            return Err(HgibError::shape("median_off_diagonal", format!("{:?}", src.shape())));
        }
        let mut entries: Vec<(T, usize)> = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                entries.push((src.get(i, j), i * n + j));
            }
        }
        entries.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
        let m = entries.len();
        let picks = if m % 2 == 1 {
            vec![(entries[m / 2].1, T::one())]
        } else {
            let half = T::of(0.5);
            vec![(entries[m / 2 - 1].1, half), (entries[m / 2].1, half)]
        };
        let median = picks.iter().map(|&(flat, w)| src.as_slice()[flat] * w).sum();
        self.push(Op::Select { x, picks }, DenseMatrix::scalar(median))
    }

    /// Divides every entry of `x` by the 1x1 value `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(HgibError::shape("div_scalar", format!("divisor {:?}", self.shape(s))));
        }
        let d = self.value(s).item();
        let value = self.value(x).map(|v| v / d);
        self.push(Op::DivScalar(x, s), value)
    }

    /// Double centering `H K H` with `H = I - 11^T / n`.
    pub fn center(&mut self, k: Var) -> Result<Var> {
        let src = self.value(k);
        if src.rows() != src.cols() {
            return Err(HgibError::shape("center", format!("{:?} is not square", src.shape())));
        }
        let value = double_center(src);
        self.push(Op::Center(k), value)
    }

    /// Registers a unary primitive with a caller-supplied adjoint.
    pub fn custom_unary(
        &mut self,
        name: &'static str,
        x: Var,
        forward: impl Fn(&DenseMatrix<T>) -> DenseMatrix<T>,
        adjoint: CustomAdjoint<T>,
    ) -> Result<Var> {
        let value = forward(self.value(x));
        self.push(Op::Custom { x, name, adjoint }, value)
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<DenseMatrix<T>>>> {
        if self.shape(loss) != (1, 1) {
            return Err(HgibError::shape("backward", format!("loss must be 1x1, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<DenseMatrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(DenseMatrix::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (input, contribution) in self.adjoint(node, &g)? {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Accumulates `d loss / d parameter` into each parameter's gradient.
    pub fn backward(&self, loss: Var, params: &mut ParameterSet<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Leaf { param: Some(id) }, Some(g)) = (&node.op, g) {
                params.grad_mut(*id).add_assign(&g);
            }
        }
        Ok(())
    }

    fn adjoint(&self, node: &Node<T>, g: &DenseMatrix<T>) -> Result<Vec<(Var, DenseMatrix<T>)>> {
        let y = &node.value;
        let out = match &node.op {
            Op::Leaf { .. } => vec![],
            Op::Matmul(a, b) => vec![
                (*a, g.matmul_t(self.value(*b))?),
                (*b, self.value(*a).t_matmul(g)?),
            ],
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::SparsePropagate { adj, weights, x } => {
                let dx = adj.propagate(g)?;
                let dw = propagate_weight_adjoint(adj, self.value(*x), g);
                vec![(*x, dx), (*weights, dw)]
            }
            Op::RowGather { x, rows } => {
                let src = self.value(*x);
                let mut dx = DenseMatrix::zeros(src.rows(), src.cols());
                for (k, &r) in rows.iter().enumerate() {
                    for (d, &gv) in dx.row_mut(r).iter_mut().zip(g.row(k)) {
                        *d += gv;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Sigmoid(x) => vec![(*x, g.zip_map(y, |gv, s| gv * s * (T::one() - s)))],
            Op::Exp(x) => vec![(*x, g.zip_map(y, |gv, e| gv * e))],
            Op::Log(x) => vec![(*x, g.zip_map(self.value(*x), |gv, v| gv / v))],
            Op::SoftmaxRows(x) => {
                let mut dx = DenseMatrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner = dot(g.row(r), y.row(r));
                    for ((d, &gv), &p) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *d = p * (gv - inner);
                    }
                }
                vec![(*x, dx)]
            }
            Op::LogSoftmaxRows(x) => {
                let mut dx = DenseMatrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let total: T = g.row(r).iter().copied().sum();
                    for ((d, &gv), &lp) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *d = gv - lp.exp() * total;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scaled(-T::one()))],
            Op::MulElem(a, b) => vec![
                (*a, g.zip_map(self.value(*b), |gv, v| gv * v)),
                (*b, g.zip_map(self.value(*a), |gv, v| gv * v)),
            ],
            Op::Scale(x, s) => vec![(*x, g.scaled(*s))],
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                vec![(*x, DenseMatrix::filled(r, c, g.item()))]
            }
            Op::MeanRows(x) => {
                let (r, c) = self.shape(*x);
                let n = T::of_usize(r);
                vec![(*x, DenseMatrix::from_fn(r, c, |_, j| g.get(0, j) / n))]
            }
            Op::RowSum(x) => {
                let (r, c) = self.shape(*x);
                vec![(*x, DenseMatrix::from_fn(r, c, |i, _| g.get(i, 0)))]
            }
            Op::L2NormRows(x) => {
                let src = self.value(*x);
                let dx = DenseMatrix::from_fn(src.rows(), src.cols(), |r, c| {
                    let n = y.get(r, 0);
                    if n > T::zero() {
                        g.get(r, 0) * src.get(r, c) / n
                    } else {
                        T::zero()
                    }
                });
                vec![(*x, dx)]
            }
            Op::NormalizeRows(x) => {
                let src = self.value(*x);
                let mut dx = DenseMatrix::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    let n = dot(src.row(r), src.row(r)).sqrt();
                    if n == T::zero() {
                        continue;
                    }
                    let inner = dot(y.row(r), g.row(r));
                    for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *d = (gv - yv * inner) / n;
                    }
                }
                vec![(*x, dx)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let (r, c) = self.shape(p);
                        let slice = g.as_slice()[offset * c..(offset + r) * c].to_vec();
                        offset += r;
                        Ok((p, DenseMatrix::from_vec(r, c, slice)?))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let (r, c) = self.shape(p);
                        let m = DenseMatrix::from_fn(r, c, |i, j| g.get(i, offset + j));
                        offset += c;
                        (p, m)
                    })
                    .collect()
            }
            Op::Column(x, col) => {
                let (r, c) = self.shape(*x);
                vec![(*x, DenseMatrix::from_fn(r, c, |i, j| if j == *col { g.get(i, 0) } else { T::zero() }))]
            }
            Op::ScaleRows(x, s) => {
                let src = self.value(*x);
                let sv = self.value(*s);
                let dx = DenseMatrix::from_fn(src.rows(), src.cols(), |r, c| g.get(r, c) * sv.get(r, 0));
                let ds = DenseMatrix::column((0..src.rows()).map(|r| dot(g.row(r), src.row(r))).collect());
                vec![(*x, dx), (*s, ds)]
            }
            Op::StraightThrough(soft) => vec![(*soft, g.clone())],
            Op::PairwiseSqDist(x) => {
                let src = self.value(*x);
                let n = src.rows();
                let sym = DenseMatrix::from_fn(n, n, |i, j| g.get(i, j) + g.get(j, i));
                let pulled = sym.matmul(src)?;
                let two = T::of(2.0);
                let dx = DenseMatrix::from_fn(n, src.cols(), |i, c| {
                    let row_total: T = sym.row(i).iter().copied().sum();
                    two * (row_total * src.get(i, c) - pulled.get(i, c))
                });
                vec![(*x, dx)]
            }
            Op::Select { x, picks } => {
                let (r, c) = self.shape(*x);
                let mut dx = DenseMatrix::zeros(r, c);
                for &(flat, w) in picks {
                    dx.as_mut_slice()[flat] += g.item() * w;
                }
                vec![(*x, dx)]
            }
            Op::DivScalar(x, s) => {
                let d = self.value(*s).item();
                let src = self.value(*x);
                let ds = -dot(g.as_slice(), src.as_slice()) / (d * d);
                vec![(*x, g.map(|gv| gv / d)), (*s, DenseMatrix::scalar(ds))]
            }
            Op::Center(k) => vec![(*k, double_center(g))],
            Op::Custom { x, adjoint, .. } => vec![(*x, adjoint(self.value(*x), y, g))],
        };
        Ok(out)
    }
}

/// Gradient of a propagation step with respect to its raw edge weights:
/// the message term plus the weighted-degree sensitivity of the
/// normalization.
fn propagate_weight_adjoint<T: Scalar>(
    adj: &WeightedAdjacency<T>,
    x: &DenseMatrix<T>,
    g: &DenseMatrix<T>,
) -> DenseMatrix<T> {
    let nu = adj.num_users();
    let eps = T::of(DEGREE_EPS);
    let half = T::of(0.5);
    let coeff_grad: Vec<T> = adj
        .edges()
        .iter()
        .map(|&(u, v)| dot(g.row(u), x.row(nu + v)) + dot(g.row(nu + v), x.row(u)))
        .collect();
    let mut user_acc = vec![T::zero(); adj.user_degree().len()];
    let mut item_acc = vec![T::zero(); adj.item_degree().len()];
    for ((&(u, v), &gc), &c) in adj.edges().iter().zip(&coeff_grad).zip(adj.norm_coeffs()) {
        user_acc[u] += gc * c;
        item_acc[v] += gc * c;
    }
    let dw = adj
        .edges()
        .iter()
        .zip(&coeff_grad)
        .map(|(&(u, v), &gc)| {
            let (du, dv) = (adj.user_degree()[u], adj.item_degree()[v]);
            if du < eps || dv < eps {
                return T::zero();
            }
            gc / (du * dv).sqrt() - half * (user_acc[u] / du + item_acc[v] / dv)
        })
        .collect();
    DenseMatrix::column(dw)
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_rows<T: Scalar>(x: &DenseMatrix<T>) -> DenseMatrix<T> {
    let mut value = x.clone();
    for r in 0..x.rows() {
        let row = value.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let total: T = row.iter().copied().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    value
}

fn double_center<T: Scalar>(k: &DenseMatrix<T>) -> DenseMatrix<T> {
    let n = k.rows();
    if n == 0 {
        return k.clone();
    }
    let nt = T::of_usize(n);
    // centering ignores a constant shift; removing one makes constant input exactly zero
    let shift = k.get(0, 0);
    let s = k.map(|v| v - shift);
    let row_mean: Vec<T> = (0..n).map(|i| s.row(i).iter().copied().sum::<T>() / nt).collect();
    let col_mean: Vec<T> = (0..n).map(|j| (0..n).map(|i| s.get(i, j)).sum::<T>() / nt).collect();
    let grand = row_mean.iter().copied().sum::<T>() / nt;
    DenseMatrix::from_fn(n, n, |i, j| s.get(i, j) - row_mean[i] - col_mean[j] + grand)
}
