//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to the
//! owning [`Tape`]. Nodes are stored in creation order, which is already a
//! topological order, so [`Var::backward`] is a single reverse sweep.
//!
//! Tensors are treated as matrices (see [`Tensor::rows`]/[`Tensor::cols`]).
//! The only broadcasting is a row vector added to every row
//! ([`Var::add_row`]) and a one-element tensor multiplied into every entry
//! ([`Var::mul_scalar`]); everything else requires equal shapes.

use std::cell::RefCell;
use std::sync::Arc;

use super::tensor::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::{Tensor, TensorError};

/// Lower bound on a row norm inside [`Var::l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    MulScalar(usize, usize),
    Scale(usize, f64),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    Reshape(usize),
    Mean(usize),
    Sum(usize),
    L2NormRows {
        x: usize,
        norms: Vec<f64>,
    },
    Log(usize),
    Exp(usize),
    Sigmoid(usize),
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass.
///
/// A tape is single-threaded; independent tapes can live on different
/// threads because leaf values are shared through [`Arc`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), Op::Leaf, true)
    }

    /// A differentiable leaf sharing storage with the caller.
    pub fn var_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), Op::Leaf, false)
    }

    pub fn constant_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let needs = self.needs(inputs);
        self.push(Arc::new(value), op, needs)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction. Entries whose `mask` flag is
/// `false` get probability zero.
pub fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let max = (0..c)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if keep(j) {
                *v = (*v - max).exp();
                total += *v;
            } else {
                *v = 0.0;
            }
        }
        if total > 0.0 {
            for v in row.iter_mut() {
                *v /= total;
            }
        }
    }
    out
}

// Fallible shape-checked ops, so the std operator traits don't fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
            return Err(mismatch("matmul", &a, &b));
        }
        let (n, k, p) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; n * p];
        gemm_nn(a.data(), b.data(), &mut out, n, k, p);
        Ok(self.tape.record(
            Tensor::matrix(n, p, out),
            Op::MatMul(self.id, other.id),
            &[self.id, other.id],
        ))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
            return Err(mismatch("matmul_t", &a, &b));
        }
        let (n, k, p) = (a.rows(), a.cols(), b.rows());
        let mut out = vec![0.0; n * p];
        gemm_nt(a.data(), b.data(), &mut out, n, k, p);
        Ok(self.tape.record(
            Tensor::matrix(n, p, out),
            Op::MatMulT(self.id, other.id),
            &[self.id, other.id],
        ))
    }

    pub fn transpose(self) -> Var<'t> {
        let t = self.value().transpose();
        self.tape.record(t, Op::Transpose(self.id), &[self.id])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.value(), other.value());
        a.same_shape(&b, "add")?;
        Ok(self.tape.record(
            zip_map(&a, &b, |x, y| x + y),
            Op::Add(self.id, other.id),
            &[self.id, other.id],
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.value(), other.value());
        a.same_shape(&b, "sub")?;
        Ok(self.tape.record(
            zip_map(&a, &b, |x, y| x - y),
            Op::Sub(self.id, other.id),
            &[self.id, other.id],
        ))
    }

    /// Adds a row vector (`[cols]` or `[1, cols]`) to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.value(), row.value());
        if b.len() != a.cols() || b.rows() != 1 {
            return Err(mismatch("add_row", &a, &b));
        }
        let mut out = (*a).clone();
        for r in 0..a.rows() {
            for (v, &bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        Ok(self
            .tape
            .record(out, Op::AddRow(self.id, row.id), &[self.id, row.id]))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.value(), other.value());
        a.same_shape(&b, "mul")?;
        Ok(self.tape.record(
            zip_map(&a, &b, |x, y| x * y),
            Op::Mul(self.id, other.id),
            &[self.id, other.id],
        ))
    }

    /// Multiplies every entry by the value of a one-element node.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, sv) = (self.value(), s.value());
        let k = sv.item()?;
        Ok(self.tape.record(
            a.map(|x| x * k),
            Op::MulScalar(self.id, s.id),
            &[self.id, s.id],
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let a = self.value();
        self.tape
            .record(a.map(|x| x * c), Op::Scale(self.id, c), &[self.id])
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Var<'t> {
        let y = softmax_rows(&self.value(), None);
        self.tape.record(y, Op::Softmax(self.id), &[self.id])
    }

    /// Softmax along the last axis with masked-out columns forced to zero.
    pub fn softmax_masked(self, key_mask: &[bool]) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        if key_mask.len() != x.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_masked",
                lhs: x.shape().to_vec(),
                rhs: vec![key_mask.len()],
            });
        }
        let y = softmax_rows(&x, Some(key_mask));
        Ok(self.tape.record(y, Op::Softmax(self.id), &[self.id]))
    }

    pub fn log_softmax(self) -> Var<'t> {
        let x = self.value();
        let mut out = (*x).clone();
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.tape.record(out, Op::LogSoftmax(self.id), &[self.id])
    }

    /// Row-wise layer normalization followed by an affine map.
    pub fn layer_norm(
        self,
        gain: Var<'t>,
        bias: Var<'t>,
        eps: f64,
    ) -> Result<Var<'t>, TensorError> {
        let (x, g, b) = (self.value(), gain.value(), bias.value());
        let c = x.cols();
        if g.len() != c || b.len() != c {
            return Err(mismatch("layer_norm", &x, &g));
        }
        let rows = x.rows();
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::new(x.shape(), out)?;
        Ok(self.tape.record(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            &[self.id, gain.id, bias.id],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let y = self.value().map(gelu);
        self.tape.record(y, Op::Gelu(self.id), &[self.id])
    }

    /// Gathers rows of an embedding table.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t>, TensorError> {
        let table = self.value();
        let (n, d) = (table.rows(), table.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(TensorError::IndexOutOfRange { index: i, len: n });
            }
            out.extend_from_slice(table.row(i));
        }
        Ok(self.tape.record(
            Tensor::matrix(ids.len(), d, out),
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
            &[self.id],
        ))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        let tape = parts.first().ok_or(TensorError::Empty("concat_rows"))?.tape;
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let c = values[0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for v in &values {
            if v.cols() != c {
                return Err(mismatch("concat_rows", &values[0], v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.record(
            Tensor::matrix(rows, c, data),
            Op::ConcatRows(ids.clone()),
            &ids,
        ))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        let tape = parts.first().ok_or(TensorError::Empty("concat_cols"))?.tape;
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let rows = values[0].rows();
        if let Some(bad) = values.iter().find(|v| v.rows() != rows) {
            return Err(mismatch("concat_cols", &values[0], bad));
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.record(
            Tensor::matrix(rows, total, data),
            Op::ConcatCols(ids.clone()),
            &ids,
        ))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        if start + len > x.rows() {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                len: x.rows(),
            });
        }
        let c = x.cols();
        let data = x.data()[start * c..(start + len) * c].to_vec();
        Ok(self.tape.record(
            Tensor::matrix(len, c, data),
            Op::SliceRows { x: self.id, start },
            &[self.id],
        ))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        if start + len > x.cols() {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                len: x.cols(),
            });
        }
        let mut data = Vec::with_capacity(x.rows() * len);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        Ok(self.tape.record(
            Tensor::matrix(x.rows(), len, data),
            Op::SliceCols { x: self.id, start },
            &[self.id],
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let x = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.record(x, Op::Reshape(self.id), &[self.id]))
    }

    /// Mean over all entries, as a scalar.
    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let m = x.sum() / x.len() as f64;
        self.tape
            .record(Tensor::scalar(m), Op::Mean(self.id), &[self.id])
    }

    /// Sum over all entries, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape
            .record(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(self) -> Var<'t> {
        let x = self.value();
        let mut out = (*x).clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let n = dot(row, row).sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.tape
            .record(out, Op::L2NormRows { x: self.id, norms }, &[self.id])
    }

    pub fn log(self) -> Var<'t> {
        let y = self.value().map(f64::ln);
        self.tape.record(y, Op::Log(self.id), &[self.id])
    }

    pub fn exp(self) -> Var<'t> {
        let y = self.value().map(f64::exp);
        self.tape.record(y, Op::Exp(self.id), &[self.id])
    }

    pub fn sigmoid(self) -> Var<'t> {
        let y = self.value().map(sigmoid);
        self.tape.record(y, Op::Sigmoid(self.id), &[self.id])
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let y = self.value().map(|v| v.clamp(lo, hi));
        self.tape
            .record(y, Op::Clamp { x: self.id, lo, hi }, &[self.id])
    }

    /// Reverse sweep from a one-element node.
    pub fn backward(self) -> Result<Gradients, TensorError> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id].value;
        if root.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: root.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[self.id] = Some(Tensor::full(root.shape(), 1.0));

        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.needs_grad {
                propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_with(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    id: usize,
    f: impl FnOnce(&mut Tensor),
) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[id].value.shape()));
    }
    f(slot.as_mut().expect("initialized"));
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let y = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (n, k, p) = (av.rows(), av.cols(), bv.cols());
            accumulate_with(nodes, grads, a, |ga| {
                gemm_nt(g.data(), bv.data(), ga.data_mut(), n, p, k)
            });
            accumulate_with(nodes, grads, b, |gb| {
                gemm_tn(av.data(), g.data(), gb.data_mut(), n, k, p)
            });
        }
        &Op::MatMulT(a, b) => {
            // y = a bᵀ, a: n×k, b: p×k
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (n, k, p) = (av.rows(), av.cols(), bv.rows());
            accumulate_with(nodes, grads, a, |ga| {
                gemm_nn(g.data(), bv.data(), ga.data_mut(), n, p, k)
            });
            accumulate_with(nodes, grads, b, |gb| {
                gemm_tn(g.data(), av.data(), gb.data_mut(), n, p, k)
            });
        }
        &Op::Transpose(a) => {
            let gt = g
                .transpose()
                .reshape(nodes[a].value.shape())
                .expect("transpose");
            accumulate(nodes, grads, a, gt);
        }
        &Op::Add(a, b) => {
            accumulate(nodes, grads, a, g.clone());
            accumulate(nodes, grads, b, g.clone());
        }
        &Op::Sub(a, b) => {
            accumulate(nodes, grads, a, g.clone());
            accumulate(nodes, grads, b, g.map(|v| -v));
        }
        &Op::AddRow(a, b) => {
            accumulate(nodes, grads, a, g.clone());
            accumulate_with(nodes, grads, b, |gb| {
                for r in 0..g.rows() {
                    for (acc, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
            });
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            accumulate(nodes, grads, a, zip_map(g, bv, |x, y| x * y));
            accumulate(nodes, grads, b, zip_map(g, av, |x, y| x * y));
        }
        &Op::MulScalar(a, s) => {
            let (av, sv) = (&nodes[a].value, &nodes[s].value);
            let k = sv.data()[0];
            accumulate(nodes, grads, a, g.map(|v| v * k));
            let ds = dot(g.data(), av.data());
            accumulate_with(nodes, grads, s, |gs| gs.data_mut()[0] += ds);
        }
        &Op::Scale(a, c) => accumulate(nodes, grads, a, g.map(|v| v * c)),
        &Op::Softmax(a) => {
            let mut gx = g.clone();
            for r in 0..y.rows() {
                let yr = y.row(r);
                let s = dot(g.row(r), yr);
                for ((gv, &yv), &dv) in gx.row_mut(r).iter_mut().zip(yr).zip(g.row(r)) {
                    *gv = yv * (dv - s);
                }
            }
            accumulate(nodes, grads, a, gx);
        }
        &Op::LogSoftmax(a) => {
            let mut gx = g.clone();
            for r in 0..y.rows() {
                let total: f64 = g.row(r).iter().sum();
                for (gv, &yv) in gx.row_mut(r).iter_mut().zip(y.row(r)) {
                    *gv -= yv.exp() * total;
                }
            }
            accumulate(nodes, grads, a, gx);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = &nodes[*gain].value;
            let c = y.cols();
            accumulate_with(nodes, grads, *gain, |gg| {
                for (i, &d) in g.data().iter().enumerate() {
                    gg.data_mut()[i % c] += d * xhat[i];
                }
            });
            accumulate_with(nodes, grads, *bias, |gb| {
                for (i, &d) in g.data().iter().enumerate() {
                    gb.data_mut()[i % c] += d;
                }
            });
            accumulate_with(nodes, grads, *x, |gx| {
                for (r, &rs) in rstd.iter().enumerate() {
                    let off = r * c;
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let d = g.data()[off + j] * gv.data()[j];
                        mean_d += d;
                        mean_dx += d * xhat[off + j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        let d = g.data()[off + j] * gv.data()[j];
                        gx.data_mut()[off + j] += rs * (d - mean_d - xhat[off + j] * mean_dx);
                    }
                }
            });
        }
        &Op::Gelu(a) => {
            let av = &nodes[a].value;
            accumulate(nodes, grads, a, zip_map(g, av, |d, x| d * gelu_grad(x)));
        }
        Op::Embedding { table, ids } => {
            accumulate_with(nodes, grads, *table, |gt| {
                for (r, &i) in ids.iter().enumerate() {
                    for (acc, &v) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
            });
        }
        Op::ConcatRows(parts) => {
            let c = g.cols();
            let mut offset = 0;
            for &p in parts {
                let rows = nodes[p].value.rows();
                let slice = g.data()[offset * c..(offset + rows) * c].to_vec();
                let shape = nodes[p].value.shape().to_vec();
                accumulate(nodes, grads, p, Tensor::new(&shape, slice).expect("concat"));
                offset += rows;
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let cols = nodes[p].value.cols();
                accumulate_with(nodes, grads, p, |gp| {
                    for r in 0..g.rows() {
                        for (acc, &v) in gp
                            .row_mut(r)
                            .iter_mut()
                            .zip(&g.row(r)[offset..offset + cols])
                        {
                            *acc += v;
                        }
                    }
                });
                offset += cols;
            }
        }
        &Op::SliceRows { x, start } => {
            let c = g.cols();
            accumulate_with(nodes, grads, x, |gx| {
                for (acc, &v) in gx.data_mut()[start * c..].iter_mut().zip(g.data()) {
                    *acc += v;
                }
            });
        }
        &Op::SliceCols { x, start } => {
            let len = g.cols();
            accumulate_with(nodes, grads, x, |gx| {
                for r in 0..g.rows() {
                    for (acc, &v) in gx.row_mut(r)[start..start + len].iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
            });
        }
        &Op::Reshape(a) => {
            let shape = nodes[a].value.shape().to_vec();
            accumulate(nodes, grads, a, g.clone().reshape(&shape).expect("reshape"));
        }
        &Op::Mean(a) => {
            let n = nodes[a].value.len() as f64;
            let d = g.data()[0] / n;
            accumulate(nodes, grads, a, Tensor::full(nodes[a].value.shape(), d));
        }
        &Op::Sum(a) => {
            let d = g.data()[0];
            accumulate(nodes, grads, a, Tensor::full(nodes[a].value.shape(), d));
        }
        Op::L2NormRows { x, norms } => {
            let mut gx = g.clone();
            for (r, &n) in norms.iter().enumerate() {
                let yr = y.row(r);
                let proj = dot(yr, g.row(r));
                for ((gv, &yv), &dv) in gx.row_mut(r).iter_mut().zip(yr).zip(g.row(r)) {
                    *gv = (dv - yv * proj) / n;
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        &Op::Log(a) => {
            let av = &nodes[a].value;
            accumulate(nodes, grads, a, zip_map(g, av, |d, x| d / x));
        }
        &Op::Exp(a) => accumulate(nodes, grads, a, zip_map(g, y, |d, v| d * v)),
        &Op::Sigmoid(a) => accumulate(nodes, grads, a, zip_map(g, y, |d, v| d * v * (1.0 - v))),
        &Op::Clamp { x, lo, hi } => {
            let xv = &nodes[x].value;
            accumulate(
                nodes,
                grads,
                x,
                zip_map(g, xv, |d, v| if v >= lo && v <= hi { d } else { 0.0 }),
            );
        }
    }
}

/// Result of [`Var::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if any reached it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient with respect to `var`, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}
