//! Reverse-mode differentiation over matrices.
//!
//! A [`Tape`] records one forward pass as a list of nodes; each node stores
//! its value and the primitive that produced it. [`Tape::backward`] walks the
//! list in reverse and applies the adjoint of every primitive. Tapes are
//! built per forward pass and never reused.
//!
//! Primitives outside the built-in set are added through [`CustomRule`]s,
//! registered by name on the tape before use.

mod check;

pub use check::{finite_diff_check, CheckOptions, GradReport, Objective, TapeObjective};

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::spectral;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward and backward rule for a primitive that is not built in.
pub trait CustomRule<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    /// Output value plus an optional cache handed back to `backward`.
    fn forward(&self, inputs: &[&Matrix<T>]) -> Result<(Matrix<T>, Option<Matrix<T>>)>;

    /// Cotangents for every input, in order.
    fn backward(
        &self,
        inputs: &[&Matrix<T>],
        output: &Matrix<T>,
        cache: Option<&Matrix<T>>,
        grad_out: &Matrix<T>,
    ) -> Result<Vec<Matrix<T>>>;
}

#[derive(Clone)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    InterleaveRows(Var, Var),
    Conv1d { x: Var, w: Var, b: Var, kernel: usize, stride: usize, cols: Matrix<T> },
    AvgPoolRows(Var, usize),
    Rdft(Var),
    Irdft(Var),
    ComplexFilter { spec: Var, wre: Var, wim: Var, n: usize },
    InterpCols(Var),
    BceWithLogits(Var, Vec<T>),
    Custom { rule: Arc<dyn CustomRule<T>>, inputs: Vec<Var>, cache: Option<Matrix<T>> },
}

impl<T: Scalar> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulT(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | InterleaveRows(a, b) => {
                vec![*a, *b]
            }
            Transpose(a) | Scale(a, _) | AddScalar(a) | Sigmoid(a) | Tanh(a) | Relu(a) | SoftmaxRows(a) | Sum(a)
            | Mean(a) | SliceRows(a, _) | SliceCols(a, _) | GatherRows(a, _) | AvgPoolRows(a, _) | Rdft(a)
            | Irdft(a) | InterpCols(a) | BceWithLogits(a, _) => vec![*a],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
            Conv1d { x, w, b, .. } => vec![*x, *w, *b],
            ComplexFilter { spec, wre, wim, .. } => vec![*spec, *wre, *wim],
            Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Matrix<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    rules: HashMap<String, Arc<dyn CustomRule<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            rules: HashMap::new(),
        }
    }

    pub fn register(&mut self, rule: Arc<dyn CustomRule<T>>) {
        self.rules.insert(rule.name().to_string(), rule);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`, so a tape holding
    /// bound parameters can be reused across independent forward passes.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, op: Op<T>, value: Matrix<T>) -> Var {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let v = self.value(a).matmul(self.value(b));
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// `a @ bᵀ`; with `b` a `[out x in]` weight this is a linear layer.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(shape_err("matmul_t", format!("{sa:?} @ {sb:?}ᵀ")));
        }
        let v = self.value(a).matmul_t(self.value(b));
        Ok(self.push(Op::MatMulT(a, b), v))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Matrix<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, format!("{sa:?} vs {sb:?}")));
        }
        Ok(self.value(a).zip_map(self.value(b), f))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// Adds the `[1 x c]` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb != (1, sx.1) {
            return Err(shape_err("add_row", format!("{sx:?} + {sb:?}")));
        }
        let mut v = self.value(x).clone();
        let brow = self.value(b).row(0).to_vec();
        for r in 0..sx.0 {
            for (o, &bv) in v.row_mut(r).iter_mut().zip(&brow) {
                *o += bv;
            }
        }
        Ok(self.push(Op::AddRow(x, b), v))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).scale(k);
        self.push(Op::Scale(a, k), v)
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(Op::AddScalar(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(Op::Tanh(a), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(Op::Relu(a), v)
    }

    /// Softmax across the columns of each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut v = src.clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::scalar(m.sum() / T::from_usize_lossy(m.len().max(1)));
        self.push(Op::Mean(a), v)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > r {
            return Err(shape_err("slice_rows", format!("{start}..{end} of {r} rows")));
        }
        let src = self.value(a);
        let v = Matrix::from_vec(end - start, c, src.as_slice()[start * c..end * c].to_vec())?;
        Ok(self.push(Op::SliceRows(a, start), v))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > c {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {c} cols")));
        }
        let src = self.value(a);
        let v = Matrix::from_fn(r, end - start, |i, j| src[(i, start + j)]);
        Ok(self.push(Op::SliceCols(a, start), v))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.shape(p).1).ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != c {
                return Err(shape_err("concat_rows", format!("{} vs {c} cols", m.cols())));
            }
            rows += m.rows();
            data.extend_from_slice(m.as_slice());
        }
        let v = Matrix::from_vec(rows, c, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.shape(p).0).ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(shape_err("concat_cols", format!("{pr} vs {r} rows")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut v = Matrix::zeros(r, total);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let m = self.value(p);
            for i in 0..r {
                v.row_mut(i)[off..off + w].copy_from_slice(m.row(i));
            }
            off += w;
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v))
    }

    /// Row `i` of the output is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} of {r}")));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(src.row(i));
        }
        let v = Matrix::from_vec(idx.len(), c, data)?;
        Ok(self.push(Op::GatherRows(a, idx), v))
    }

    /// Rows alternate `even[0], odd[0], even[1], ...`, truncated to `len` rows
    /// (`len` is `2N` or `2N - 1`).
    pub fn interleave_rows(&mut self, even: Var, odd: Var, len: usize) -> Result<Var> {
        let (se, so) = (self.shape(even), self.shape(odd));
        if se != so || !(len == 2 * se.0 || len + 1 == 2 * se.0) {
            return Err(shape_err("interleave_rows", format!("{se:?} and {so:?} into {len} rows")));
        }
        let (e, o) = (self.value(even), self.value(odd));
        let mut data = Vec::with_capacity(len * se.1);
        for r in 0..len {
            let src = if r % 2 == 0 { e } else { o };
            data.extend_from_slice(src.row(r / 2));
        }
        let v = Matrix::from_vec(len, se.1, data)?;
        Ok(self.push(Op::InterleaveRows(even, odd), v))
    }

    /// 1-D convolution over time with zero "same" padding.
    ///
    /// `x` is `[L x c_in]`, `w` is `[c_out x kernel·c_in]` with the column
    /// index `tap·c_in + channel`, `b` is `[1 x c_out]`. Output has
    /// `⌈L/stride⌉` rows.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (l, cin) = self.shape(x);
        let (cout, wk) = self.shape(w);
        if kernel == 0 || stride == 0 || wk != kernel * cin || self.shape(b) != (1, cout) {
            return Err(shape_err(
                "conv1d",
                format!("x {:?}, w {:?}, b {:?}, kernel {kernel}, stride {stride}", (l, cin), (cout, wk), self.shape(b)),
            ));
        }
        let cols = im2col(self.value(x), kernel, stride);
        let mut v = cols.matmul_t(self.value(w));
        let brow = self.value(b).row(0).to_vec();
        for r in 0..v.rows() {
            for (o, &bv) in v.row_mut(r).iter_mut().zip(&brow) {
                *o += bv;
            }
        }
        Ok(self.push(Op::Conv1d { x, w, b, kernel, stride, cols }, v))
    }

    /// Non-overlapping mean pooling over rows; a short trailing window is
    /// averaged over the rows it has.
    pub fn avg_pool_rows(&mut self, a: Var, width: usize) -> Result<Var> {
        let (l, c) = self.shape(a);
        if width == 0 || l == 0 {
            return Err(shape_err("avg_pool_rows", format!("{l} rows, width {width}")));
        }
        let out_len = l.div_ceil(width);
        let src = self.value(a);
        let mut v = Matrix::zeros(out_len, c);
        for o in 0..out_len {
            let (s, e) = (o * width, ((o + 1) * width).min(l));
            let inv = T::one() / T::from_usize_lossy(e - s);
            for r in s..e {
                for (dst, &x) in v.row_mut(o).iter_mut().zip(src.row(r)) {
                    *dst += x * inv;
                }
            }
        }
        Ok(self.push(Op::AvgPoolRows(a, width), v))
    }

    /// Per-row real DFT into packed half-spectrum layout.
    pub fn rdft(&mut self, a: Var) -> Result<Var> {
        let v = spectral::rdft_packed(self.value(a))?;
        Ok(self.push(Op::Rdft(a), v))
    }

    /// Per-row inverse of [`Tape::rdft`] for signals of length `n`.
    pub fn irdft(&mut self, a: Var, n: usize) -> Result<Var> {
        let v = spectral::irdft_packed(self.value(a), n)?;
        Ok(self.push(Op::Irdft(a), v))
    }

    /// Complex multiply of a packed spectrum by `wre + j·wim` (`[d x ⌈n/2⌉]`).
    pub fn complex_filter(&mut self, spec: Var, wre: Var, wim: Var, n: usize) -> Result<Var> {
        let v = spectral::filter_packed(self.value(spec), self.value(wre), self.value(wim), n)?;
        Ok(self.push(Op::ComplexFilter { spec, wre, wim, n }, v))
    }

    /// Linear resampling of every row to `target` columns.
    pub fn interp_cols(&mut self, a: Var, target: usize) -> Result<Var> {
        let v = spectral::interpolate_rows(self.value(a), target)?;
        Ok(self.push(Op::InterpCols(a), v))
    }

    /// Mean binary cross-entropy of logits `z` (any shape, flattened) against
    /// `labels` in `{0, 1}`.
    pub fn bce_with_logits(&mut self, z: Var, labels: Vec<T>) -> Result<Var> {
        let m = self.value(z);
        if m.len() != labels.len() || labels.is_empty() {
            return Err(shape_err("bce_with_logits", format!("{} logits, {} labels", m.len(), labels.len())));
        }
        let n = T::from_usize_lossy(labels.len());
        let loss = m
            .as_slice()
            .iter()
            .zip(&labels)
            .map(|(&zi, &yi)| softplus(zi) - yi * zi)
            .sum::<T>()
            / n;
        Ok(self.push(Op::BceWithLogits(z, labels), Matrix::scalar(loss)))
    }

    /// Applies a registered custom primitive.
    pub fn custom(&mut self, name: &str, inputs: &[Var]) -> Result<Var> {
        let rule = self
            .rules
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnregisteredPrimitive(name.to_string()))?;
        let vals: Vec<&Matrix<T>> = inputs.iter().map(|&i| self.value(i)).collect();
        let (v, cache) = rule.forward(&vals)?;
        Ok(self.push(Op::Custom { rule, inputs: inputs.to_vec(), cache }, v))
    }

    /// Sum of scalar nodes.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let stacked = self.concat_rows(parts)?;
        Ok(self.sum(stacked))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(shape_err("backward", format!("terminal node is {:?}, not scalar", self.shape(loss))));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Matrix<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_t(val(*b)));
                acc(*b, val(*a).t_matmul(g));
            }
            Op::MatMulT(a, b) => {
                acc(*a, g.matmul(val(*b)));
                acc(*b, g.t_matmul(val(*a)));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(x, b) => {
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*x, g.clone());
                acc(*b, gb);
            }
            Op::Scale(a, k) => acc(*a, g.scale(*k)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Sigmoid(a) => acc(*a, g.zip_map(y, |gv, s| gv * s * (T::one() - s))),
            Op::Tanh(a) => acc(*a, g.zip_map(y, |gv, t| gv * (T::one() - t * t))),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |gv, x| if x > T::zero() { gv } else { T::zero() })),
            Op::SoftmaxRows(a) => {
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                    for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - inner);
                    }
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                let k = g.item() / T::from_usize_lossy((r * c).max(1));
                acc(*a, Matrix::filled(r, c, k));
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                d.as_mut_slice()[start * c..(start + g.rows()) * c].copy_from_slice(g.as_slice());
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let d = Matrix::from_vec(r, c, g.as_slice()[off * c..(off + r) * c].to_vec())?;
                    acc(p, d);
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let d = Matrix::from_fn(r, c, |i, j| g[(i, off + j)]);
                    acc(p, d);
                    off += c;
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for (o, &i) in idx.iter().enumerate() {
                    for (dst, &v) in d.row_mut(i).iter_mut().zip(g.row(o)) {
                        *dst += v;
                    }
                }
                acc(*a, d);
            }
            Op::InterleaveRows(e, o) => {
                let (n, c) = val(*e).shape();
                let mut de = Matrix::zeros(n, c);
                let mut dodd = Matrix::zeros(n, c);
                for r in 0..g.rows() {
                    let dst = if r % 2 == 0 { &mut de } else { &mut dodd };
                    dst.row_mut(r / 2).copy_from_slice(g.row(r));
                }
                acc(*e, de);
                acc(*o, dodd);
            }
            Op::Conv1d { x, w, b, kernel, stride, cols } => {
                let (l, cin) = val(*x).shape();
                if self.nodes[w.0].needs_grad {
                    acc(*w, g.t_matmul(cols));
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*b, gb);
                }
                if self.nodes[x.0].needs_grad {
                    let gcols = g.matmul(val(*w));
                    acc(*x, col2im(&gcols, l, cin, *kernel, *stride));
                }
            }
            Op::AvgPoolRows(a, width) => {
                let (l, c) = val(*a).shape();
                let mut d = Matrix::zeros(l, c);
                for o in 0..g.rows() {
                    let (s, e) = (o * width, ((o + 1) * width).min(l));
                    let inv = T::one() / T::from_usize_lossy(e - s);
                    for r in s..e {
                        for (dst, &v) in d.row_mut(r).iter_mut().zip(g.row(o)) {
                            *dst = v * inv;
                        }
                    }
                }
                acc(*a, d);
            }
            Op::Rdft(a) => {
                let n = val(*a).cols();
                acc(*a, spectral::rdft_adjoint(g, n)?);
            }
            Op::Irdft(a) => acc(*a, spectral::irdft_adjoint(g)?),
            Op::ComplexFilter { spec, wre, wim, n } => {
                let (p, wr, wi) = (val(*spec), val(*wre), val(*wim));
                let k = spectral::half_len(*n);
                let even = n % 2 == 0;
                let mut dp = Matrix::zeros(p.rows(), p.cols());
                let mut dwr = Matrix::zeros(wr.rows(), wr.cols());
                let mut dwi = Matrix::zeros(wi.rows(), wi.cols());
                for r in 0..p.rows() {
                    let (pr, gr, wrr, wir) = (p.row(r), g.row(r), wr.row(r), wi.row(r));
                    for i in 0..k {
                        let (a, b) = (pr[i], pr[k + i]);
                        let (gre, gim) = (gr[i], gr[k + i]);
                        dp[(r, i)] = gre * wrr[i] + gim * wir[i];
                        dp[(r, k + i)] = gim * wrr[i] - gre * wir[i];
                        dwr[(r, i)] = gre * a + gim * b;
                        dwi[(r, i)] = gim * a - gre * b;
                    }
                    if even {
                        dp[(r, 2 * k)] = gr[2 * k] * wrr[k - 1];
                        dwr[(r, k - 1)] += gr[2 * k] * pr[2 * k];
                    }
                }
                acc(*spec, dp);
                acc(*wre, dwr);
                acc(*wim, dwi);
            }
            Op::InterpCols(a) => {
                let (r, l) = val(*a).shape();
                if l == g.cols() {
                    acc(*a, g.clone());
                } else {
                    let taps = spectral::interp_taps::<T>(l, g.cols());
                    let mut d = Matrix::zeros(r, l);
                    for i in 0..r {
                        for (c, t) in taps.iter().enumerate() {
                            let gv = g[(i, c)];
                            d[(i, t.lo)] += gv * (T::one() - t.frac);
                            d[(i, t.hi)] += gv * t.frac;
                        }
                    }
                    acc(*a, d);
                }
            }
            Op::BceWithLogits(z, labels) => {
                let zm = val(*z);
                let k = g.item() / T::from_usize_lossy(labels.len());
                let data = zm.as_slice().iter().zip(labels).map(|(&zi, &yi)| (sigmoid(zi) - yi) * k).collect();
                acc(*z, Matrix::from_vec(zm.rows(), zm.cols(), data)?);
            }
            Op::Custom { rule, inputs, cache } => {
                let vals: Vec<&Matrix<T>> = inputs.iter().map(|&i| val(i)).collect();
                let ds = rule.backward(&vals, y, cache.as_ref(), g)?;
                if ds.len() != inputs.len() {
                    return Err(shape_err("custom backward", format!("{} cotangents for {} inputs", ds.len(), inputs.len())));
                }
                for (&i, d) in inputs.iter().zip(ds) {
                    acc(i, d);
                }
            }
        }
        Ok(())
    }
}

pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros of `like`'s shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix<T>) -> Matrix<T> {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn im2col<T: Scalar>(x: &Matrix<T>, kernel: usize, stride: usize) -> Matrix<T> {
    let (l, cin) = x.shape();
    let pad = (kernel - 1) / 2;
    let out_len = l.div_ceil(stride);
    let mut cols = Matrix::zeros(out_len, kernel * cin);
    for o in 0..out_len {
        let t = o * stride;
        for tap in 0..kernel {
            let src = t + tap;
            if src < pad || src - pad >= l {
                continue;
            }
            cols.row_mut(o)[tap * cin..(tap + 1) * cin].copy_from_slice(x.row(src - pad));
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &Matrix<T>, l: usize, cin: usize, kernel: usize, stride: usize) -> Matrix<T> {
    let pad = (kernel - 1) / 2;
    let mut x = Matrix::zeros(l, cin);
    for o in 0..cols.rows() {
        let t = o * stride;
        for tap in 0..kernel {
            let src = t + tap;
            if src < pad || src - pad >= l {
                continue;
            }
            let seg = &cols.row(o)[tap * cin..(tap + 1) * cin];
            for (d, &v) in x.row_mut(src - pad).iter_mut().zip(seg) {
                *d += v;
            }
        }
    }
    x
}

/// Runs `program` on a fresh tape with `params` bound as trainable leaves and
/// returns the scalar it produces together with the gradient for every
/// parameter (zeros where no gradient flowed).
pub fn value_and_grad<T, F>(params: &[Matrix<T>], program: F) -> Result<(T, Vec<Matrix<T>>)>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = program(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let out = vars.iter().zip(params).map(|(&v, p)| grads.get_or_zeros(v, p)).collect();
    Ok((tape.scalar(loss), out))
}
