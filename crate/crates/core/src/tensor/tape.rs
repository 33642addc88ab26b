use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{gemm, Strides};
use super::params::{GradStore, ParamId, ParamStore};
use super::{rows_cols, Result, Tensor, TensorError};

/// Epsilon added to the variance inside [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    SoftmaxRows(Var),
    SegmentSoftmax(Var, Arc<[usize]>, usize),
    SegmentSum(Var, Arc<[usize]>),
    HeadDot(Var, Var, usize),
    HeadScale(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Log1mExp(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SqNorm(Var),
    Cosine(Var, Var),
    AddN(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Record of executed primitives for one forward pass.
///
/// Values are immutable once recorded. Gradients accumulate (`+=`) into the
/// leaves that require them each time [`Tape::backward`] runs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if it requires one and backward ran.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(Arc::new(t), false)
    }

    /// Records a leaf that collects gradients.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_leaf(Arc::new(t), true)
    }

    /// Records parameter `id` of `store` as a gradient leaf. Repeated calls with
    /// the same id return the same variable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_leaf(store.shared(id), true);
        self.params.insert(id, v);
        v
    }

    /// Adds the gradients of every parameter leaf into `grads`.
    pub fn collect_param_grads(&self, grads: &mut GradStore) {
        for (&id, &v) in &self.params {
            if let Some(g) = &self.nodes[v.0].grad {
                grads.accumulate(id, g);
            }
        }
    }

    /// Clears leaf gradients.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(TensorError::Invalid {
                op,
                msg: format!("expected a matrix, got shape {s:?}"),
            }),
        }
    }

    // ---- primitives -----------------------------------------------------

    /// `a: [m, k] x b: [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Strides::row_major(k),
            self.value(b).data(),
            Strides::row_major(n),
            0.0,
            &mut out,
        );
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", Tensor::from_parts(vec![n, m], out), Op::Transpose(a), &[a])
    }

    /// Elementwise sum of equal-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.mismatch(op, a, b));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    /// Adds a length-`n` vector to every row of `a` (`[.., n]`).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.value(a).rows_cols();
        if self.value(row).numel() != n {
            return Err(self.mismatch("add_row", a, row));
        }
        let r = self.value(row).data();
        let ta = self.value(a);
        let data = ta
            .data()
            .chunks(n.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| scale * x + shift).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("affine", out, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var> {
        self.affine(a, scale, 0.0)
    }

    /// Concatenates along the last axis. All inputs must agree on the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid {
                op: "concat_cols",
                msg: "no inputs".into(),
            });
        };
        let (rows, _) = self.value(first).rows_cols();
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).rows_cols();
            if r != rows {
                return Err(self.mismatch("concat_cols", first, p));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let all_vectors = parts.iter().all(|&p| self.shape(p).len() == 1);
        let shape = if all_vectors { vec![total] } else { vec![rows, total] };
        self.push(
            "concat_cols",
            Tensor::from_parts(shape, data),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("slice_cols", a)?;
        if start + width > cols {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of range for {cols}", start + width),
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + width]);
        }
        self.push(
            "slice_cols",
            Tensor::from_parts(vec![rows, width], data),
            Op::SliceCols(a, start),
            &[a],
        )
    }

    /// Selects rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("gather_rows", a)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {rows} rows"),
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![index.len(), cols], data),
            Op::GatherRows(a, index.into()),
            &[a],
        )
    }

    /// Row-wise softmax of `a + mask`. Mask entries must be `0` or `-inf`;
    /// masked positions receive exactly zero weight.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[f64]>) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.rows_cols();
        if let Some(m) = mask {
            if m.len() != ta.numel() {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_rows",
                    lhs: ta.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
            if m.iter().any(|&x| !(x == 0.0 || x == f64::NEG_INFINITY)) {
                return Err(TensorError::Invalid {
                    op: "softmax_rows",
                    msg: "mask entries must be 0 or -inf".into(),
                });
            }
        }
        let x = ta.data();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let span = r * cols..(r + 1) * cols;
            let masked = |j: usize| mask.is_some_and(|m| m[j] == f64::NEG_INFINITY);
            let max = span
                .clone()
                .filter(|&j| !masked(j))
                .map(|j| x[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::Invalid {
                    op: "softmax_rows",
                    msg: format!("row {r} is fully masked"),
                });
            }
            let mut total = 0.0;
            for j in span.clone() {
                if !masked(j) {
                    out[j] = (x[j] - max).exp();
                    total += out[j];
                }
            }
            for j in span {
                out[j] /= total;
            }
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), out);
        self.push("softmax_rows", out, Op::SoftmaxRows(a), &[a])
    }

    /// Softmax over the rows of `a: [r, h]` that share a segment id, separately
    /// for each column. `segment[i] < segments` names the group of row `i`.
    pub fn segment_softmax(&mut self, a: Var, segment: &[usize], segments: usize) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.rows_cols();
        check_segments("segment_softmax", rows, segment, segments)?;
        let x = ta.data();
        let mut max = vec![f64::NEG_INFINITY; segments * cols];
        for (r, &s) in segment.iter().enumerate() {
            for c in 0..cols {
                let m = &mut max[s * cols + c];
                *m = m.max(x[r * cols + c]);
            }
        }
        let mut out = vec![0.0; x.len()];
        let mut total = vec![0.0; segments * cols];
        for (r, &s) in segment.iter().enumerate() {
            for c in 0..cols {
                let e = (x[r * cols + c] - max[s * cols + c]).exp();
                out[r * cols + c] = e;
                total[s * cols + c] += e;
            }
        }
        for (r, &s) in segment.iter().enumerate() {
            for c in 0..cols {
                out[r * cols + c] /= total[s * cols + c];
            }
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), out);
        self.push(
            "segment_softmax",
            out,
            Op::SegmentSoftmax(a, segment.into(), segments),
            &[a],
        )
    }

    /// Sums the rows of `a: [r, c]` into `segments` output rows.
    pub fn segment_sum(&mut self, a: Var, segment: &[usize], segments: usize) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.rows_cols();
        check_segments("segment_sum", rows, segment, segments)?;
        let x = ta.data();
        let mut out = vec![0.0; segments * cols];
        for (r, &s) in segment.iter().enumerate() {
            for c in 0..cols {
                out[s * cols + c] += x[r * cols + c];
            }
        }
        self.push(
            "segment_sum",
            Tensor::from_parts(vec![segments, cols], out),
            Op::SegmentSum(a, segment.into()),
            &[a],
        )
    }

    /// Per-head row dot products: `q, k: [r, d]` with `d = heads * dh` give
    /// `[r, heads]` where entry `(i, h)` sums `q[i, c] * k[i, c]` over head `h`.
    pub fn head_dot(&mut self, q: Var, k: Var, heads: usize) -> Result<Var> {
        let (tq, tk) = (self.value(q), self.value(k));
        if tq.shape() != tk.shape() {
            return Err(self.mismatch("head_dot", q, k));
        }
        let (rows, d) = tq.rows_cols();
        let dh = head_width("head_dot", d, heads)?;
        let (xq, xk) = (tq.data(), tk.data());
        let mut out = vec![0.0; rows * heads];
        for r in 0..rows {
            for h in 0..heads {
                let span = r * d + h * dh..r * d + (h + 1) * dh;
                out[r * heads + h] = xq[span.clone()].iter().zip(&xk[span]).map(|(a, b)| a * b).sum();
            }
        }
        self.push(
            "head_dot",
            Tensor::from_parts(vec![rows, heads], out),
            Op::HeadDot(q, k, heads),
            &[q, k],
        )
    }

    /// Scales each head block of `values: [r, d]` by `weights: [r, heads]`.
    pub fn head_scale(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (tw, tv) = (self.value(weights), self.value(values));
        let (rows, heads) = tw.rows_cols();
        let (vrows, d) = tv.rows_cols();
        if rows != vrows {
            return Err(self.mismatch("head_scale", weights, values));
        }
        let dh = head_width("head_scale", d, heads)?;
        let (w, v) = (tw.data(), tv.data());
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            for c in 0..d {
                out[r * d + c] = w[r * heads + c / dh] * v[r * d + c];
            }
        }
        let shape = tv.shape().to_vec();
        self.push(
            "head_scale",
            Tensor::from_parts(shape, out),
            Op::HeadScale(weights, values),
            &[weights, values],
        )
    }

    /// Row-wise layer normalization followed by `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.rows_cols();
        if self.value(gamma).numel() != cols {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        if self.value(beta).numel() != cols {
            return Err(self.mismatch("layer_norm", x, beta));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let src = tx.data();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = g[c] * h + b[c];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map("relu", a, |x| x.max(0.0))?;
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.map("exp", a, f64::exp)?;
        self.push("exp", out, Op::Exp(a), &[a])
    }

    /// Natural log; non-positive inputs are an error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.map("log", a, f64::ln)?;
        self.push("log", out, Op::Log(a), &[a])
    }

    /// `log(1 - exp(-x))` evaluated as `log(-expm1(-x))`; requires `x > 0`.
    pub fn log1mexp(&mut self, a: Var) -> Result<Var> {
        let out = self.map("log1mexp", a, |x| (-(-x).exp_m1()).ln())?;
        self.push("log1mexp", out, Op::Log1mExp(a), &[a])
    }

    /// Clamps into `[lo, hi]`; clamped entries pass no gradient.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.map("clamp", a, |x| x.clamp(lo, hi))?;
        self.push("clamp", out, Op::Clamp(a, lo, hi), &[a])
    }

    fn map(&self, _op: &'static str, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let ta = self.value(a);
        Ok(Tensor::from_parts(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| f(x)).collect(),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::from_parts(Vec::new(), vec![s]), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "empty input".into(),
            });
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::from_parts(Vec::new(), vec![s]), Op::Mean(a), &[a])
    }

    /// Squared Euclidean norm of all entries.
    pub fn sq_norm(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.push("sq_norm", Tensor::from_parts(Vec::new(), vec![s]), Op::SqNorm(a), &[a])
    }

    /// Cosine similarity of two equal-length tensors. A zero-norm input gives
    /// similarity 0 and no gradient.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(self.mismatch("cosine", a, b));
        }
        let (dot, na, nb) = cosine_parts(ta.data(), tb.data());
        let c = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
        self.push("cosine", Tensor::from_parts(Vec::new(), vec![c]), Op::Cosine(a, b), &[a, b])
    }

    /// Elementwise sum of any number of equal-shaped tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid {
                op: "add_n",
                msg: "no inputs".into(),
            });
        };
        let mut acc = self.value(first).data().to_vec();
        for &p in &parts[1..] {
            if self.shape(p) != self.shape(first) {
                return Err(self.mismatch("add_n", first, p));
            }
            acc.iter_mut().zip(self.value(p).data()).for_each(|(a, b)| *a += b);
        }
        let shape = self.shape(first).to_vec();
        self.push("add_n", Tensor::from_parts(shape, acc), Op::AddN(parts.to_vec()), parts)
    }

    // ---- reverse pass ---------------------------------------------------

    /// Accumulates `d root / d leaf` into every reachable leaf that requires a
    /// gradient. `root` must hold exactly one element.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(root).to_vec()));
        }
        self.backward_seeded(&[(root, &[1.0])])
    }

    /// Vector-Jacobian product: propagates the given output adjoints.
    pub fn backward_seeded(&mut self, seeds: &[(Var, &[f64])]) -> Result<()> {
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for &(v, g) in seeds {
            let n = self.value(v).numel();
            if g.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "backward",
                    lhs: self.shape(v).to_vec(),
                    rhs: vec![g.len()],
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; n]);
            slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let n = nodes[v.0].value.numel();
                f(adj[v.0].get_or_insert_with(|| vec![0.0; n]));
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(nodes[a.0].value.shape());
                let n = out.shape()[1];
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |da| {
                    gemm(m, n, k, g, Strides::row_major(n), vb, Strides::transposed(n), 1.0, da)
                });
                acc(*b, &mut |db| {
                    gemm(k, m, n, va, Strides::transposed(k), g, Strides::row_major(n), 1.0, db)
                });
            }
            Op::Transpose(a) => {
                let (m, n) = rows_cols(nodes[a.0].value.shape());
                acc(*a, &mut |da| {
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * vb[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * va[j];
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |d| add_into(d, g));
                let n = nodes[row.0].value.numel();
                acc(*row, &mut |d| {
                    for chunk in g.chunks(n.max(1)) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Affine(a, s) => acc(*a, &mut |d| {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
            }),
            Op::ConcatCols(parts) => {
                let (rows, total) = out.rows_cols();
                let mut offset = 0;
                for p in parts {
                    let (_, c) = nodes[p.0].value.rows_cols();
                    acc(*p, &mut |d| {
                        for r in 0..rows {
                            add_into(&mut d[r * c..(r + 1) * c], &g[r * total + offset..r * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, width) = out.rows_cols();
                let (_, cols) = nodes[a.0].value.rows_cols();
                acc(*a, &mut |d| {
                    for r in 0..rows {
                        add_into(
                            &mut d[r * cols + start..r * cols + start + width],
                            &g[r * width..(r + 1) * width],
                        );
                    }
                });
            }
            Op::GatherRows(a, index) => {
                let (_, cols) = nodes[a.0].value.rows_cols();
                acc(*a, &mut |d| {
                    for (k, &r) in index.iter().enumerate() {
                        add_into(&mut d[r * cols..(r + 1) * cols], &g[k * cols..(k + 1) * cols]);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (rows, cols) = out.rows_cols();
                let y = out.data();
                acc(*a, &mut |d| {
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = span.clone().map(|j| y[j] * g[j]).sum();
                        for j in span {
                            d[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::SegmentSoftmax(a, segment, segments) => {
                let (_, cols) = out.rows_cols();
                let y = out.data();
                let mut dot = vec![0.0; segments * cols];
                for (r, &s) in segment.iter().enumerate() {
                    for c in 0..cols {
                        dot[s * cols + c] += y[r * cols + c] * g[r * cols + c];
                    }
                }
                acc(*a, &mut |d| {
                    for (r, &s) in segment.iter().enumerate() {
                        for c in 0..cols {
                            let j = r * cols + c;
                            d[j] += y[j] * (g[j] - dot[s * cols + c]);
                        }
                    }
                });
            }
            Op::SegmentSum(a, segment) => {
                let (_, cols) = out.rows_cols();
                acc(*a, &mut |d| {
                    for (r, &s) in segment.iter().enumerate() {
                        add_into(&mut d[r * cols..(r + 1) * cols], &g[s * cols..(s + 1) * cols]);
                    }
                });
            }
            Op::HeadDot(q, k, heads) => {
                let (rows, d) = nodes[q.0].value.rows_cols();
                let dh = d / heads;
                let (vq, vk) = (nodes[q.0].value.data(), nodes[k.0].value.data());
                acc(*q, &mut |dq| {
                    for r in 0..rows {
                        for c in 0..d {
                            dq[r * d + c] += g[r * heads + c / dh] * vk[r * d + c];
                        }
                    }
                });
                acc(*k, &mut |dk| {
                    for r in 0..rows {
                        for c in 0..d {
                            dk[r * d + c] += g[r * heads + c / dh] * vq[r * d + c];
                        }
                    }
                });
            }
            Op::HeadScale(w, v) => {
                let (rows, heads) = nodes[w.0].value.rows_cols();
                let (_, d) = nodes[v.0].value.rows_cols();
                let dh = d / heads;
                let (vw, vv) = (nodes[w.0].value.data(), nodes[v.0].value.data());
                acc(*w, &mut |dw| {
                    for r in 0..rows {
                        for c in 0..d {
                            dw[r * heads + c / dh] += g[r * d + c] * vv[r * d + c];
                        }
                    }
                });
                acc(*v, &mut |dv| {
                    for r in 0..rows {
                        for c in 0..d {
                            dv[r * d + c] += g[r * d + c] * vw[r * heads + c / dh];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = out.rows_cols();
                let gam = nodes[gamma.0].value.data();
                acc(*beta, &mut |db| {
                    for r in 0..rows {
                        add_into(db, &g[r * cols..(r + 1) * cols]);
                    }
                });
                acc(*gamma, &mut |dg| {
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                });
                acc(*x, &mut |dx| {
                    let n = cols as f64;
                    for r in 0..rows {
                        let mut sum = 0.0;
                        let mut sum_h = 0.0;
                        for c in 0..cols {
                            let dh = g[r * cols + c] * gam[c];
                            sum += dh;
                            sum_h += dh * xhat[r * cols + c];
                        }
                        for c in 0..cols {
                            let j = r * cols + c;
                            let dh = g[j] * gam[c];
                            dx[j] += inv_std[r] / n * (n * dh - sum - xhat[j] * sum_h);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let va = nodes[a.0].value.data();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        if va[j] > 0.0 {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = out.data();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * y[j];
                    }
                });
            }
            Op::Log(a) => {
                let va = nodes[a.0].value.data();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] / va[j];
                    }
                });
            }
            Op::Log1mExp(a) => {
                let va = nodes[a.0].value.data();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] / va[j].exp_m1();
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let va = nodes[a.0].value.data();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        if va[j] > *lo && va[j] < *hi {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.numel() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::SqNorm(a) => {
                let va = nodes[a.0].value.data();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += 2.0 * g[0] * va[j];
                    }
                });
            }
            Op::Cosine(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let (dot, na, nb) = cosine_parts(va, vb);
                if na > 0.0 && nb > 0.0 {
                    let c = dot / (na * nb);
                    acc(*a, &mut |d| {
                        for j in 0..d.len() {
                            d[j] += g[0] * (vb[j] / (na * nb) - c * va[j] / (na * na));
                        }
                    });
                    acc(*b, &mut |d| {
                        for j in 0..d.len() {
                            d[j] += g[0] * (va[j] / (na * nb) - c * vb[j] / (nb * nb));
                        }
                    });
                } else {
                    acc(*a, &mut |_| {});
                    acc(*b, &mut |_| {});
                }
            }
            Op::AddN(parts) => {
                for p in parts {
                    acc(*p, &mut |d| add_into(d, g));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn cosine_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let dot = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot, na, nb)
}

fn check_segments(op: &'static str, rows: usize, segment: &[usize], segments: usize) -> Result<()> {
    if segment.len() != rows {
        return Err(TensorError::Invalid {
            op,
            msg: format!("{} segment ids for {rows} rows", segment.len()),
        });
    }
    if let Some(&bad) = segment.iter().find(|&&s| s >= segments) {
        return Err(TensorError::Invalid {
            op,
            msg: format!("segment id {bad} out of range for {segments} segments"),
        });
    }
    Ok(())
}

fn head_width(op: &'static str, d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(TensorError::Invalid {
            op,
            msg: format!("width {d} is not divisible into {heads} heads"),
        });
    }
    Ok(d / heads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_right_factor() {
        let mut tape = Tape::new();
        let a = tape.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let i = tape.constant(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_symmetric_and_masked() {
        let mut tape = Tape::new();
        let x = tape.constant(vec_t(&[0.0, 0.0]));
        let s = tape.softmax_rows(x, Some(&[0.0, 0.0])).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let y = tape.constant(vec_t(&[5.0, 5.0]));
        let s = tape.softmax_rows(y, Some(&[0.0, f64::NEG_INFINITY])).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_bad_mask_and_full_mask() {
        let mut tape = Tape::new();
        let x = tape.constant(vec_t(&[1.0, 2.0]));
        assert!(tape.softmax_rows(x, Some(&[0.0, 1.0])).is_err());
        let inf = f64::NEG_INFINITY;
        assert!(tape.softmax_rows(x, Some(&[inf, inf])).is_err());
    }

    #[test]
    fn sq_norm_of_three_four() {
        let mut tape = Tape::new();
        let x = tape.constant(vec_t(&[3.0, 4.0]));
        let n = tape.sq_norm(x).unwrap();
        assert_eq!(tape.value(n).item().unwrap(), 25.0);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_t(&[1.0, 2.0, 3.0]));
        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum(xx).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_chain_rule_through_difference() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec_t(&[1.0, 0.0]));
        let b = tape.leaf(vec_t(&[0.0, 0.0]));
        let d = tape.sub(a, b).unwrap();
        let n = tape.sq_norm(d).unwrap();
        tape.backward(n).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0, 0.0]);
        assert_eq!(tape.grad(b).unwrap(), &[-2.0, 0.0]);
    }

    #[test]
    fn backward_twice_accumulates_double() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_t(&[0.5, -1.5]));
        let e = tape.exp(x).unwrap();
        let s = tape.sum(e).unwrap();
        tape.backward(s).unwrap();
        let once = tape.grad(x).unwrap().to_vec();
        tape.backward(s).unwrap();
        let twice = tape.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_t(&[1.0, 2.0]));
        let y = tape.exp(x).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn unreachable_leaf_grad_untouched() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_t(&[1.0]));
        let unused = tape.leaf(vec_t(&[7.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(unused).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn log_of_non_positive_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(vec_t(&[0.0]));
        assert!(matches!(tape.log(x), Err(TensorError::NonFinite { op: "log" })));
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[vec![1.0, 2.0, 3.0, 10.0], vec![-4.0, 0.5, 0.25, 2.0]]));
        let g = tape.constant(Tensor::filled(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let out = tape.value(y);
        for r in 0..2 {
            let row = out.row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() <= 1e-9);
            assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn cosine_zero_norm_is_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec_t(&[0.0, 0.0]));
        let b = tape.leaf(vec_t(&[1.0, 0.0]));
        let c = tape.cosine(a, b).unwrap();
        assert_eq!(tape.value(c).item().unwrap(), 0.0);
        tape.backward(c).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn segment_softmax_matches_groupwise_softmax() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[vec![1.0], vec![2.0], vec![0.5], vec![3.0]]));
        let s = tape.segment_softmax(x, &[0, 1, 0, 1], 2).unwrap();
        let v = tape.value(s).data();
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-15);
        assert!((v[0] / v[2] - (0.5f64).exp()).abs() < 1e-12);
    }
}
