//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation evaluates eagerly and appends a node; node ids are indices
//! into the tape, so inputs always precede the operations that consume them and
//! a single reverse sweep visits nodes in a valid order.
//!
//! Sequence ops (`causal_conv1d_seq`, `masked_softmax`, `block_matmul*`) take
//! a batch of equal-length sequences stacked row-wise: `B·L` rows, each block of
//! `L` rows being one sequence.

use std::f64::consts::PI;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use super::{AutodiffError, Result};
use crate::sparsity::MaskMatrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

type ScalarFn = Box<dyn Fn(f64) -> f64 + Send + Sync>;

enum Op {
    Constant,
    Param(ParamId),
    MatMul { a: NodeId, b: NodeId },
    Affine { x: NodeId, w: NodeId, bias: NodeId },
    CausalConv { x: NodeId, kernel: NodeId, bias: NodeId, taps: usize, seq_len: usize, unfolded: Vec<f64> },
    BlockMatMulNt { a: NodeId, b: NodeId, seq_len: usize },
    BlockMatMul { a: NodeId, b: NodeId, seq_len: usize },
    MaskedSoftmax { x: NodeId, mask: Arc<MaskMatrix> },
    LayerNorm { x: NodeId, gain: NodeId, shift: NodeId, normalized: Vec<f64>, inv_std: Vec<f64> },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    AddConst { x: NodeId },
    Relu { x: NodeId },
    Softplus { x: NodeId },
    Map { x: NodeId, derivative: ScalarFn },
    Sum { x: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { x: NodeId, start: usize },
    Embedding { table: NodeId, indices: Vec<usize> },
    GaussianNll { mu: NodeId, sigma: NodeId, targets: Vec<f64>, weights: Vec<f64> },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// Records operations against a read-only parameter store.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(AutodiffError::Shape(msg))
}

fn linear(x: &[f64], rows: usize, inner: usize, w: &[f64], cols: usize, bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    gemm(rows, inner, cols, x, false, w, false, &mut out, 0.0);
    for r in 0..rows {
        for (o, b) in out[r * cols..(r + 1) * cols].iter_mut().zip(bias) {
            *o += b;
        }
    }
    out
}

fn column_sums(g: &Tensor) -> Vec<f64> {
    let cols = g.cols();
    let mut sums = vec![0.0; cols];
    for r in 0..g.rows() {
        for (s, v) in sums.iter_mut().zip(g.row(r)) {
            *s += v;
        }
    }
    sums
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.store.value(*p),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        NodeId(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let v = self.value(id);
        if v.shape().len() != 2 {
            return shape_err(format!("{what} must be a matrix, got shape {:?}", v.shape()));
        }
        Ok((v.rows(), v.cols()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, m) = self.matrix_dims(a, "matmul lhs")?;
        let (m2, p) = self.matrix_dims(b, "matmul rhs")?;
        if m != m2 {
            return shape_err(format!("matmul inner dimensions {m} vs {m2}"));
        }
        let mut out = vec![0.0; n * p];
        gemm(n, m, p, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        Ok(self.push(Tensor::matrix(n, p, out)?, Op::MatMul { a, b }))
    }

    /// `x·W + bias` for `x: n × a`, `W: a × b`, `bias: b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, a) = self.matrix_dims(x, "affine input")?;
        let (a2, b) = self.matrix_dims(w, "affine weight")?;
        if a != a2 {
            return shape_err(format!("affine input width {a} vs weight rows {a2}"));
        }
        if self.value(bias).len() != b {
            return shape_err(format!("affine bias length {} vs {b}", self.value(bias).len()));
        }
        let out = linear(self.value(x).data(), n, a, self.value(w).data(), b, self.value(bias).data());
        Ok(self.push(Tensor::matrix(n, b, out)?, Op::Affine { x, w, bias }))
    }

    /// Causal convolution of one sequence (all rows of `x`).
    pub fn causal_conv1d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let rows = self.value(x).rows();
        self.causal_conv1d_seq(x, kernel, bias, rows)
    }

    /// Causal convolution applied independently to each length-`seq_len` block.
    ///
    /// `kernel` is `k × c_in × c_out`; tap `i` multiplies input row `t - (k-1) + i`,
    /// rows before the start of a sequence are zero.
    pub fn causal_conv1d_seq(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        seq_len: usize,
    ) -> Result<NodeId> {
        let (rows, c_in) = self.matrix_dims(x, "conv input")?;
        let kshape = self.value(kernel).shape().to_vec();
        if kshape.len() != 3 {
            return shape_err(format!("conv kernel must be k × c_in × c_out, got {kshape:?}"));
        }
        let (taps, kc_in, c_out) = (kshape[0], kshape[1], kshape[2]);
        if taps < 1 {
            return Err(AutodiffError::Argument("kernel size must be at least 1".into()));
        }
        if kc_in != c_in {
            return shape_err(format!("conv kernel expects {kc_in} channels, input has {c_in}"));
        }
        if self.value(bias).len() != c_out {
            return shape_err(format!("conv bias length {} vs {c_out}", self.value(bias).len()));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return shape_err(format!("{rows} rows do not split into sequences of {seq_len}"));
        }
        let xv = self.value(x).data();
        let width = taps * c_in;
        let unfolded = if taps == 1 {
            xv.to_vec()
        } else {
            let mut u = vec![0.0; rows * width];
            for r in 0..rows {
                let t = r % seq_len;
                for i in 0..taps {
                    let lag = taps - 1 - i;
                    if t >= lag {
                        let src = r - lag;
                        u[r * width + i * c_in..r * width + (i + 1) * c_in]
                            .copy_from_slice(&xv[src * c_in..(src + 1) * c_in]);
                    }
                }
            }
            u
        };
        let out = linear(&unfolded, rows, width, self.value(kernel).data(), c_out, self.value(bias).data());
        Ok(self.push(
            Tensor::matrix(rows, c_out, out)?,
            Op::CausalConv { x, kernel, bias, taps, seq_len, unfolded },
        ))
    }

    fn block_dims(&self, a: NodeId, b: NodeId, seq_len: usize) -> Result<(usize, usize, usize)> {
        let (rows, ca) = self.matrix_dims(a, "block lhs")?;
        let (rows_b, cb) = self.matrix_dims(b, "block rhs")?;
        if rows != rows_b {
            return shape_err(format!("block operands have {rows} vs {rows_b} rows"));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return shape_err(format!("{rows} rows do not split into sequences of {seq_len}"));
        }
        Ok((rows / seq_len, ca, cb))
    }

    /// Per sequence: `A_s · B_sᵀ`, giving `B·L × L`.
    pub fn block_matmul_nt(&mut self, a: NodeId, b: NodeId, seq_len: usize) -> Result<NodeId> {
        let (blocks, d, d2) = self.block_dims(a, b, seq_len)?;
        if d != d2 {
            return shape_err(format!("query width {d} vs key width {d2}"));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let l = seq_len;
        let mut out = vec![0.0; blocks * l * l];
        for s in 0..blocks {
            gemm(l, d, l, &av[s * l * d..], false, &bv[s * l * d..], true, &mut out[s * l * l..], 0.0);
        }
        Ok(self.push(Tensor::matrix(blocks * l, l, out)?, Op::BlockMatMulNt { a, b, seq_len }))
    }

    /// Per sequence: `W_s · V_s` with `W: B·L × L` and `V: B·L × d`.
    pub fn block_matmul(&mut self, a: NodeId, b: NodeId, seq_len: usize) -> Result<NodeId> {
        let (blocks, la, d) = self.block_dims(a, b, seq_len)?;
        if la != seq_len {
            return shape_err(format!("weight width {la} vs sequence length {seq_len}"));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let l = seq_len;
        let mut out = vec![0.0; blocks * l * d];
        for s in 0..blocks {
            gemm(l, l, d, &av[s * l * l..], false, &bv[s * l * d..], false, &mut out[s * l * d..], 0.0);
        }
        Ok(self.push(Tensor::matrix(blocks * l, d, out)?, Op::BlockMatMul { a, b, seq_len }))
    }

    /// Row softmax restricted to the mask's allowed entries; the rest are exactly 0.
    /// Rows are matched to mask rows modulo the mask length.
    pub fn masked_softmax(&mut self, x: NodeId, mask: &Arc<MaskMatrix>) -> Result<NodeId> {
        let (rows, cols) = self.matrix_dims(x, "softmax input")?;
        let l = mask.len();
        if cols != l || rows % l != 0 {
            return shape_err(format!("logits {rows}×{cols} do not match a length-{l} mask"));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let flags = mask.row_flags(r % l);
            let src = &xv[r * cols..(r + 1) * cols];
            let max = src
                .iter()
                .zip(flags)
                .filter(|(_, &a)| a)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for ((o, v), &a) in dst.iter_mut().zip(src).zip(flags) {
                if a {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            for o in dst.iter_mut() {
                *o /= total;
            }
        }
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::MaskedSoftmax { x, mask: Arc::clone(mask) },
        ))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, shift: NodeId) -> Result<NodeId> {
        let (rows, d) = self.matrix_dims(x, "layer norm input")?;
        if d < 2 {
            return Err(AutodiffError::Argument("layer norm needs width >= 2".into()));
        }
        if self.value(gain).len() != d || self.value(shift).len() != d {
            return shape_err(format!("layer norm parameters must have length {d}"));
        }
        let (xv, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(shift).data());
        let mut normalized = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = rstd;
            for c in 0..d {
                let n = (row[c] - mean) * rstd;
                normalized[r * d + c] = n;
                out[r * d + c] = n * g[c] + b[c];
            }
        }
        Ok(self.push(
            Tensor::matrix(rows, d, out)?,
            Op::LayerNorm { x, gain, shift, normalized, inv_std },
        ))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    fn elementwise(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(t, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let mut t = self.value(a).clone();
        for (x, y) in t.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.elementwise(x, |v| v * factor, Op::Scale { x, factor })
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        self.elementwise(x, |v| v + c, Op::AddConst { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.elementwise(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.elementwise(x, softplus, Op::Softplus { x })
    }

    /// Applies `f` elementwise with a caller-supplied derivative.
    pub fn map<F, D>(&mut self, x: NodeId, f: F, derivative: D) -> NodeId
    where
        F: Fn(f64) -> f64,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        self.elementwise(x, f, Op::Map { x, derivative: Box::new(derivative) })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of nothing".into());
        };
        let rows = self.matrix_dims(first, "concat part")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat part")?;
            if r != rows {
                return shape_err(format!("concat parts have {rows} vs {r} rows"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor::matrix(rows, total, out)?, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (rows, cols) = self.matrix_dims(x, "slice input")?;
        if start >= end || end > cols {
            return shape_err(format!("column range {start}..{end} out of 0..{cols}"));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&v.row(r)[start..end]);
        }
        Ok(self.push(Tensor::matrix(rows, end - start, out)?, Op::SliceCols { x, start }))
    }

    /// Gathers rows of `table` (`V × d`), one per index.
    pub fn embedding(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (vocab, d) = self.matrix_dims(table, "embedding table")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(AutodiffError::Argument(format!(
                "embedding index {bad} outside vocabulary of {vocab}"
            )));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(t.row(i));
        }
        Ok(self.push(
            Tensor::matrix(indices.len(), d, out)?,
            Op::Embedding { table, indices: indices.to_vec() },
        ))
    }

    /// `Σ wᵢ [½ ln(2πσᵢ²) + (zᵢ − μᵢ)² / (2σᵢ²)]` as a scalar.
    pub fn gaussian_nll(
        &mut self,
        mu: NodeId,
        sigma: NodeId,
        targets: &[f64],
        weights: &[f64],
    ) -> Result<NodeId> {
        let n = self.value(mu).len();
        if self.value(sigma).len() != n || targets.len() != n || weights.len() != n {
            return shape_err(format!(
                "nll operands disagree: mu {n}, sigma {}, targets {}, weights {}",
                self.value(sigma).len(),
                targets.len(),
                weights.len()
            ));
        }
        let (m, s) = (self.value(mu).data(), self.value(sigma).data());
        if s.iter().any(|&v| v <= 0.0) {
            return Err(AutodiffError::Argument("sigma must be positive".into()));
        }
        let mut total = 0.0;
        for i in 0..n {
            if weights[i] != 0.0 {
                let r = targets[i] - m[i];
                total += weights[i] * (0.5 * (2.0 * PI * s[i] * s[i]).ln() + r * r / (2.0 * s[i] * s[i]));
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::GaussianNll { mu, sigma, targets: targets.to_vec(), weights: weights.to_vec() },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut params: Vec<Option<Tensor>> = (0..self.store.len()).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads, &mut params)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut [Option<Tensor>],
    ) -> Result<()> {
        let acc = |grads: &mut [Option<Tensor>], id: NodeId, t: Tensor| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let like = |id: NodeId, data: Vec<f64>| {
            Tensor::new(self.value(id).shape().to_vec(), data).expect("gradient matches value shape")
        };

        match &self.nodes[idx].op {
            Op::Constant => {}
            Op::Param(p) => match &mut params[p.0] {
                Some(existing) => existing.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            },
            Op::MatMul { a, b } => {
                let (n, m) = (self.value(*a).rows(), self.value(*a).cols());
                let p = self.value(*b).cols();
                let mut da = vec![0.0; n * m];
                gemm(n, p, m, g.data(), false, self.value(*b).data(), true, &mut da, 0.0);
                let mut db = vec![0.0; m * p];
                gemm(m, n, p, self.value(*a).data(), true, g.data(), false, &mut db, 0.0);
                acc(grads, *a, like(*a, da));
                acc(grads, *b, like(*b, db));
            }
            Op::Affine { x, w, bias } => {
                let (n, a) = (self.value(*x).rows(), self.value(*x).cols());
                let b = self.value(*w).cols();
                let mut dx = vec![0.0; n * a];
                gemm(n, b, a, g.data(), false, self.value(*w).data(), true, &mut dx, 0.0);
                let mut dw = vec![0.0; a * b];
                gemm(a, n, b, self.value(*x).data(), true, g.data(), false, &mut dw, 0.0);
                acc(grads, *x, like(*x, dx));
                acc(grads, *w, like(*w, dw));
                acc(grads, *bias, like(*bias, column_sums(g)));
            }
            Op::CausalConv { x, kernel, bias, taps, seq_len, unfolded } => {
                let (rows, c_in) = (self.value(*x).rows(), self.value(*x).cols());
                let c_out = g.cols();
                let width = taps * c_in;
                let mut dk = vec![0.0; width * c_out];
                gemm(width, rows, c_out, unfolded, true, g.data(), false, &mut dk, 0.0);
                let mut du = vec![0.0; rows * width];
                gemm(rows, c_out, width, g.data(), false, self.value(*kernel).data(), true, &mut du, 0.0);
                let dx = if *taps == 1 {
                    du
                } else {
                    let mut dx = vec![0.0; rows * c_in];
                    for r in 0..rows {
                        let t = r % seq_len;
                        for i in 0..*taps {
                            let lag = taps - 1 - i;
                            if t >= lag {
                                let dst = r - lag;
                                for c in 0..c_in {
                                    dx[dst * c_in + c] += du[r * width + i * c_in + c];
                                }
                            }
                        }
                    }
                    dx
                };
                acc(grads, *x, like(*x, dx));
                acc(grads, *kernel, like(*kernel, dk));
                acc(grads, *bias, like(*bias, column_sums(g)));
            }
            Op::BlockMatMulNt { a, b, seq_len } => {
                let l = *seq_len;
                let d = self.value(*a).cols();
                let blocks = self.value(*a).rows() / l;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; blocks * l * d];
                let mut db = vec![0.0; blocks * l * d];
                for s in 0..blocks {
                    let gs = &g.data()[s * l * l..];
                    gemm(l, l, d, gs, false, &bv[s * l * d..], false, &mut da[s * l * d..], 0.0);
                    gemm(l, l, d, gs, true, &av[s * l * d..], false, &mut db[s * l * d..], 0.0);
                }
                acc(grads, *a, like(*a, da));
                acc(grads, *b, like(*b, db));
            }
            Op::BlockMatMul { a, b, seq_len } => {
                let l = *seq_len;
                let d = self.value(*b).cols();
                let blocks = self.value(*a).rows() / l;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; blocks * l * l];
                let mut db = vec![0.0; blocks * l * d];
                for s in 0..blocks {
                    let gs = &g.data()[s * l * d..];
                    gemm(l, d, l, gs, false, &bv[s * l * d..], true, &mut da[s * l * l..], 0.0);
                    gemm(l, l, d, &av[s * l * l..], true, gs, false, &mut db[s * l * d..], 0.0);
                }
                acc(grads, *a, like(*a, da));
                acc(grads, *b, like(*b, db));
            }
            Op::MaskedSoftmax { x, mask } => {
                let y = self.nodes[idx].value.as_ref().expect("softmax output");
                let (rows, cols) = (y.rows(), y.cols());
                let l = mask.len();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let flags = mask.row_flags(r % l);
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        if flags[c] {
                            dx[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                }
                acc(grads, *x, like(*x, dx));
            }
            Op::LayerNorm { x, gain, shift, normalized, inv_std } => {
                let (rows, d) = (g.rows(), g.cols());
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; rows * d];
                let mut dgain = vec![0.0; d];
                let mut dshift = vec![0.0; d];
                let mut dn = vec![0.0; d];
                for r in 0..rows {
                    let gr = g.row(r);
                    let nr = &normalized[r * d..(r + 1) * d];
                    for c in 0..d {
                        dgain[c] += gr[c] * nr[c];
                        dshift[c] += gr[c];
                        dn[c] = gr[c] * gv[c];
                    }
                    let mean_dn = dn.iter().sum::<f64>() / d as f64;
                    let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for c in 0..d {
                        dx[r * d + c] = inv_std[r] * (dn[c] - mean_dn - nr[c] * mean_dn_n);
                    }
                }
                acc(grads, *x, like(*x, dx));
                acc(grads, *gain, like(*gain, dgain));
                acc(grads, *shift, like(*shift, dshift));
            }
            Op::Add { a, b } => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = g.data().iter().zip(bv).map(|(g, b)| g * b).collect();
                let db = g.data().iter().zip(av).map(|(g, a)| g * a).collect();
                acc(grads, *a, like(*a, da));
                acc(grads, *b, like(*b, db));
            }
            Op::Scale { x, factor } => {
                acc(grads, *x, like(*x, g.data().iter().map(|v| v * factor).collect()));
            }
            Op::AddConst { x } => acc(grads, *x, g.clone()),
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = g.data().iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                acc(grads, *x, like(*x, dx));
            }
            Op::Softplus { x } => {
                let xv = self.value(*x).data();
                let dx = g.data().iter().zip(xv).map(|(g, &v)| g * sigmoid(v)).collect();
                acc(grads, *x, like(*x, dx));
            }
            Op::Map { x, derivative } => {
                let xv = self.value(*x).data();
                let dx = g.data().iter().zip(xv).map(|(g, &v)| g * derivative(v)).collect();
                acc(grads, *x, like(*x, dx));
            }
            Op::Sum { x } => {
                acc(grads, *x, Tensor::filled(self.value(*x).shape(), g.data()[0]));
            }
            Op::ConcatCols { parts } => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    acc(grads, p, like(p, dp));
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = (self.value(*x).rows(), self.value(*x).cols());
                let w = g.cols();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                acc(grads, *x, like(*x, dx));
            }
            Op::Embedding { table, indices } => {
                let d = self.value(*table).cols();
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..d {
                        dt[i * d + c] += g.data()[r * d + c];
                    }
                }
                acc(grads, *table, like(*table, dt));
            }
            Op::GaussianNll { mu, sigma, targets, weights } => {
                let scale = g.data()[0];
                let (m, s) = (self.value(*mu).data(), self.value(*sigma).data());
                let n = m.len();
                let mut dmu = vec![0.0; n];
                let mut dsigma = vec![0.0; n];
                for i in 0..n {
                    let r = targets[i] - m[i];
                    let s2 = s[i] * s[i];
                    dmu[i] = -scale * weights[i] * r / s2;
                    dsigma[i] = scale * weights[i] * (1.0 / s[i] - r * r / (s2 * s[i]));
                }
                acc(grads, *mu, like(*mu, dmu));
                acc(grads, *sigma, like(*sigma, dsigma));
            }
        }
        Ok(())
    }
}

/// Result of a backward sweep: adjoints of every node and of every parameter.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the parameter did not participate in the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.index()].as_ref()
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].as_ref()
    }

    pub(crate) fn params(&self) -> &[Option<Tensor>] {
        &self.params
    }
}
