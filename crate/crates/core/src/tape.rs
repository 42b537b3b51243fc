//! Reverse-mode automatic differentiation over an explicit gradient tape.
//!
//! A tape is an append-only record of primitive operations; every recorded
//! value's inputs precede it, so the record is already in topological order
//! and one reverse sweep computes all adjoints. Tapes are single-writer: one
//! forward/backward pass owns one tape.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{ParamId, Scalar, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ValueId(usize);

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: operand shapes {a:?} and {b:?} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("{op}: expected a matrix operand, got rank {rank}")]
    NotMatrix { op: &'static str, rank: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter `{0}` is not registered on this tape")]
    UnknownParam(ParamId),
    #[error("parameter `{0}` registered twice on one tape")]
    DuplicateParam(ParamId),
    #[error("gather id {id} out of range for a table with {rows} rows")]
    GatherOutOfRange { id: usize, rows: usize },
    #[error("column slice {start}..{end} exceeds width {cols}")]
    BadSlice {
        start: usize,
        end: usize,
        cols: usize,
    },
    #[error("concat_cols needs at least one part")]
    EmptyConcat,
    #[error("rotary encoding needs an even column count, got {0}")]
    OddRopeWidth(usize),
    #[error("cross-entropy: {rows} rows but {targets} targets / {weights} weights")]
    BadTargets {
        rows: usize,
        targets: usize,
        weights: usize,
    },
    #[error("cross-entropy target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("cross-entropy weights sum to zero")]
    ZeroWeightSum,
    #[error("value id {0:?} does not belong to this tape")]
    ForeignValue(usize),
}

enum Op {
    Leaf,
    /// C = A · B
    MatMul(ValueId, ValueId),
    /// C = A · Bᵀ — the projection form used by linear layers.
    MatMulNT(ValueId, ValueId),
    Add(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, f64),
    Silu(ValueId),
    RmsNorm {
        x: ValueId,
        gain: ValueId,
        eps: f64,
    },
    Softmax(ValueId),
    CausalSoftmax(ValueId),
    Rope {
        x: ValueId,
        theta_base: f64,
    },
    Gather {
        table: ValueId,
        ids: Vec<usize>,
    },
    NarrowCols {
        x: ValueId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<ValueId>),
    Sum(ValueId),
    /// Weighted mean cross-entropy of row-wise logits against integer targets.
    CrossEntropy {
        logits: ValueId,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op,
}

pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    params: BTreeMap<ParamId, ValueId>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    /// Value id of an already-registered parameter, if any.
    pub fn param_value(&self, id: &ParamId) -> Option<ValueId> {
        self.params.get(id).copied()
    }

    fn push(&mut self, value: Tensor<E>, op: Op) -> ValueId {
        self.nodes.push(Node { value, op });
        ValueId(self.nodes.len() - 1)
    }

    fn check(&self, id: ValueId) -> Result<(), TapeError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TapeError::ForeignValue(id.0))
        }
    }

    fn matrix_of(&self, op: &'static str, id: ValueId) -> Result<&Tensor<E>, TapeError> {
        let t = &self.nodes[id.0].value;
        if t.is_matrix() {
            Ok(t)
        } else {
            Err(TapeError::NotMatrix {
                op,
                rank: t.shape().len(),
            })
        }
    }

    /// Record an input value. A tagged tensor is registered as a parameter.
    pub fn leaf(&mut self, t: Tensor<E>) -> Result<ValueId, TapeError> {
        let tag = t.tag().cloned();
        let id = self.push(t, Op::Leaf);
        if let Some(tag) = tag {
            if self.params.insert(tag.clone(), id).is_some() {
                return Err(TapeError::DuplicateParam(tag));
            }
        }
        Ok(id)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TapeError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.matrix_of("matmul", a)?, self.matrix_of("matmul", b)?);
        if ta.cols() != tb.rows() {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                a: ta.shape().to_vec(),
                b: tb.shape().to_vec(),
            });
        }
        let value = mm_nn(ta, tb);
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a @ b.T`: `a` is `(m, k)`, `b` is `(n, k)`, result `(m, n)`.
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TapeError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (
            self.matrix_of("matmul_nt", a)?,
            self.matrix_of("matmul_nt", b)?,
        );
        if ta.cols() != tb.cols() {
            return Err(TapeError::ShapeMismatch {
                op: "matmul_nt",
                a: ta.shape().to_vec(),
                b: tb.shape().to_vec(),
            });
        }
        let value = mm_nt(ta, tb);
        Ok(self.push(value, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TapeError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "add",
                a: ta.shape().to_vec(),
                b: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(ta.shape(), data).expect("add preserves shape");
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TapeError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "mul",
                a: ta.shape().to_vec(),
                b: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(ta.shape(), data).expect("mul preserves shape");
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: ValueId, factor: f64) -> Result<ValueId, TapeError> {
        self.check(a)?;
        let f = E::of_f64(factor);
        let value = self.nodes[a.0].value.map(|v| v * f);
        Ok(self.push(value, Op::Scale(a, factor)))
    }

    /// silu(x) = x · sigmoid(x), the gate nonlinearity.
    pub fn silu(&mut self, a: ValueId) -> Result<ValueId, TapeError> {
        self.check(a)?;
        let value = self.nodes[a.0].value.map(|v| v * sigmoid(v));
        Ok(self.push(value, Op::Silu(a)))
    }

    /// Row-wise RMS normalization with a learned per-column gain.
    pub fn rms_norm(&mut self, x: ValueId, gain: ValueId, eps: f64) -> Result<ValueId, TapeError> {
        self.check(x)?;
        self.check(gain)?;
        let tx = self.matrix_of("rms_norm", x)?;
        let tg = &self.nodes[gain.0].value;
        if tg.shape() != [tx.cols()] {
            return Err(TapeError::ShapeMismatch {
                op: "rms_norm",
                a: tx.shape().to_vec(),
                b: tg.shape().to_vec(),
            });
        }
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = tx.row(i);
            let r = row_rms(row, eps);
            for j in 0..cols {
                data.push(tg.data()[j] * row[j] / r);
            }
        }
        let value = Tensor::matrix(rows, cols, data).expect("rms_norm preserves shape");
        Ok(self.push(value, Op::RmsNorm { x, gain, eps }))
    }

    /// Row-wise softmax over all columns.
    pub fn softmax(&mut self, a: ValueId) -> Result<ValueId, TapeError> {
        self.check(a)?;
        let ta = self.matrix_of("softmax", a)?;
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            softmax_into(ta.row(i), cols, &mut data);
        }
        let value = Tensor::matrix(rows, cols, data).expect("softmax preserves shape");
        Ok(self.push(value, Op::Softmax(a)))
    }

    /// Row-wise softmax where row `i` only attends to columns `0..=i`;
    /// masked columns come out exactly zero. Requires a square matrix.
    pub fn causal_softmax(&mut self, a: ValueId) -> Result<ValueId, TapeError> {
        self.check(a)?;
        let ta = self.matrix_of("causal_softmax", a)?;
        if ta.rows() != ta.cols() {
            return Err(TapeError::ShapeMismatch {
                op: "causal_softmax",
                a: ta.shape().to_vec(),
                b: ta.shape().to_vec(),
            });
        }
        let n = ta.rows();
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            softmax_into(&ta.row(i)[..=i], n, &mut data);
        }
        let value = Tensor::matrix(n, n, data).expect("causal_softmax preserves shape");
        Ok(self.push(value, Op::CausalSoftmax(a)))
    }

    /// Rotary position encoding: row `t` is rotated pairwise by angles
    /// `t · theta_base^(-2i/d)`. The input is one head's `(seq, head_dim)` block.
    pub fn rope(&mut self, x: ValueId, theta_base: f64) -> Result<ValueId, TapeError> {
        self.check(x)?;
        let tx = self.matrix_of("rope", x)?;
        let (rows, cols) = (tx.rows(), tx.cols());
        if cols % 2 != 0 {
            return Err(TapeError::OddRopeWidth(cols));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for t in 0..rows {
            let row = tx.row(t);
            for i in 0..cols / 2 {
                let (sin, cos) = rope_angle(t, i, cols, theta_base);
                let (a, b) = (row[2 * i], row[2 * i + 1]);
                data.push(a * cos - b * sin);
                data.push(a * sin + b * cos);
            }
        }
        let value = Tensor::matrix(rows, cols, data).expect("rope preserves shape");
        Ok(self.push(value, Op::Rope { x, theta_base }))
    }

    /// Row lookup: result row `r` is `table` row `ids[r]` (embedding fetch).
    pub fn gather(&mut self, table: ValueId, ids: &[usize]) -> Result<ValueId, TapeError> {
        self.check(table)?;
        let tt = self.matrix_of("gather", table)?;
        let (rows, cols) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TapeError::GatherOutOfRange { id, rows });
            }
            data.extend_from_slice(tt.row(id));
        }
        let value = Tensor::matrix(ids.len(), cols, data).expect("gather shape");
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Contiguous column slice `start .. start+len`.
    pub fn narrow_cols(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId, TapeError> {
        self.check(x)?;
        let tx = self.matrix_of("narrow_cols", x)?;
        let (rows, cols) = (tx.rows(), tx.cols());
        if start + len > cols || len == 0 {
            return Err(TapeError::BadSlice {
                start,
                end: start + len,
                cols,
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let value = Tensor::matrix(rows, len, data).expect("narrow shape");
        Ok(self.push(value, Op::NarrowCols { x, start, len }))
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::EmptyConcat);
        }
        for &p in parts {
            self.check(p)?;
            self.matrix_of("concat_cols", p)?;
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let mut total_cols = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows() != rows {
                return Err(TapeError::ShapeMismatch {
                    op: "concat_cols",
                    a: self.nodes[parts[0].0].value.shape().to_vec(),
                    b: t.shape().to_vec(),
                });
            }
            total_cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let value = Tensor::matrix(rows, total_cols, data).expect("concat shape");
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: ValueId) -> Result<ValueId, TapeError> {
        self.check(a)?;
        let total = self.nodes[a.0]
            .value
            .data()
            .iter()
            .fold(E::zero(), |acc, &v| acc + v);
        Ok(self.push(Tensor::scalar(total), Op::Sum(a)))
    }

    /// Weighted mean cross-entropy: `Σ wᵢ · nll(rowᵢ, targetᵢ) / Σ wᵢ`.
    /// One target and one weight per logit row; zero-weight rows are ignored.
    pub fn cross_entropy(
        &mut self,
        logits: ValueId,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<ValueId, TapeError> {
        self.check(logits)?;
        let tl = self.matrix_of("cross_entropy", logits)?;
        let (rows, cols) = (tl.rows(), tl.cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(TapeError::BadTargets {
                rows,
                targets: targets.len(),
                weights: weights.len(),
            });
        }
        let weight_sum: f64 = weights.iter().sum();
        if weight_sum == 0.0 {
            return Err(TapeError::ZeroWeightSum);
        }
        let mut loss = 0.0f64;
        for i in 0..rows {
            if weights[i] == 0.0 {
                continue;
            }
            let t = targets[i];
            if t >= cols {
                return Err(TapeError::TargetOutOfRange {
                    target: t,
                    classes: cols,
                });
            }
            let row = tl.row(i);
            loss += weights[i] * (log_sum_exp(row) - row[t].as_f64());
        }
        let value = Tensor::scalar(E::of_f64(loss / weight_sum));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar loss. Returns one gradient per requested
    /// parameter; parameters registered on the tape but not reached by the
    /// loss map to zero tensors. Unregistered parameters are an error.
    pub fn grad(
        &self,
        loss: ValueId,
        params: &[ParamId],
    ) -> Result<BTreeMap<ParamId, Tensor<E>>, TapeError> {
        self.check(loss)?;
        let loss_shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.elem_count() != 1 {
            return Err(TapeError::NonScalarLoss(loss_shape.to_vec()));
        }
        for p in params {
            if !self.params.contains_key(p) {
                return Err(TapeError::UnknownParam(p.clone()));
            }
        }

        let mut adj: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(loss_shape, E::one()));

        for idx in (0..=loss.0).rev() {
            let Some(d) = adj[idx].clone() else { continue };
            self.backward_step(idx, &d, &mut adj);
        }

        let mut out = BTreeMap::new();
        for p in params {
            let id = self.params[p];
            let g = match &adj[id.0] {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.nodes[id.0].value.shape()),
            };
            out.insert(p.clone(), g);
        }
        Ok(out)
    }

    fn backward_step(&self, idx: usize, d: &Tensor<E>, adj: &mut [Option<Tensor<E>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                accum(adj, *a, mm_nt(d, tb)); // dA = dC · Bᵀ
                accum(adj, *b, mm_tn(ta, d)); // dB = Aᵀ · dC
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                accum(adj, *a, mm_nn(d, tb)); // dA = dC · B
                accum(adj, *b, mm_tn(d, ta)); // dB = dCᵀ · A
            }
            Op::Add(a, b) => {
                accum(adj, *a, d.clone());
                accum(adj, *b, d.clone());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                accum(adj, *a, elementwise(d, tb));
                accum(adj, *b, elementwise(d, ta));
            }
            Op::Scale(a, factor) => {
                let f = E::of_f64(*factor);
                accum(adj, *a, d.map(|v| v * f));
            }
            Op::Silu(a) => {
                // d/dx [x·σ(x)] = σ(x)·(1 + x·(1 − σ(x)))
                let tx = &self.nodes[a.0].value;
                let data = tx
                    .data()
                    .iter()
                    .zip(d.data())
                    .map(|(&x, &g)| {
                        let s = sigmoid(x);
                        g * s * (E::one() + x * (E::one() - s))
                    })
                    .collect();
                accum(
                    adj,
                    *a,
                    Tensor::from_vec(tx.shape(), data).expect("silu grad shape"),
                );
            }
            Op::RmsNorm { x, gain, eps } => {
                let (tx, tg) = (&self.nodes[x.0].value, &self.nodes[gain.0].value);
                let (rows, cols) = (tx.rows(), tx.cols());
                let mut dx = Tensor::zeros(tx.shape());
                let mut dg = Tensor::zeros(tg.shape());
                let n = E::of_f64(cols as f64);
                for i in 0..rows {
                    let row = tx.row(i);
                    let drow = d.row(i);
                    let r = row_rms(row, *eps);
                    // s = Σ_k d_k · g_k · x_k
                    let mut s = E::zero();
                    for j in 0..cols {
                        s = s + drow[j] * tg.data()[j] * row[j];
                    }
                    let r3 = r * r * r;
                    for j in 0..cols {
                        let v = tg.data()[j] * drow[j] / r - row[j] * s / (n * r3);
                        dx.data_mut()[i * cols + j] = v;
                        let dgj = dg.data()[j] + drow[j] * row[j] / r;
                        dg.data_mut()[j] = dgj;
                    }
                }
                accum(adj, *x, dx);
                accum(adj, *gain, dg);
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                // dx = y ⊙ (d − Σ_k d_k y_k); masked entries have y = 0.
                let y = &node.value;
                let (rows, cols) = (y.rows(), y.cols());
                let mut dx = Tensor::zeros(y.shape());
                for i in 0..rows {
                    let yrow = y.row(i);
                    let drow = d.row(i);
                    let mut dot = E::zero();
                    for j in 0..cols {
                        dot = dot + drow[j] * yrow[j];
                    }
                    for j in 0..cols {
                        dx.data_mut()[i * cols + j] = yrow[j] * (drow[j] - dot);
                    }
                }
                accum(adj, *a, dx);
            }
            Op::Rope { x, theta_base } => {
                // The rotation is orthogonal; its adjoint rotates by −θ.
                let tx = &self.nodes[x.0].value;
                let (rows, cols) = (tx.rows(), tx.cols());
                let mut dx = Tensor::zeros(tx.shape());
                for t in 0..rows {
                    let drow = d.row(t);
                    for i in 0..cols / 2 {
                        let (sin, cos) = rope_angle::<E>(t, i, cols, *theta_base);
                        let (da, db) = (drow[2 * i], drow[2 * i + 1]);
                        dx.data_mut()[t * cols + 2 * i] = da * cos + db * sin;
                        dx.data_mut()[t * cols + 2 * i + 1] = -da * sin + db * cos;
                    }
                }
                accum(adj, *x, dx);
            }
            Op::Gather { table, ids } => {
                let tt = &self.nodes[table.0].value;
                let cols = tt.cols();
                let mut dt = Tensor::zeros(tt.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..cols {
                        let v = dt.data_mut()[id * cols + j] + d.data()[r * cols + j];
                        dt.data_mut()[id * cols + j] = v;
                    }
                }
                accum(adj, *table, dt);
            }
            Op::NarrowCols { x, start, len } => {
                let tx = &self.nodes[x.0].value;
                let (rows, cols) = (tx.rows(), tx.cols());
                let mut dx = Tensor::zeros(tx.shape());
                for i in 0..rows {
                    for j in 0..*len {
                        dx.data_mut()[i * cols + start + j] = d.data()[i * len + j];
                    }
                }
                accum(adj, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let cols = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].value.cols();
                    let mut dp = Tensor::zeros(self.nodes[p.0].value.shape());
                    for i in 0..rows {
                        for j in 0..pc {
                            dp.data_mut()[i * pc + j] = d.data()[i * cols + offset + j];
                        }
                    }
                    accum(adj, p, dp);
                    offset += pc;
                }
            }
            Op::Sum(a) => {
                let g = d.data()[0];
                let shape = self.nodes[a.0].value.shape();
                accum(adj, *a, Tensor::full(shape, g));
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                // dlogits_i = g · (w_i / Σw) · (softmax(row_i) − onehot(t_i))
                let tl = &self.nodes[logits.0].value;
                let (rows, cols) = (tl.rows(), tl.cols());
                let weight_sum: f64 = weights.iter().sum();
                let g = d.data()[0];
                let mut dl = Tensor::zeros(tl.shape());
                let mut probs = Vec::new();
                for i in 0..rows {
                    if weights[i] == 0.0 {
                        continue;
                    }
                    let scale = E::of_f64(weights[i] / weight_sum) * g;
                    probs.clear();
                    softmax_into(tl.row(i), cols, &mut probs);
                    for j in 0..cols {
                        let mut v = probs[j];
                        if j == targets[i] {
                            v = v - E::one();
                        }
                        dl.data_mut()[i * cols + j] = scale * v;
                    }
                }
                accum(adj, *logits, dl);
            }
        }
    }
}

fn accum<E: Scalar>(adj: &mut [Option<Tensor<E>>], id: ValueId, delta: Tensor<E>) {
    match &mut adj[id.0] {
        Some(t) => t.add_assign(&delta).expect("adjoint shape fixed by forward"),
        slot @ None => *slot = Some(delta),
    }
}

fn elementwise<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::from_vec(a.shape(), data).expect("elementwise shape")
}

fn sigmoid<E: Scalar>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

fn row_rms<E: Scalar>(row: &[E], eps: f64) -> E {
    let n = E::of_f64(row.len() as f64);
    let ms = row.iter().fold(E::zero(), |acc, &v| acc + v * v) / n;
    (ms + E::of_f64(eps)).sqrt()
}

/// Max-subtracted softmax of `row`, padded with zeros to `width` columns.
fn softmax_into<E: Scalar>(row: &[E], width: usize, out: &mut Vec<E>) {
    let max = row.iter().fold(E::neg_infinity(), |acc, &v| acc.max(v));
    let mut denom = E::zero();
    let start = out.len();
    for &v in row {
        let e = (v - max).exp();
        denom = denom + e;
        out.push(e);
    }
    for v in &mut out[start..start + row.len()] {
        *v = *v / denom;
    }
    for _ in row.len()..width {
        out.push(E::zero());
    }
}

fn log_sum_exp<E: Scalar>(row: &[E]) -> f64 {
    let max = row
        .iter()
        .fold(f64::NEG_INFINITY, |acc, &v| acc.max(v.as_f64()));
    let sum: f64 = row.iter().map(|&v| (v.as_f64() - max).exp()).sum();
    max + sum.ln()
}

fn rope_angle<E: Scalar>(t: usize, pair: usize, cols: usize, theta_base: f64) -> (E, E) {
    let exponent = -2.0 * pair as f64 / cols as f64;
    let angle = t as f64 * theta_base.powf(exponent);
    (E::of_f64(angle.sin()), E::of_f64(angle.cos()))
}

// ---- plain matrix kernels (also used by backward passes) ----

pub(crate) fn mm_nn<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            let brow = &b.data()[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    Tensor::matrix(m, n, out).expect("mm_nn shape")
}

pub(crate) fn mm_nt<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = E::zero();
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            out.push(acc);
        }
    }
    Tensor::matrix(m, n, out).expect("mm_nt shape")
}

/// `aᵀ · b` for `a: (m, k)`, `b: (m, n)` → `(k, n)`.
pub(crate) fn mm_tn<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![E::zero(); k * n];
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for p in 0..k {
            let av = arow[p];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    Tensor::matrix(k, n, out).expect("mm_tn shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdiff::finite_diff_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pid(s: &str) -> ParamId {
        ParamId::new(s)
    }

    #[test]
    fn grad_of_linear_is_the_input() {
        // loss = w·x with x = 2, w = 5  ⇒  ∂loss/∂w = 2
        let mut tape = Tape::<f64>::new();
        let w = tape
            .leaf(Tensor::scalar(5.0).with_tag(pid("w")))
            .unwrap();
        let x = tape.leaf(Tensor::scalar(2.0)).unwrap();
        let y = tape.mul(w, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.grad(loss, &[pid("w")]).unwrap();
        assert_eq!(g[&pid("w")].data(), &[2.0]);
    }

    #[test]
    fn grad_of_square_is_two_w() {
        // loss = w² at w = 3  ⇒  6
        let mut tape = Tape::<f64>::new();
        let w = tape
            .leaf(Tensor::scalar(3.0).with_tag(pid("w")))
            .unwrap();
        let y = tape.mul(w, w).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.grad(loss, &[pid("w")]).unwrap();
        assert_eq!(g[&pid("w")].data(), &[6.0]);
    }

    #[test]
    fn grad_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let w = tape
            .leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_tag(pid("w")))
            .unwrap();
        let err = tape.grad(w, &[pid("w")]).unwrap_err();
        assert!(matches!(err, TapeError::NonScalarLoss(_)));
    }

    #[test]
    fn grad_rejects_unregistered_param() {
        let mut tape = Tape::<f64>::new();
        let w = tape
            .leaf(Tensor::scalar(1.0).with_tag(pid("w")))
            .unwrap();
        let loss = tape.sum(w).unwrap();
        let err = tape.grad(loss, &[pid("missing")]).unwrap_err();
        assert!(matches!(err, TapeError::UnknownParam(p) if p.as_str() == "missing"));
    }

    #[test]
    fn unreached_param_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape
            .leaf(Tensor::scalar(1.0).with_tag(pid("w")))
            .unwrap();
        let _unused = tape
            .leaf(Tensor::from_vec(&[3], vec![0.0; 3]).unwrap().with_tag(pid("u")))
            .unwrap();
        let loss = tape.sum(w).unwrap();
        let g = tape.grad(loss, &[pid("u")]).unwrap();
        assert_eq!(g[&pid("u")].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn duplicate_param_registration_is_an_error() {
        let mut tape = Tape::<f64>::new();
        tape.leaf(Tensor::scalar(1.0).with_tag(pid("w"))).unwrap();
        let err = tape.leaf(Tensor::scalar(2.0).with_tag(pid("w"))).unwrap_err();
        assert!(matches!(err, TapeError::DuplicateParam(_)));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[4, 5])).unwrap();
        assert!(matches!(
            tape.matmul(a, b),
            Err(TapeError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    /// Check the analytic gradient of `build(tape, params…) -> loss`
    /// against central finite differences at f64.
    fn check_grads(
        seed: u64,
        shapes: &[(&str, Vec<usize>)],
        build: impl Fn(&mut Tape<f64>, &[ValueId]) -> ValueId,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in shapes {
            let data = (0..shape.iter().product::<usize>())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            params.insert(
                pid(name),
                Tensor::from_vec(shape, data).unwrap().with_tag(pid(name)),
            );
        }

        let run = |p: &BTreeMap<ParamId, Tensor<f64>>| -> Result<(Tape<f64>, ValueId), TapeError> {
            let mut tape = Tape::new();
            let mut ids = Vec::new();
            for (name, _) in shapes {
                let mut t = p[&pid(name)].clone();
                t = t.with_tag(pid(name));
                ids.push(tape.leaf(t)?);
            }
            let loss = build(&mut tape, &ids);
            Ok((tape, loss))
        };

        let (tape, loss) = run(&params).unwrap();
        let ids: Vec<ParamId> = shapes.iter().map(|(n, _)| pid(n)).collect();
        let analytic = tape.grad(loss, &ids).unwrap();

        let numeric = finite_diff_gradient(
            |p| {
                let (tape, loss) = run(p).map_err(|e| e.to_string())?;
                tape.value(loss).item().map_err(|e| e.to_string())
            },
            &params,
            1e-5,
        )
        .unwrap();

        for id in &ids {
            let (a, n) = (&analytic[id], &numeric[id]);
            let num: f64 = a
                .data()
                .iter()
                .zip(n.data())
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            let den: f64 = n.data().iter().map(|&y| y * y).sum::<f64>().sqrt();
            let rel = num / den.max(1e-8);
            assert!(
                rel <= 1e-4,
                "param {id}: relative gradient error {rel:.3e} exceeds 1e-4"
            );
        }
    }

    #[test]
    fn primitive_grads_match_finite_differences() {
        // matmul + add + sum
        check_grads(1, &[("a", vec![3, 4]), ("b", vec![4, 2])], |t, ids| {
            let c = t.matmul(ids[0], ids[1]).unwrap();
            let d = t.add(c, c).unwrap();
            t.sum(d).unwrap()
        });
        // matmul_nt + mul
        check_grads(2, &[("a", vec![2, 5]), ("b", vec![3, 5])], |t, ids| {
            let c = t.matmul_nt(ids[0], ids[1]).unwrap();
            let d = t.mul(c, c).unwrap();
            t.sum(d).unwrap()
        });
        // silu + scale
        check_grads(3, &[("x", vec![4, 3])], |t, ids| {
            let s = t.silu(ids[0]).unwrap();
            let s = t.scale(s, 0.7).unwrap();
            t.sum(s).unwrap()
        });
        // rms_norm (x and gain)
        check_grads(4, &[("x", vec![3, 6]), ("g", vec![6])], |t, ids| {
            let y = t.rms_norm(ids[0], ids[1], 1e-6).unwrap();
            let y2 = t.mul(y, y).unwrap();
            t.sum(y2).unwrap()
        });
        // softmax
        check_grads(5, &[("x", vec![3, 5])], |t, ids| {
            let y = t.softmax(ids[0]).unwrap();
            let y2 = t.mul(y, y).unwrap();
            t.sum(y2).unwrap()
        });
        // causal softmax
        check_grads(6, &[("x", vec![4, 4])], |t, ids| {
            let y = t.causal_softmax(ids[0]).unwrap();
            let y2 = t.mul(y, y).unwrap();
            t.sum(y2).unwrap()
        });
        // rotary encoding
        check_grads(7, &[("x", vec![5, 6])], |t, ids| {
            let y = t.rope(ids[0], 10000.0).unwrap();
            let y2 = t.mul(y, y).unwrap();
            t.sum(y2).unwrap()
        });
        // gather
        check_grads(8, &[("table", vec![6, 3])], |t, ids| {
            let y = t.gather(ids[0], &[1, 1, 4, 0]).unwrap();
            let y2 = t.mul(y, y).unwrap();
            t.sum(y2).unwrap()
        });
        // narrow + concat
        check_grads(9, &[("x", vec![3, 6])], |t, ids| {
            let a = t.narrow_cols(ids[0], 0, 2).unwrap();
            let b = t.narrow_cols(ids[0], 2, 4).unwrap();
            let y = t.concat_cols(&[b, a]).unwrap();
            let y2 = t.mul(y, y).unwrap();
            t.sum(y2).unwrap()
        });
        // weighted cross-entropy
        check_grads(10, &[("logits", vec![4, 7])], |t, ids| {
            t.cross_entropy(ids[0], &[2, 0, 6, 3], &[1.0, 0.0, 2.0, 1.0])
                .unwrap()
        });
    }

    #[test]
    fn two_layer_mlp_grads_match_finite_differences() {
        check_grads(
            11,
            &[("w1", vec![8, 5]), ("w2", vec![4, 8]), ("x", vec![3, 5])],
            |t, ids| {
                let h = t.matmul_nt(ids[2], ids[0]).unwrap();
                let h = t.silu(h).unwrap();
                let logits = t.matmul_nt(h, ids[1]).unwrap();
                t.cross_entropy(logits, &[1, 0, 3], &[1.0, 1.0, 1.0]).unwrap()
            },
        );
    }

    #[test]
    fn grad_is_linear_in_the_loss() {
        // grad(a·f + b·g) = a·grad f + b·grad g, exactly as composed here.
        let build = |t: &mut Tape<f64>, w: ValueId, a: f64, b: f64| {
            let sq = t.mul(w, w).unwrap();
            let f = t.sum(sq).unwrap();
            let si = t.silu(w).unwrap();
            let g = t.sum(si).unwrap();
            let fa = t.scale(f, a).unwrap();
            let gb = t.scale(g, b).unwrap();
            t.add(fa, gb).unwrap()
        };
        let w0 = Tensor::from_vec(&[3], vec![0.3, -1.2, 0.9]).unwrap();
        let grad_for = |a: f64, b: f64| {
            let mut tape = Tape::<f64>::new();
            let w = tape.leaf(w0.clone().with_tag(pid("w"))).unwrap();
            let loss = build(&mut tape, w, a, b);
            tape.grad(loss, &[pid("w")]).unwrap()[&pid("w")].clone()
        };
        let gf = grad_for(1.0, 0.0);
        let gg = grad_for(0.0, 1.0);
        let combined = grad_for(2.5, -0.75);
        for j in 0..3 {
            let expect = 2.5 * gf.data()[j] - 0.75 * gg.data()[j];
            assert!((combined.data()[j] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn forward_and_grad_are_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let data: Vec<f32> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape = Tape::<f32>::new();
            let w = tape
                .leaf(Tensor::matrix(4, 5, data).unwrap().with_tag(pid("w")))
                .unwrap();
            let s = tape.silu(w).unwrap();
            let n = tape.softmax(s).unwrap();
            let loss = tape.sum(n).unwrap();
            let g = tape.grad(loss, &[pid("w")]).unwrap();
            (
                tape.value(loss).data().to_vec(),
                g[&pid("w")].data().to_vec(),
            )
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        // Bit-identical, not merely close.
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn causal_softmax_masks_future_columns() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf(Tensor::matrix(3, 3, vec![1.0, 9.0, 9.0, 0.5, 0.5, 9.0, 1.0, 1.0, 1.0]).unwrap())
            .unwrap();
        let y = tape.causal_softmax(x).unwrap();
        let v = tape.value(y);
        assert_eq!(v.at2(0, 0), 1.0);
        assert_eq!(v.at2(0, 1), 0.0);
        assert_eq!(v.at2(0, 2), 0.0);
        assert!((v.at2(1, 0) - 0.5).abs() < 1e-12);
        assert_eq!(v.at2(1, 2), 0.0);
        let row2: f64 = (0..3).map(|j| v.at2(2, j)).sum();
        assert!((row2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_targets_and_weights() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(
            tape.cross_entropy(l, &[0], &[1.0]),
            Err(TapeError::BadTargets { .. })
        ));
        assert!(matches!(
            tape.cross_entropy(l, &[0, 3], &[1.0, 1.0]),
            Err(TapeError::TargetOutOfRange { target: 3, classes: 3 })
        ));
        assert!(matches!(
            tape.cross_entropy(l, &[0, 1], &[0.0, 0.0]),
            Err(TapeError::ZeroWeightSum)
        ));
    }
}
