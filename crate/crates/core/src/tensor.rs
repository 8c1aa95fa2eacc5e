//! Dense 2-D tensors recorded on a reverse-mode differentiation tape.
//!
//! Every value is a row-major `rows x cols` matrix; vectors are `1 x n` or
//! `n x 1`. Operations append one record to the [`Tape`]; [`Tape::backward`]
//! replays the records once in reverse, accumulating gradients into every
//! tensor with `requires_grad`. There is no implicit broadcasting: the only
//! shape-bending ops are [`Tape::add_bias`] (bias row broadcast down rows)
//! and [`Tape::scale_rows`] (per-row scalar).
//!
//! Successful ops never store NaN/Inf; an op whose output would be
//! non-finite fails with [`Error::NonFinite`] instead.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{selu, selu_grad, sigmoid, Scalar};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Dense row-major tensor with an optional gradient buffer of the same shape.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    data: Arc<Vec<T>>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn shape(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }
}

/// One recorded operation; inputs are earlier tape positions.
#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Exp { x: Var },
    Selu { x: Var },
    MaskedSoftmaxRows { x: Var, mask: Arc<Vec<bool>> },
    Concat { parts: Vec<Var>, axis: usize },
    SliceRows { x: Var, start: usize },
    ScaleRows { x: Var, scale: Var },
    MaskedMeanRows { x: Var, mask: Arc<Vec<bool>> },
    MaskedMaxRows { x: Var, argmax: Vec<usize> },
    Gather { table: Var, rows: Arc<Vec<u32>> },
    Sum { x: Var },
    ScaleConst { x: Var, c: T },
    CrossEntropy { logits: Var, target: usize },
}

struct Record<T> {
    tensor: Tensor<T>,
    op: Op<T>,
}

/// Wengert tape: append-only record of tensors and the ops that made them.
///
/// A tape serves a single forward/backward cycle and is dropped afterwards;
/// parameters live outside the tape and are re-registered per pass via
/// [`Tape::leaf_shared`].
pub struct Tape<T: Scalar> {
    records: Vec<Record<T>>,
    ran_backward: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            records: Vec::new(),
            ran_backward: false,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn tensor(&self, v: Var) -> &Tensor<T> {
        &self.records[v.0].tensor
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.records[v.0].tensor.data
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.records[v.0].tensor;
        (t.rows, t.cols)
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.records[v.0].tensor.grad.as_deref()
    }

    /// Value of a 1x1 tensor.
    pub fn scalar_value(&self, v: Var) -> T {
        debug_assert_eq!(self.tensor(v).numel(), 1);
        self.data(v)[0]
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<T>, rows: usize, cols: usize, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(data), rows, cols, requires_grad)
    }

    /// Register an externally owned buffer without copying it.
    pub fn leaf_shared(
        &mut self,
        data: Arc<Vec<T>>,
        rows: usize,
        cols: usize,
        requires_grad: bool,
    ) -> Var {
        assert_eq!(
            data.len(),
            rows * cols,
            "leaf buffer length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        let id = self.records.len();
        self.records.push(Record {
            tensor: Tensor {
                data,
                rows,
                cols,
                requires_grad,
                grad: None,
            },
            op: Op::Leaf,
        });
        Var(id)
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, data: Vec<T>, rows: usize, cols: usize) -> Var {
        self.leaf(data, rows, cols, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(vec![T::zero(); rows * cols], rows, cols)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        data: Vec<T>,
        rows: usize,
        cols: usize,
        requires_grad: bool,
        op: Op<T>,
    ) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let id = self.records.len();
        self.records.push(Record {
            tensor: Tensor {
                data: Arc::new(data),
                rows,
                cols,
                requires_grad,
                grad: None,
            },
            op,
        });
        Ok(Var(id))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.tensor(*v).requires_grad)
    }

    fn shape_err(&self, op: &'static str, lhs: Var, rhs: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.tensor(lhs).shape(),
            rhs: self.tensor(rhs).shape(),
        }
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// Matrix product: `a` is m x k, `b` is k x n.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + av * brow[j];
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        self.push("matmul", out, m, n, rg, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let xd = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let rg = self.any_grad(&[x]);
        self.push("transpose", out, c, r, rg, Op::Transpose { x })
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(b) != (r, c) {
            return Err(self.shape_err(op_name, a, b));
        }
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.any_grad(&[a, b]);
        self.push(op_name, out, r, c, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Broadcast a `1 x c` bias row over every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(bias) != (1, c) {
            return Err(self.shape_err("add_bias", x, bias));
        }
        let xd = self.data(x);
        let bd = self.data(bias);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] + bd[j];
            }
        }
        let rg = self.any_grad(&[x, bias]);
        self.push("add_bias", out, r, c, rg, Op::AddBias { x, bias })
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (r, c) = self.dims(x);
        let out: Vec<T> = self.data(x).iter().map(|&v| f(v)).collect();
        let rg = self.any_grad(&[x]);
        self.push(op_name, out, r, c, rg, op)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp { x })
    }

    pub fn selu(&mut self, x: Var) -> Result<Var> {
        self.unary("selu", x, selu, Op::Selu { x })
    }

    pub fn scale_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let cc = T::from_f64(c);
        self.unary("scale_const", x, |v| v * cc, Op::ScaleConst { x, c: cc })
    }

    /// Scale row `i` of `x` by `scale[i]` (`scale` is `rows x 1`).
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(scale) != (r, 1) {
            return Err(self.shape_err("scale_rows", x, scale));
        }
        let xd = self.data(x);
        let sd = self.data(scale);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let s = sd[i];
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] * s;
            }
        }
        let rg = self.any_grad(&[x, scale]);
        self.push("scale_rows", out, r, c, rg, Op::ScaleRows { x, scale })
    }

    // ── Softmax / reductions ────────────────────────────────────────────

    /// Per-row softmax over the unmasked columns; masked columns get weight
    /// exactly zero. Stabilised by max subtraction.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if mask.len() != c {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                lhs: vec![r, c],
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidMask {
                op: "masked_softmax",
                msg: "every position is masked".into(),
            });
        }
        let xd = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mut mx = T::neg_infinity();
            for j in 0..c {
                if mask[j] && row[j] > mx {
                    mx = row[j];
                }
            }
            let mut denom = T::zero();
            for j in 0..c {
                if mask[j] {
                    let e = (row[j] - mx).exp();
                    out[i * c + j] = e;
                    denom = denom + e;
                }
            }
            for j in 0..c {
                if mask[j] {
                    out[i * c + j] = out[i * c + j] / denom;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        let mask = Arc::new(mask.to_vec());
        self.push(
            "masked_softmax",
            out,
            r,
            c,
            rg,
            Op::MaskedSoftmaxRows { x, mask },
        )
    }

    /// Per-feature mean over unmasked rows; output is `1 x cols`.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.dims(x);
        self.check_row_mask("masked_mean", r, mask)?;
        let n = mask.iter().filter(|&&m| m).count();
        let xd = self.data(x);
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            if mask[i] {
                for j in 0..c {
                    out[j] = out[j] + xd[i * c + j];
                }
            }
        }
        let inv = T::one() / T::from_f64(n as f64);
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let rg = self.any_grad(&[x]);
        let mask = Arc::new(mask.to_vec());
        self.push(
            "masked_mean",
            out,
            1,
            c,
            rg,
            Op::MaskedMeanRows { x, mask },
        )
    }

    /// Per-feature max over unmasked rows; output is `1 x cols`. Gradient
    /// routes to the first occurrence of the max.
    pub fn masked_max_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.dims(x);
        self.check_row_mask("masked_max", r, mask)?;
        let xd = self.data(x);
        let mut out = vec![T::zero(); c];
        let mut argmax = vec![0usize; c];
        for j in 0..c {
            let mut best = T::neg_infinity();
            let mut best_i = usize::MAX;
            for i in 0..r {
                // Strict > keeps the first occurrence on ties.
                if mask[i] && xd[i * c + j] > best {
                    best = xd[i * c + j];
                    best_i = i;
                }
            }
            out[j] = best;
            argmax[j] = best_i;
        }
        let rg = self.any_grad(&[x]);
        self.push("masked_max", out, 1, c, rg, Op::MaskedMaxRows { x, argmax })
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, _) = self.dims(x);
        let mask = vec![true; r];
        self.masked_mean_rows(x, &mask)
    }

    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (r, _) = self.dims(x);
        let mask = vec![true; r];
        self.masked_max_rows(x, &mask)
    }

    fn check_row_mask(&self, op: &'static str, rows: usize, mask: &[bool]) -> Result<()> {
        if mask.len() != rows {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![rows],
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidMask {
                op,
                msg: "every step is masked".into(),
            });
        }
        Ok(())
    }

    /// Sum of all elements, as a `1 x 1` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self
            .data(x)
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let rg = self.any_grad(&[x]);
        self.push("sum", vec![total], 1, 1, rg, Op::Sum { x })
    }

    // ── Structure ───────────────────────────────────────────────────────

    /// Concatenate along `axis` (0 = stack rows, 1 = widen columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat: no inputs".into()));
        }
        if axis > 1 {
            return Err(Error::Contract(format!(
                "concat: axis must be 0 or 1, got {axis}"
            )));
        }
        let (r0, c0) = self.dims(parts[0]);
        let mut rows = r0;
        let mut cols = c0;
        for &p in &parts[1..] {
            let (r, c) = self.dims(p);
            if axis == 0 {
                if c != c0 {
                    return Err(self.shape_err("concat", parts[0], p));
                }
                rows += r;
            } else {
                if r != r0 {
                    return Err(self.shape_err("concat", parts[0], p));
                }
                cols += c;
            }
        }
        let mut out = vec![T::zero(); rows * cols];
        if axis == 0 {
            let mut offset = 0;
            for &p in parts {
                let d = self.data(p);
                out[offset..offset + d.len()].copy_from_slice(d);
                offset += d.len();
            }
        } else {
            let mut col_off = 0;
            for &p in parts {
                let (_, pc) = self.dims(p);
                let d = self.data(p);
                for i in 0..rows {
                    out[i * cols + col_off..i * cols + col_off + pc]
                        .copy_from_slice(&d[i * pc..(i + 1) * pc]);
                }
                col_off += pc;
            }
        }
        let rg = self.any_grad(parts);
        self.push(
            "concat",
            out,
            rows,
            cols,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Rows `[start, start + len)` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > r || len == 0 {
            return Err(Error::Contract(format!(
                "slice_rows: rows [{start}, {}) out of range for {r} rows",
                start + len
            )));
        }
        let out = self.data(x)[start * c..(start + len) * c].to_vec();
        let rg = self.any_grad(&[x]);
        self.push("slice_rows", out, len, c, rg, Op::SliceRows { x, start })
    }

    /// Look up rows of `table` by index; gradients scatter-add back.
    pub fn gather(&mut self, table: Var, rows: &[u32]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if let Some(&bad) = rows.iter().find(|&&i| i as usize >= v) {
            return Err(Error::Data(format!(
                "gather: index {bad} out of range for table with {v} rows"
            )));
        }
        let td = self.data(table);
        let mut out = vec![T::zero(); rows.len() * d];
        for (t, &i) in rows.iter().enumerate() {
            out[t * d..(t + 1) * d].copy_from_slice(&td[i as usize * d..(i as usize + 1) * d]);
        }
        let rg = self.any_grad(&[table]);
        let n = rows.len();
        let rows = Arc::new(rows.to_vec());
        self.push("gather", out, n, d, rg, Op::Gather { table, rows })
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`;
    /// in eval mode (or at rate 0) the input passes through unchanged.
    pub fn dropout<R: Rng>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let (r, c) = self.dims(x);
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..r * c)
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let m = self.constant(mask, r, c);
        self.mul(x, m)
    }

    /// Softmax cross-entropy of a `1 x classes` logit row against `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if r != 1 {
            return Err(Error::Contract(format!(
                "cross_entropy: expected a 1 x classes logit row, got {r} x {c}"
            )));
        }
        if target >= c {
            return Err(Error::Contract(format!(
                "cross_entropy: target {target} out of range for {c} classes"
            )));
        }
        let ld = self.data(logits);
        let mx = ld.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = ld
            .iter()
            .fold(T::zero(), |acc, &v| acc + (v - mx).exp())
            .ln()
            + mx;
        let loss = lse - ld[target];
        let rg = self.any_grad(&[logits]);
        self.push(
            "cross_entropy",
            vec![loss],
            1,
            1,
            rg,
            Op::CrossEntropy { logits, target },
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    fn add_grad(&mut self, v: Var, delta: &[T]) {
        let t = &mut self.records[v.0].tensor;
        if !t.requires_grad {
            return;
        }
        match &mut t.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta.iter()) {
                    *gi = *gi + *di;
                }
            }
            None => t.grad = Some(delta.to_vec()),
        }
    }

    /// Populate gradients for every `requires_grad` tensor reachable from
    /// the scalar `loss`. Tensors consumed more than once accumulate the
    /// sum of their path gradients. One-shot per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.ran_backward {
            return Err(Error::Contract(
                "backward already ran on this tape".into(),
            ));
        }
        if self.tensor(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.tensor(loss).shape()
            )));
        }
        if !self
            .records
            .iter()
            .any(|r| !matches!(r.op, Op::Leaf))
        {
            return Err(Error::Contract("backward: tape has no operations".into()));
        }
        self.ran_backward = true;
        self.records[loss.0].tensor.grad = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let g = match &self.records[idx].tensor.grad {
                Some(g) => g.clone(),
                None => continue,
            };
            // Ops don't mutate earlier records, so reading clones of the
            // inputs then accumulating is safe.
            match &self.records[idx].op {
                Op::Leaf => {}
                &Op::MatMul { a, b } => {
                    let (m, k) = self.dims(a);
                    let (_, n) = self.dims(b);
                    let ad = Arc::clone(&self.records[a.0].tensor.data);
                    let bd = Arc::clone(&self.records[b.0].tensor.data);
                    if self.tensor(a).requires_grad {
                        // da = g . b^T
                        let mut da = vec![T::zero(); m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let gv = g[i * n + j];
                                for p in 0..k {
                                    da[i * k + p] = da[i * k + p] + gv * bd[p * n + j];
                                }
                            }
                        }
                        self.add_grad(a, &da);
                    }
                    if self.tensor(b).requires_grad {
                        // db = a^T . g
                        let mut db = vec![T::zero(); k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let av = ad[i * k + p];
                                for j in 0..n {
                                    db[p * n + j] = db[p * n + j] + av * g[i * n + j];
                                }
                            }
                        }
                        self.add_grad(b, &db);
                    }
                }
                &Op::Transpose { x } => {
                    let (r, c) = self.dims(x);
                    let mut dx = vec![T::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g[j * r + i];
                        }
                    }
                    self.add_grad(x, &dx);
                }
                &Op::Add { a, b } => {
                    self.add_grad(a, &g);
                    self.add_grad(b, &g);
                }
                &Op::Sub { a, b } => {
                    self.add_grad(a, &g);
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    self.add_grad(b, &neg);
                }
                &Op::Mul { a, b } => {
                    let ad = Arc::clone(&self.records[a.0].tensor.data);
                    let bd = Arc::clone(&self.records[b.0].tensor.data);
                    if self.tensor(a).requires_grad {
                        let da: Vec<T> =
                            g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv * bv).collect();
                        self.add_grad(a, &da);
                    }
                    if self.tensor(b).requires_grad {
                        let db: Vec<T> =
                            g.iter().zip(ad.iter()).map(|(&gv, &av)| gv * av).collect();
                        self.add_grad(b, &db);
                    }
                }
                &Op::AddBias { x, bias } => {
                    let (r, c) = self.dims(x);
                    self.add_grad(x, &g);
                    if self.tensor(bias).requires_grad {
                        let mut db = vec![T::zero(); c];
                        for i in 0..r {
                            for j in 0..c {
                                db[j] = db[j] + g[i * c + j];
                            }
                        }
                        self.add_grad(bias, &db);
                    }
                }
                &Op::Tanh { x } => {
                    let y = Arc::clone(&self.records[idx].tensor.data);
                    let dx: Vec<T> = g
                        .iter()
                        .zip(y.iter())
                        .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                        .collect();
                    self.add_grad(x, &dx);
                }
                &Op::Sigmoid { x } => {
                    let y = Arc::clone(&self.records[idx].tensor.data);
                    let dx: Vec<T> = g
                        .iter()
                        .zip(y.iter())
                        .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                        .collect();
                    self.add_grad(x, &dx);
                }
                &Op::Exp { x } => {
                    let y = Arc::clone(&self.records[idx].tensor.data);
                    let dx: Vec<T> = g.iter().zip(y.iter()).map(|(&gv, &yv)| gv * yv).collect();
                    self.add_grad(x, &dx);
                }
                &Op::Selu { x } => {
                    let xd = Arc::clone(&self.records[x.0].tensor.data);
                    let dx: Vec<T> = g
                        .iter()
                        .zip(xd.iter())
                        .map(|(&gv, &xv)| gv * selu_grad(xv))
                        .collect();
                    self.add_grad(x, &dx);
                }
                Op::MaskedSoftmaxRows { x, mask } => {
                    let x = *x;
                    let mask = Arc::clone(mask);
                    let (r, c) = self.dims(x);
                    let y = Arc::clone(&self.records[idx].tensor.data);
                    let mut dx = vec![T::zero(); r * c];
                    for i in 0..r {
                        let mut dot = T::zero();
                        for j in 0..c {
                            if mask[j] {
                                dot = dot + g[i * c + j] * y[i * c + j];
                            }
                        }
                        for j in 0..c {
                            if mask[j] {
                                dx[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::Concat { parts, axis } => {
                    let parts = parts.clone();
                    let axis = *axis;
                    let (_, cols) = self.dims(Var(idx));
                    if axis == 0 {
                        let mut offset = 0;
                        for p in parts {
                            let (pr, pc) = self.dims(p);
                            let dp = g[offset..offset + pr * pc].to_vec();
                            self.add_grad(p, &dp);
                            offset += pr * pc;
                        }
                    } else {
                        let mut col_off = 0;
                        for p in parts {
                            let (pr, pc) = self.dims(p);
                            let mut dp = vec![T::zero(); pr * pc];
                            for i in 0..pr {
                                dp[i * pc..(i + 1) * pc].copy_from_slice(
                                    &g[i * cols + col_off..i * cols + col_off + pc],
                                );
                            }
                            self.add_grad(p, &dp);
                            col_off += pc;
                        }
                    }
                }
                &Op::SliceRows { x, start } => {
                    let (r, c) = self.dims(x);
                    let (len, _) = self.dims(Var(idx));
                    let mut dx = vec![T::zero(); r * c];
                    dx[start * c..(start + len) * c].copy_from_slice(&g);
                    self.add_grad(x, &dx);
                }
                &Op::ScaleRows { x, scale } => {
                    let (r, c) = self.dims(x);
                    let xd = Arc::clone(&self.records[x.0].tensor.data);
                    let sd = Arc::clone(&self.records[scale.0].tensor.data);
                    if self.tensor(x).requires_grad {
                        let mut dx = vec![T::zero(); r * c];
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] = g[i * c + j] * sd[i];
                            }
                        }
                        self.add_grad(x, &dx);
                    }
                    if self.tensor(scale).requires_grad {
                        let mut ds = vec![T::zero(); r];
                        for i in 0..r {
                            for j in 0..c {
                                ds[i] = ds[i] + g[i * c + j] * xd[i * c + j];
                            }
                        }
                        self.add_grad(scale, &ds);
                    }
                }
                Op::MaskedMeanRows { x, mask } => {
                    let x = *x;
                    let mask = Arc::clone(mask);
                    let (r, c) = self.dims(x);
                    let n = mask.iter().filter(|&&m| m).count();
                    let inv = T::one() / T::from_f64(n as f64);
                    let mut dx = vec![T::zero(); r * c];
                    for i in 0..r {
                        if mask[i] {
                            for j in 0..c {
                                dx[i * c + j] = g[j] * inv;
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::MaskedMaxRows { x, argmax } => {
                    let x = *x;
                    let argmax = argmax.clone();
                    let (r, c) = self.dims(x);
                    let mut dx = vec![T::zero(); r * c];
                    for (j, &i) in argmax.iter().enumerate() {
                        dx[i * c + j] = g[j];
                    }
                    self.add_grad(x, &dx);
                }
                Op::Gather { table, rows } => {
                    let table = *table;
                    let rows = Arc::clone(rows);
                    if self.tensor(table).requires_grad {
                        let (v, d) = self.dims(table);
                        let mut dt = vec![T::zero(); v * d];
                        for (t, &i) in rows.iter().enumerate() {
                            let i = i as usize;
                            for j in 0..d {
                                dt[i * d + j] = dt[i * d + j] + g[t * d + j];
                            }
                        }
                        self.add_grad(table, &dt);
                    }
                }
                &Op::Sum { x } => {
                    let n = self.tensor(x).numel();
                    let dx = vec![g[0]; n];
                    self.add_grad(x, &dx);
                }
                &Op::ScaleConst { x, c } => {
                    let dx: Vec<T> = g.iter().map(|&v| v * c).collect();
                    self.add_grad(x, &dx);
                }
                &Op::CrossEntropy { logits, target } => {
                    let ld = Arc::clone(&self.records[logits.0].tensor.data);
                    let mx = ld.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                    let denom = ld.iter().fold(T::zero(), |acc, &v| acc + (v - mx).exp());
                    let dx: Vec<T> = ld
                        .iter()
                        .enumerate()
                        .map(|(j, &v)| {
                            let p = (v - mx).exp() / denom;
                            let delta = if j == target { T::one() } else { T::zero() };
                            g[0] * (p - delta)
                        })
                        .collect();
                    self.add_grad(logits, &dx);
                }
            }
        }
        Ok(())
    }
}
