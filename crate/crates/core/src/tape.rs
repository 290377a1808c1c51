//! Reverse-mode differentiation over a linear recording of operations.
//!
//! A [`Tape`] records every forward operation together with the values its
//! backward rule needs. [`Tape::backward`] walks the recording once in reverse
//! and accumulates gradients (`+=`) at every fan-out, returning the gradient of
//! each bound parameter.
//!
//! ```
//! use graphcap::{Tape, Tensor};
//!
//! let mut tape = Tape::new(0);
//! let x = tape.leaf(Tensor::scalar(3.0), true);
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward_leaves(y).unwrap();
//! assert_eq!(grads[&x].item(), 6.0);
//! ```

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{matmul_acc, matmul_nt, matmul_tn_acc, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddOuter(Var, Var),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SliceCols(Var, usize),
    SelectRow(Var, usize),
    MeanRows(Var),
    SumAll(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Pick(Var, usize, usize),
    Gather(Var, Vec<usize>),
    Dropout(Var, Vec<f64>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Running statistics for batch normalization over a `batch × D` input.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(width: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Folds one batch's statistics into the running averages. `var` is the
    /// biased batch variance over `n` rows; the running estimate is unbiased.
    pub fn update(&mut self, mean: &[f64], var: &[f64], n: usize) {
        let correction = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b * correction;
        }
    }
}

/// Batch statistics produced by a training-mode [`Tape::batch_norm`] call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub rows: usize,
}

/// A single-threaded recording of forward operations.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    rng: ChaCha8Rng,
    fault_injection: bool,
}

impl Tape {
    /// Creates an empty recording whose stochastic ops draw from `seed`.
    pub fn new(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            fault_injection: false,
        }
    }

    /// Deliberately breaks the sigmoid backward rule. Negative control for
    /// the gradient checker only.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, on: bool) {
        self.fault_injection = on;
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a parameter to this recording; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))?;
        Ok(self.param(store, id))
    }

    // ---- linear algebra ---------------------------------------------------

    /// `a · b` for `m × k` and `k × n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `m × k` and `n × k`; the usual affine-layer product.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 {
            return Err(Error::shape("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize, bool)> {
        let (m, n) = self.dims(a)?;
        let (bm, bn) = self.dims(b)?;
        if bn != n || (bm != m && bm != 1) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok((m, n, bm == 1 && m != 1))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (m, n, bcast) = self.broadcast_check(op, a, b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<f64> = (0..m * n)
            .map(|idx| {
                let bi = if bcast { idx % n } else { idx };
                f(av[idx], bv[bi])
            })
            .collect();
        Ok((Tensor::new(vec![m, n], out)?, self.rg(a) || self.rg(b)))
    }

    /// Element-wise `a + b`; `b` may be a `1 × n` row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Element-wise product with the same row broadcasting as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.value(a).data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, factor), rg)
    }

    /// `out[i][j] = u[i] + w[j]` for column vectors `u` (`n × 1`) and `w` (`m × 1`).
    pub fn add_outer(&mut self, u: Var, w: Var) -> Result<Var> {
        let (n, c1) = self.dims(u)?;
        let (m, c2) = self.dims(w)?;
        if c1 != 1 || c2 != 1 {
            return Err(Error::shape("add_outer", self.shape(u), self.shape(w)));
        }
        let uv = self.value(u).data();
        let wv = self.value(w).data();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(uv[i] + wv[j]);
            }
        }
        let rg = self.rg(u) || self.rg(w);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::AddOuter(u, w), rg))
    }

    /// Concatenation along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Config("concat of nothing".into()))?;
        let (m, _) = self.dims(first)?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p)?;
            if pm != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks tensors with equal column counts on top of each other.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Config("stack of nothing".into()))?;
        let (_, n) = self.dims(first)?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p)?;
            if pn != n {
                return Err(Error::shape("stack_rows", self.shape(first), self.shape(p)));
            }
            rows += pm;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::StackRows(parts.to_vec()), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", self.shape(a), &[start, end]));
        }
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&self.value(a).row_slice(r)[start..end]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![m, end - start], out)?, Op::SliceCols(a, start), rg))
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if row >= m {
            return Err(Error::shape("select_row", self.shape(a), &[row]));
        }
        let out = self.value(a).row_slice(row).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::SelectRow(a, row), rg))
    }

    /// Mean over rows: `m × n → 1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let v = self.value(a);
        let out: Vec<f64> = (0..n)
            .map(|j| (0..m).map(|i| v.at(i, j)).sum::<f64>() / m as f64)
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows(a), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    // ---- element-wise nonlinearities ----------------------------------------

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let v = self.value(a);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            out.extend(softmax(v.row_slice(r)));
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Softmax(a), rg))
    }

    /// Row-wise softmax restricted to the `true` entries of `mask`
    /// (`m × n`, row-major). Masked-out entries are exactly zero.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if mask.len() != m * n {
            return Err(Error::shape("masked_softmax_rows", self.shape(a), &[mask.len()]));
        }
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = v.row_slice(r);
            let mrow = &mask[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Validation(format!("row {r} has an empty softmax support")));
            }
            let mut z = 0.0;
            for j in 0..n {
                if mrow[j] {
                    let e = (row[j] - max).exp();
                    out[r * n + j] = e;
                    z += e;
                }
            }
            for j in 0..n {
                out[r * n + j] /= z;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Softmax(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let v = self.value(a);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = v.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::LogSoftmax(a), rg))
    }

    /// The single element `a[row][col]` as a `1 × 1` tensor.
    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if row >= m || col >= n {
            return Err(Error::shape("pick", self.shape(a), &[row, col]));
        }
        let x = self.value(a).at(row, col);
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(x), Op::Pick(a, row, col), rg))
    }

    /// Rows of `table` selected by `indices`; backward scatters into those rows only.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(table)?;
        if indices.is_empty() {
            return Err(Error::Vocabulary("empty index list".into()));
        }
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::Vocabulary(format!("index {i} out of range for {m} rows")));
            }
            out.extend_from_slice(self.value(table).row_slice(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![indices.len(), n], out)?,
            Op::Gather(table, indices.to_vec()),
            rg,
        ))
    }

    /// Single-row embedding lookup.
    pub fn embedding_lookup(&mut self, table: Var, index: usize) -> Result<Var> {
        self.gather_rows(table, &[index])
    }

    /// Inverted dropout. Identity in eval mode or at rate zero.
    pub fn dropout(&mut self, a: Var, rate: f64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let v = self.value(a);
        let data = v.data().iter().zip(&mask).map(|(x, k)| x * k).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Dropout(a, mask), rg))
    }

    /// Per-feature batch normalization of a `batch × D` input followed by the
    /// learnable `gamma`/`beta` (`1 × D`). Training mode uses batch statistics
    /// and returns them so the caller can update `state`; eval mode uses the
    /// running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
        training: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (m, n) = self.dims(x)?;
        if self.dims(gamma)? != (1, n) || self.dims(beta)? != (1, n) {
            return Err(Error::shape("batch_norm", self.shape(x), self.shape(gamma)));
        }
        if state.running_mean.len() != n {
            return Err(Error::shape("batch_norm", self.shape(x), &[state.running_mean.len()]));
        }
        if training && m < 2 {
            return Err(Error::Validation(format!(
                "batch norm needs at least 2 rows in training mode, got {m}"
            )));
        }
        let xv = self.value(x);
        let (mean, var) = if training {
            let mean: Vec<f64> = (0..n)
                .map(|j| (0..m).map(|i| xv.at(i, j)).sum::<f64>() / m as f64)
                .collect();
            let var: Vec<f64> = (0..n)
                .map(|j| (0..m).map(|i| (xv.at(i, j) - mean[j]).powi(2)).sum::<f64>() / m as f64)
                .collect();
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let mut xhat = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                xhat[i * n + j] = (xv.at(i, j) - mean[j]) * inv_std[j];
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(k, xh)| g[k % n] * xh + b[k % n])
            .collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let stats = training.then(|| BatchStats {
            mean,
            var,
            rows: m,
        });
        let v = self.push(
            Tensor::new(vec![m, n], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            rg,
        );
        Ok((v, stats))
    }

    // ---- backward -----------------------------------------------------------

    fn backward_all(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let out = node.value.data();
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a)?;
                    let (_, n) = self.dims(*b)?;
                    if self.rg(*a) {
                        // dA = dC · Bᵀ
                        let mut tmp = vec![0.0; m * k];
                        matmul_nt(&g, self.value(*b).data(), m, n, k, &mut tmp);
                        add_into(acc(&mut grads, *a, m * k), &tmp);
                    }
                    if self.rg(*b) {
                        // dB = Aᵀ · dC
                        let av = self.value(*a).data();
                        matmul_tn_acc(av, &g, m, k, n, acc(&mut grads, *b, k * n));
                    }
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = self.dims(*a)?;
                    let (n, _) = self.dims(*b)?;
                    if self.rg(*a) {
                        // dA = dC · B
                        let bv = self.value(*b).data();
                        matmul_acc(&g, bv, m, n, k, acc(&mut grads, *a, m * k));
                    }
                    if self.rg(*b) {
                        // dB = dCᵀ · A
                        let av = self.value(*a).data();
                        matmul_tn_acc(&g, av, m, n, k, acc(&mut grads, *b, n * k));
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = self.dims(*a)?;
                    let ga = acc(&mut grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if self.rg(*a) {
                        add_into(acc(&mut grads, *a, g.len()), &g);
                    }
                    if self.rg(*b) {
                        let bl = self.value(*b).len();
                        let gb = acc(&mut grads, *b, bl);
                        for (k, gv) in g.iter().enumerate() {
                            gb[k % bl] += sign * gv;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let bl = bv.len();
                    if self.rg(*a) {
                        let ga = acc(&mut grads, *a, g.len());
                        for (k, gv) in g.iter().enumerate() {
                            ga[k] += gv * bv[k % bl];
                        }
                    }
                    if self.rg(*b) {
                        let gb = acc(&mut grads, *b, bl);
                        for (k, gv) in g.iter().enumerate() {
                            gb[k % bl] += gv * av[k];
                        }
                    }
                }
                Op::Scale(a, f) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for (x, gv) in ga.iter_mut().zip(&g) {
                        *x += f * gv;
                    }
                }
                Op::AddOuter(u, w) => {
                    let n = self.value(*u).len();
                    let m = self.value(*w).len();
                    if self.rg(*u) {
                        let gu = acc(&mut grads, *u, n);
                        for i in 0..n {
                            gu[i] += g[i * m..(i + 1) * m].iter().sum::<f64>();
                        }
                    }
                    if self.rg(*w) {
                        let gw = acc(&mut grads, *w, m);
                        for i in 0..n {
                            for j in 0..m {
                                gw[j] += g[i * m + j];
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = node.value.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let (_, pn) = self.dims(p)?;
                        if self.rg(p) {
                            let gp = acc(&mut grads, p, rows * pn);
                            for r in 0..rows {
                                for c in 0..pn {
                                    gp[r * pn + c] += g[r * total + offset + c];
                                }
                            }
                        }
                        offset += pn;
                    }
                }
                Op::StackRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.rg(p) {
                            add_into(acc(&mut grads, p, len), &g[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = self.dims(*a)?;
                    let (_, w) = node.value.dims2()?;
                    let ga = acc(&mut grads, *a, m * n);
                    for r in 0..m {
                        for c in 0..w {
                            ga[r * n + start + c] += g[r * w + c];
                        }
                    }
                }
                Op::SelectRow(a, row) => {
                    let (m, n) = self.dims(*a)?;
                    let ga = acc(&mut grads, *a, m * n);
                    add_into(&mut ga[row * n..(row + 1) * n], &g);
                }
                Op::MeanRows(a) => {
                    let (m, n) = self.dims(*a)?;
                    let ga = acc(&mut grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j] / m as f64;
                        }
                    }
                }
                Op::SumAll(a) => {
                    let len = self.value(*a).len();
                    let ga = acc(&mut grads, *a, len);
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
                Op::Tanh(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * (1.0 - out[k] * out[k]);
                    }
                }
                Op::Sigmoid(a) => {
                    let faulty = self.fault_injection;
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        let d = if faulty { out[k] } else { out[k] * (1.0 - out[k]) };
                        ga[k] += g[k] * d;
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let av = self.value(*a).data();
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * if av[k] > 0.0 { 1.0 } else { *slope };
                    }
                }
                Op::Exp(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * out[k];
                    }
                }
                Op::Softmax(a) => {
                    let (m, n) = node.value.dims2()?;
                    let ga = acc(&mut grads, *a, m * n);
                    for r in 0..m {
                        let s = &out[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = s.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for j in 0..n {
                            ga[r * n + j] += s[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let (m, n) = node.value.dims2()?;
                    let ga = acc(&mut grads, *a, m * n);
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..n {
                            ga[r * n + j] += gr[j] - out[r * n + j].exp() * gsum;
                        }
                    }
                }
                Op::Pick(a, row, col) => {
                    let (m, n) = self.dims(*a)?;
                    acc(&mut grads, *a, m * n)[row * n + col] += g[0];
                }
                Op::Gather(table, indices) => {
                    let (m, n) = self.dims(*table)?;
                    let gt = acc(&mut grads, *table, m * n);
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut gt[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
                Op::Dropout(a, mask) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * mask[k];
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    training,
                } => {
                    let (m, n) = node.value.dims2()?;
                    let gam = self.value(*gamma).data().to_vec();
                    if self.rg(*beta) {
                        let gb = acc(&mut grads, *beta, n);
                        for k in 0..m * n {
                            gb[k % n] += g[k];
                        }
                    }
                    if self.rg(*gamma) {
                        let gg = acc(&mut grads, *gamma, n);
                        for k in 0..m * n {
                            gg[k % n] += g[k] * xhat[k];
                        }
                    }
                    if self.rg(*x) {
                        let gx = acc(&mut grads, *x, m * n);
                        if *training {
                            let mf = m as f64;
                            for j in 0..n {
                                let mut sum_d = 0.0;
                                let mut sum_dx = 0.0;
                                for i in 0..m {
                                    let d = g[i * n + j] * gam[j];
                                    sum_d += d;
                                    sum_dx += d * xhat[i * n + j];
                                }
                                for i in 0..m {
                                    let d = g[i * n + j] * gam[j];
                                    gx[i * n + j] += inv_std[j] / mf
                                        * (mf * d - sum_d - xhat[i * n + j] * sum_dx);
                                }
                            }
                        } else {
                            for k in 0..m * n {
                                gx[k] += g[k] * gam[k % n] * inv_std[k % n];
                            }
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Back-propagates from a scalar `loss` and returns the gradient of every
    /// bound parameter. Parameters that did not influence the loss receive an
    /// explicit zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut grads = self.backward_all(loss)?;
        let mut out = Gradients::new();
        for (&id, &v) in &self.params {
            let g = if v.0 < grads.len() {
                grads[v.0].take()
            } else {
                None
            };
            let shape = self.shape(v).to_vec();
            let t = match g {
                Some(data) => Tensor::new(shape, data)?,
                None => Tensor::zeros(&shape),
            };
            out.insert(id, t);
        }
        Ok(out)
    }

    /// Like [`Tape::backward`] but keyed by every leaf that requires a gradient.
    pub fn backward_leaves(&self, loss: Var) -> Result<HashMap<Var, Tensor>> {
        let mut grads = self.backward_all(loss)?;
        let mut out = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf | Op::Param) {
                let data = if i < grads.len() { grads[i].take() } else { None };
                let t = match data {
                    Some(d) => Tensor::new(node.value.shape().to_vec(), d)?,
                    None => Tensor::zeros(node.value.shape()),
                };
                out.insert(Var(i), t);
            }
        }
        Ok(out)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_shape_error() {
        let mut tape = Tape::new(0);
        let i3 = tape.constant(Tensor::identity(3));
        let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let p = tape.matmul(i3, a).unwrap();
        assert_eq!(tape.value(p), tape.value(a));
        let err = tape.matmul(a, a).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn mean_rows_example() {
        let mut tape = Tape::new(0);
        let a = tape.constant(t(&[&[1.0, 3.0], &[5.0, 7.0]]));
        let m = tape.mean_rows(a).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
    }

    #[test]
    fn concat_passes_gradient_through() {
        let mut tape = Tape::new(0);
        let a = tape.leaf(Tensor::row(&[1.0, 2.0]), true);
        let b = tape.leaf(Tensor::row(&[3.0]), true);
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        let s = tape.sum_all(c);
        let g = tape.backward_leaves(s).unwrap();
        assert_eq!(g[&a].data(), &[1.0, 1.0]);
        assert_eq!(g[&b].data(), &[1.0]);
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::new(0);
        let x = tape.leaf(Tensor::row(&[0.0, -1.0]), true);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[0], 0.5);
        let l = tape.leaky_relu(x, 0.2);
        assert_relative_eq!(tape.value(l).data()[1], -0.2);
        let th = tape.tanh(x);
        let first = tape.pick(th, 0, 0).unwrap();
        let g = tape.backward_leaves(first).unwrap();
        assert_eq!(g[&x].data()[0], 1.0);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new(0);
        let x = tape.constant(Tensor::row(&[0.0, 0.0, 0.0]));
        let s = tape.softmax_rows(x).unwrap();
        for v in tape.value(s).data() {
            assert_relative_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let y = tape.constant(Tensor::row(&[1.0, 2.0]));
        let s = tape.softmax_rows(y).unwrap();
        assert!((tape.value(s).data()[0] - 0.26894).abs() < 1e-5);
        assert!((tape.value(s).data()[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn embedding_lookup_sparse_gradient_and_range() {
        let mut tape = Tape::new(0);
        let table = tape.leaf(Tensor::new(vec![4, 3], (0..12).map(f64::from).collect()).unwrap(), true);
        let row = tape.embedding_lookup(table, 2).unwrap();
        assert_eq!(tape.value(row).data(), &[6.0, 7.0, 8.0]);
        let s = tape.sum_all(row);
        let g = tape.backward_leaves(s).unwrap();
        let expected = [0., 0., 0., 0., 0., 0., 1., 1., 1., 0., 0., 0.];
        assert_eq!(g[&table].data(), &expected);
        assert!(matches!(tape.embedding_lookup(table, 4), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn one_hot_matmul_equals_lookup() {
        let mut tape = Tape::new(0);
        let table = tape.constant(Tensor::new(vec![4, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
        let onehot = tape.constant(Tensor::row(&[0.0, 0.0, 1.0, 0.0]));
        let via_mm = tape.matmul(onehot, table).unwrap();
        let via_lookup = tape.embedding_lookup(table, 2).unwrap();
        assert_eq!(tape.value(via_mm), tape.value(via_lookup));
    }

    #[test]
    fn dropout_modes() {
        let mut tape = Tape::new(7);
        let x = tape.constant(Tensor::full(&[1, 100_000], 1.0));
        assert_eq!(tape.dropout(x, 0.0, true).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.9, false).unwrap(), x);
        assert!(matches!(tape.dropout(x, 1.0, true), Err(Error::Config(_))));
        assert!(matches!(tape.dropout(x, -0.1, true), Err(Error::Config(_))));
        let d = tape.dropout(x, 0.5, true).unwrap();
        let zeros = tape.value(d).data().iter().filter(|v| **v == 0.0).count();
        let frac = zeros as f64 / 100_000.0;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
        assert!(tape.value(d).data().iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn batch_norm_examples() {
        let state = BatchNormState::new(2);
        let mut tape = Tape::new(0);
        let gamma = tape.constant(Tensor::full(&[1, 2], 1.0));
        let beta = tape.constant(Tensor::zeros(&[1, 2]));
        // per-feature mean 0, var 1
        let x = tape.constant(t(&[&[1.0, -1.0], &[-1.0, 1.0]]));
        let (y, stats) = tape.batch_norm(x, gamma, beta, &state, true).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(x)) < 1e-5);
        assert_eq!(stats.unwrap().mean, vec![0.0, 0.0]);

        let x = tape.constant(t(&[&[10.0, 3.0], &[-20.0, 50.0], &[7.0, -40.0], &[33.0, 1.0]]));
        let (y, _) = tape.batch_norm(x, gamma, beta, &state, true).unwrap();
        let v = tape.value(y);
        for j in 0..2 {
            let mean: f64 = (0..4).map(|i| v.at(i, j)).sum::<f64>() / 4.0;
            let var: f64 = (0..4).map(|i| (v.at(i, j) - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6, "{var}");
        }

        let one = tape.constant(Tensor::row(&[1.0, 2.0]));
        assert!(tape.batch_norm(one, gamma, beta, &state, true).is_err());
        let (a, _) = tape.batch_norm(x, gamma, beta, &state, false).unwrap();
        let (b, _) = tape.batch_norm(x, gamma, beta, &state, false).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn running_stats_update() {
        let mut s = BatchNormState::new(1);
        s.update(&[2.0], &[4.0], 2);
        assert_relative_eq!(s.running_mean[0], 0.2);
        assert_relative_eq!(s.running_var[0], 0.9 + 0.1 * 8.0);
    }

    #[test]
    fn backward_basics() {
        let mut tape = Tape::new(0);
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let unused = tape.leaf(Tensor::scalar(1.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward_leaves(y).unwrap();
        assert_eq!(g[&x].item(), 6.0);
        assert_eq!(g[&unused].item(), 0.0);

        let xx = tape.add(x, x).unwrap();
        let s = tape.sum_all(xx);
        assert_eq!(tape.backward_leaves(s).unwrap()[&x].item(), 2.0);

        let row = tape.leaf(Tensor::row(&[1.0, 2.0]), true);
        assert!(matches!(tape.backward(row), Err(Error::Shape { .. })));
    }
}
