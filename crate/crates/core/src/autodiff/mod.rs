//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node whose parents already exist on the tape, so
//! node order is a topological order and the backward sweep is a single pass
//! in reverse index order. Nodes that do not depend on any trainable leaf are
//! marked `requires_grad = false` and skipped entirely during the sweep.
//!
//! A tape lives on one thread from the forward pass through `backward`.

mod gru;

use crate::error::{Error, Result};
use crate::tensor::{gemm, softmax_into, Real, Tensor, NORM_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics of a training-mode batch-norm call, used to refresh running stats.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Unbiased variance.
    pub var: Vec<F>,
}

enum Op<F> {
    Leaf,
    Detach,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sum(Var),
    Mean(Var),
    ConcatCols(Var, Var),
    GatherCols {
        x: Var,
        idx: Vec<usize>,
    },
    RowDot(Var, Var),
    SoftmaxRows {
        x: Var,
        inv_tau: F,
    },
    LogSoftmaxRows {
        x: Var,
        inv_tau: F,
    },
    KlDiv {
        target: Tensor<F>,
        q: Var,
    },
    KlDivLog {
        target: Tensor<F>,
        log_q: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<F>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    Gru(Box<GruNode<F>>),
    MeanTime {
        x: Var,
        steps: usize,
        batch: usize,
    },
    SelectTime {
        x: Var,
        t: usize,
        batch: usize,
    },
}

struct GruNode<F> {
    x: Var,
    w_i: Var,
    w_h: Var,
    b_i: Var,
    b_h: Var,
    dims: gru::GruDims,
    saved: Option<gru::GruSaved<F>>,
}

struct Node<F> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

pub struct Tape<F: Real = f64> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of the loss w.r.t. `v`, zero-filled when absent.
    pub fn wrt(&self, tape: &Tape<F>, v: Var) -> Tensor<F> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }
}

fn dim_err<F: Real>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, false, Op::Detach)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = if trans_b {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(false, trans_b, m, n, k, ta.data(), tb.data(), F::zero(), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), rg, Op::MatMul { a, b, trans_b }))
    }

    /// `a * b` for `a: m x k`, `b: k x n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Adds a length-`C` bias to every row of an `R x C` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.numel() != c || tx.shape().len() != 2 {
            return Err(dim_err("add_bias", tx, tb));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            add_into(row, tb.data());
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, rg, Op::AddBias { x, bias }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(dim_err("add", ta, tb));
        }
        let mut out = ta.clone();
        add_into(out.data_mut(), tb.data());
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(dim_err("mul", ta, tb));
        }
        let mut out = ta.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(tb.data()) {
            *o *= v;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<F>() / F::from_f64(t.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(dim_err("concat_cols", ta, tb));
        }
        let (r, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(r, ca + cb, out), rg, Op::ConcatCols(a, b)))
    }

    /// `out[r][j] = x[r][idx[r][j]]`; `idx` is `R x K`, row-major.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize], k: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, n) = (tx.rows(), tx.cols());
        if idx.len() != r * k {
            return Err(Error::Dimension {
                op: "gather_cols",
                left: tx.shape().to_vec(),
                right: vec![idx.len() / k.max(1), k],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Usage(format!(
                "gather index {bad} out of range for {n} columns"
            )));
        }
        let mut out = Vec::with_capacity(r * k);
        for i in 0..r {
            let row = tx.row(i);
            out.extend(idx[i * k..(i + 1) * k].iter().map(|&j| row[j]));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(r, k, out),
            rg,
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Row-wise dot product, `R x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("row_dot", ta, tb));
        }
        let r = ta.rows();
        let out = (0..r)
            .map(|i| crate::tensor::dot(ta.row(i), tb.row(i)))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(r, 1, out), rg, Op::RowDot(a, b)))
    }

    fn check_tau(tau: F) -> Result<F> {
        if !(tau > F::zero()) || !tau.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be > 0, got {tau}"
            )));
        }
        Ok(tau.recip())
    }

    fn check_finite(&self, op: &str, x: Var) -> Result<()> {
        if !self.value(x).all_finite() {
            return Err(Error::Input(format!("{op}: non-finite input")));
        }
        Ok(())
    }

    /// Row-wise `softmax(x / tau)`.
    pub fn softmax_rows(&mut self, x: Var, tau: F) -> Result<Var> {
        let inv_tau = Self::check_tau(tau)?;
        self.check_finite("softmax", x)?;
        let tx = self.value(x);
        let mut out = tx.clone();
        let c = tx.cols();
        for (o, row) in out.data_mut().chunks_exact_mut(c).zip(tx.data().chunks_exact(c)) {
            softmax_into(row, inv_tau, o);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::SoftmaxRows { x, inv_tau }))
    }

    /// Row-wise `log softmax(x / tau)`.
    pub fn log_softmax_rows(&mut self, x: Var, tau: F) -> Result<Var> {
        let inv_tau = Self::check_tau(tau)?;
        self.check_finite("log_softmax", x)?;
        let tx = self.value(x);
        let mut out = tx.clone();
        let c = tx.cols();
        for (o, row) in out.data_mut().chunks_exact_mut(c).zip(tx.data().chunks_exact(c)) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row
                .iter()
                .map(|&l| ((l - max) * inv_tau).exp())
                .sum::<F>()
                .ln();
            for (ov, &l) in o.iter_mut().zip(row) {
                *ov = (l - max) * inv_tau - lse;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::LogSoftmaxRows { x, inv_tau }))
    }

    /// Batch-mean `KL(target || q)` where rows of `q` are probabilities and
    /// `target` is a constant.
    pub fn kl_div(&mut self, target: Tensor<F>, q: Var) -> Result<Var> {
        let tq = self.value(q);
        if target.shape() != tq.shape() {
            return Err(dim_err("kl_div", &target, tq));
        }
        let rows = F::from_f64(tq.rows() as f64);
        let mut acc = F::zero();
        for (i, (&p, &qi)) in target.data().iter().zip(tq.data()).enumerate() {
            if p == F::zero() {
                continue;
            }
            if qi <= F::zero() {
                return Err(Error::NumericDomain(format!(
                    "kl_div: q = {qi} at flat index {i} where p = {p}"
                )));
            }
            acc += p * (p / qi).ln();
        }
        let rg = self.rg(&[q]);
        Ok(self.push(Tensor::scalar(acc / rows), rg, Op::KlDiv { target, q }))
    }

    /// Batch-mean `KL(target || exp(log_q))`, the `kl_div(..., reduction =
    /// 'batchmean')` convention with log-probability inputs.
    pub fn kl_div_log(&mut self, target: Tensor<F>, log_q: Var) -> Result<Var> {
        let tq = self.value(log_q);
        if target.shape() != tq.shape() {
            return Err(dim_err("kl_div_log", &target, tq));
        }
        let rows = F::from_f64(tq.rows() as f64);
        let mut acc = F::zero();
        for (&p, &lq) in target.data().iter().zip(tq.data()) {
            if p > F::zero() {
                acc += p * (p.ln() - lq);
            }
        }
        let rg = self.rg(&[log_q]);
        Ok(self.push(
            Tensor::scalar(acc / rows),
            rg,
            Op::KlDivLog { target, log_q },
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check_finite("cross_entropy", logits)?;
        let tl = self.value(logits);
        let (r, c) = (tl.rows(), tl.cols());
        if targets.len() != r {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Usage(format!("target class {bad} >= {c}")));
        }
        let mut probs = vec![F::zero(); r * c];
        let mut loss = F::zero();
        for i in 0..r {
            let row = tl.row(i);
            let p = &mut probs[i * c..(i + 1) * c];
            let log_z = softmax_into(row, F::one(), p);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            loss += log_z - (row[targets[i]] - max);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / F::from_f64(r as f64)),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = tx.clone();
        let mut norms = Vec::with_capacity(tx.rows());
        for (i, row) in out.data_mut().chunks_exact_mut(c).enumerate() {
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            if !(n.as_f64() > NORM_EPS) {
                return Err(Error::DegenerateInput(format!(
                    "row {i} has norm {n}; cannot normalize"
                )));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::L2NormalizeRows { x, norms }))
    }

    /// Batch normalization over the rows of an `R x F` matrix.
    ///
    /// With `running = None` the batch statistics are used and returned;
    /// otherwise the given `(mean, var)` are applied as fixed statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[F], &[F])>,
        eps: F,
    ) -> Result<(Var, Option<BatchStats<F>>)> {
        let tx = self.value(x);
        let (r, f) = (tx.rows(), tx.cols());
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != f || tb.numel() != f {
            return Err(dim_err("batch_norm", tx, tg));
        }
        if r == 0 {
            return Err(Error::Input("batch_norm over zero rows".into()));
        }
        let (mean, var_biased, stats) = match running {
            Some((m, v)) => {
                if m.len() != f || v.len() != f {
                    return Err(Error::Dimension {
                        op: "batch_norm",
                        left: vec![f],
                        right: vec![m.len(), v.len()],
                    });
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let rf = F::from_f64(r as f64);
                let mut mean = vec![F::zero(); f];
                for row in tx.data().chunks_exact(f) {
                    add_into(&mut mean, row);
                }
                mean.iter_mut().for_each(|m| *m /= rf);
                let mut var = vec![F::zero(); f];
                for row in tx.data().chunks_exact(f) {
                    for j in 0..f {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                let unbiased: Vec<F> = if r > 1 {
                    let denom = F::from_f64((r - 1) as f64);
                    var.iter().map(|&v| v / denom).collect()
                } else {
                    var.clone()
                };
                var.iter_mut().for_each(|v| *v /= rf);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<F> = var_biased.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let mut xhat = vec![F::zero(); r * f];
        let mut out = vec![F::zero(); r * f];
        for (i, row) in tx.data().chunks_exact(f).enumerate() {
            for j in 0..f {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat[i * f + j] = h;
                out[i * f + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let batch_stats = stats.is_some();
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::matrix(r, f, out),
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        Ok((v, stats))
    }

    /// One GRU layer over a time-major `(steps * batch) x input` sequence.
    ///
    /// `w_i: input x 3H`, `w_h: H x 3H`, `b_i, b_h: 3H`, gate order
    /// `[reset | update | candidate]`. When `reverse` is set the recurrence
    /// runs from the last step to the first; outputs stay indexed by time.
    #[allow(clippy::too_many_arguments)]
    pub fn gru(
        &mut self,
        x: Var,
        w_i: Var,
        w_h: Var,
        b_i: Var,
        b_h: Var,
        steps: usize,
        batch: usize,
        reverse: bool,
    ) -> Result<Var> {
        let (tx, twi, twh) = (self.value(x), self.value(w_i), self.value(w_h));
        let input = tx.cols();
        if tx.rows() != steps * batch || steps == 0 {
            return Err(Error::Dimension {
                op: "gru",
                left: tx.shape().to_vec(),
                right: vec![steps, batch],
            });
        }
        if twi.shape().len() != 2 || twi.shape()[0] != input || twi.shape()[1] % 3 != 0 {
            return Err(dim_err("gru", tx, twi));
        }
        let hidden = twi.shape()[1] / 3;
        if twh.shape() != [hidden, 3 * hidden] {
            return Err(dim_err("gru", twi, twh));
        }
        if self.value(b_i).numel() != 3 * hidden || self.value(b_h).numel() != 3 * hidden {
            return Err(dim_err("gru", twi, self.value(b_i)));
        }
        let dims = gru::GruDims {
            steps,
            batch,
            input,
            hidden,
            reverse,
        };
        let rg = self.rg(&[x, w_i, w_h, b_i, b_h]);
        let (out, saved) = gru::forward(
            &dims,
            tx.data(),
            twi.data(),
            twh.data(),
            self.value(b_i).data(),
            self.value(b_h).data(),
            rg,
        );
        Ok(self.push(
            Tensor::matrix(steps * batch, hidden, out),
            rg,
            Op::Gru(Box::new(GruNode {
                x,
                w_i,
                w_h,
                b_i,
                b_h,
                dims,
                saved,
            })),
        ))
    }

    /// Mean over time of a time-major `(steps * batch) x C` sequence.
    pub fn mean_time(&mut self, x: Var, steps: usize, batch: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rows() != steps * batch || steps == 0 {
            return Err(Error::Dimension {
                op: "mean_time",
                left: tx.shape().to_vec(),
                right: vec![steps, batch],
            });
        }
        let c = tx.cols();
        let mut out = vec![F::zero(); batch * c];
        for t in 0..steps {
            add_into(&mut out, &tx.data()[t * batch * c..(t + 1) * batch * c]);
        }
        let inv = F::from_f64(steps as f64).recip();
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(batch, c, out),
            rg,
            Op::MeanTime { x, steps, batch },
        ))
    }

    /// The `batch x C` block at time `t` of a time-major sequence.
    pub fn select_time(&mut self, x: Var, t: usize, steps: usize, batch: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rows() != steps * batch || t >= steps {
            return Err(Error::Dimension {
                op: "select_time",
                left: tx.shape().to_vec(),
                right: vec![t, steps, batch],
            });
        }
        let c = tx.cols();
        let out = tx.data()[t * batch * c..(t + 1) * batch * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(batch, c, out),
            rg,
            Op::SelectTime { x, t, batch },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lt.shape(), F::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, delta: &[F]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => add_into(g.data_mut(), delta),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, delta.to_vec()).expect("gradient shape"));
            }
        }
    }

    fn propagate(
        &self,
        node: &Node<F>,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = node.value.shape()[1];
                if self.requires_grad(*a) {
                    let mut da = vec![F::zero(); m * k];
                    // dA = dC op(B)^T
                    gemm(false, !trans_b, m, k, n, gd, tb.data(), F::zero(), &mut da);
                    self.accumulate(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![F::zero(); k * n];
                    if *trans_b {
                        // B is n x k: dB = dC^T A
                        gemm(true, false, n, k, m, gd, ta.data(), F::zero(), &mut db);
                    } else {
                        gemm(true, false, k, n, m, ta.data(), gd, F::zero(), &mut db);
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, gd);
                if self.requires_grad(*bias) {
                    let c = g.cols();
                    let mut db = vec![F::zero(); c];
                    for row in gd.chunks_exact(c) {
                        add_into(&mut db, row);
                    }
                    self.accumulate(grads, *bias, &db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd);
                self.accumulate(grads, *b, gd);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d: Vec<F> = gd.iter().zip(tb.data()).map(|(&g, &v)| g * v).collect();
                    self.accumulate(grads, *a, &d);
                }
                if self.requires_grad(*b) {
                    let d: Vec<F> = gd.iter().zip(ta.data()).map(|(&g, &v)| g * v).collect();
                    self.accumulate(grads, *b, &d);
                }
            }
            Op::Scale(x, c) => {
                let d: Vec<F> = gd.iter().map(|&v| v * *c).collect();
                self.accumulate(grads, *x, &d);
            }
            Op::Sum(x) => {
                let d = vec![gd[0]; self.value(*x).numel()];
                self.accumulate(grads, *x, &d);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let d = vec![gd[0] / F::from_f64(n as f64); n];
                self.accumulate(grads, *x, &d);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let r = g.rows();
                let mut da = Vec::with_capacity(r * ca);
                let mut db = Vec::with_capacity(r * cb);
                for row in gd.chunks_exact(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::GatherCols { x, idx } => {
                let tx = self.value(*x);
                let n = tx.cols();
                let k = g.cols();
                let mut dx = vec![F::zero(); tx.numel()];
                for (i, row) in gd.chunks_exact(k).enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        dx[i * n + idx[i * k + j]] += v;
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.cols();
                if self.requires_grad(*a) {
                    let mut da = vec![F::zero(); ta.numel()];
                    for (i, &gi) in gd.iter().enumerate() {
                        for j in 0..c {
                            da[i * c + j] = gi * tb.data()[i * c + j];
                        }
                    }
                    self.accumulate(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![F::zero(); tb.numel()];
                    for (i, &gi) in gd.iter().enumerate() {
                        for j in 0..c {
                            db[i * c + j] = gi * ta.data()[i * c + j];
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::SoftmaxRows { x, inv_tau } => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = vec![F::zero(); y.len()];
                for ((dxr, yr), gr) in dx
                    .chunks_exact_mut(c)
                    .zip(y.chunks_exact(c))
                    .zip(gd.chunks_exact(c))
                {
                    let s: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dxr[j] = *inv_tau * yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::LogSoftmaxRows { x, inv_tau } => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = vec![F::zero(); y.len()];
                for ((dxr, yr), gr) in dx
                    .chunks_exact_mut(c)
                    .zip(y.chunks_exact(c))
                    .zip(gd.chunks_exact(c))
                {
                    let s: F = gr.iter().copied().sum();
                    for j in 0..c {
                        dxr[j] = *inv_tau * (gr[j] - yr[j].exp() * s);
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::KlDiv { target, q } => {
                let tq = self.value(*q);
                let scale = gd[0] / F::from_f64(tq.rows() as f64);
                let d: Vec<F> = target
                    .data()
                    .iter()
                    .zip(tq.data())
                    .map(|(&p, &qi)| if p == F::zero() { F::zero() } else { -scale * p / qi })
                    .collect();
                self.accumulate(grads, *q, &d);
            }
            Op::KlDivLog { target, log_q } => {
                let rows = self.value(*log_q).rows();
                let scale = gd[0] / F::from_f64(rows as f64);
                let d: Vec<F> = target.data().iter().map(|&p| -scale * p).collect();
                self.accumulate(grads, *log_q, &d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = gd[0] / F::from_f64(targets.len() as f64);
                let mut d: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] -= scale;
                }
                self.accumulate(grads, *logits, &d);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = vec![F::zero(); y.len()];
                for (i, &n) in norms.iter().enumerate() {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &gd[i * c..(i + 1) * c];
                    let s: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = (gr[j] - yr[j] * s) / n;
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let f = inv_std.len();
                let r = gd.len() / f;
                let tg = self.value(*gamma).data();
                let mut dgamma = vec![F::zero(); f];
                let mut dbeta = vec![F::zero(); f];
                for (gr, hr) in gd.chunks_exact(f).zip(xhat.chunks_exact(f)) {
                    for j in 0..f {
                        dbeta[j] += gr[j];
                        dgamma[j] += gr[j] * hr[j];
                    }
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![F::zero(); gd.len()];
                    if *batch_stats {
                        // dx = inv_std / R * (R dxhat - sum dxhat - xhat sum(dxhat xhat))
                        let rf = F::from_f64(r as f64);
                        for i in 0..r {
                            for j in 0..f {
                                let dxhat = gd[i * f + j] * tg[j];
                                dx[i * f + j] = inv_std[j] / rf
                                    * (rf * dxhat
                                        - dbeta[j] * tg[j]
                                        - xhat[i * f + j] * dgamma[j] * tg[j]);
                            }
                        }
                    } else {
                        for i in 0..r {
                            for j in 0..f {
                                dx[i * f + j] = gd[i * f + j] * tg[j] * inv_std[j];
                            }
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
                self.accumulate(grads, *gamma, &dgamma);
                self.accumulate(grads, *beta, &dbeta);
            }
            Op::Gru(n) => {
                let saved = n.saved.as_ref().expect("gru saved state");
                let gg = gru::backward(
                    &n.dims,
                    self.value(n.x).data(),
                    self.value(n.w_i).data(),
                    self.value(n.w_h).data(),
                    node.value.data(),
                    saved,
                    gd,
                    self.requires_grad(n.x),
                );
                if let Some(dx) = gg.dx {
                    self.accumulate(grads, n.x, &dx);
                }
                self.accumulate(grads, n.w_i, &gg.dw_i);
                self.accumulate(grads, n.w_h, &gg.dw_h);
                self.accumulate(grads, n.b_i, &gg.db_i);
                self.accumulate(grads, n.b_h, &gg.db_h);
            }
            Op::MeanTime { x, steps, batch } => {
                let c = g.cols();
                let inv = F::from_f64(*steps as f64).recip();
                let mut dx = Vec::with_capacity(steps * batch * c);
                for _ in 0..*steps {
                    dx.extend(gd.iter().map(|&v| v * inv));
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::SelectTime { x, t, batch } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut dx = vec![F::zero(); tx.numel()];
                dx[t * batch * c..(t + 1) * batch * c].copy_from_slice(gd);
                self.accumulate(grads, *x, &dx);
            }
        }
        Ok(())
    }
}
