use super::params::{BufId, Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Whether a forward pass runs with training semantics (batch statistics in
/// batchnorm) or inference semantics (running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Param(ParamId),
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Matmul(usize, usize),
    MatmulNT(usize, usize),
    Conv1d {
        x: usize,
        w: usize,
    },
    AvgPool1d(usize),
    Relu(usize),
    Tanh(usize),
    Abs(usize),
    Sum(usize),
    MeanRows(usize),
    ScaleRows {
        x: usize,
        weights: Vec<f64>,
    },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(usize),
    CrossEntropy {
        logits: usize,
        probs: Tensor,
        targets: Vec<usize>,
        weights: Vec<f64>,
        wsum: f64,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    RepeatRows {
        x: usize,
        counts: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
        width: usize,
    },
    ConcatCols(Vec<usize>),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation over one graph.
///
/// Every operation appends a node holding its output value; `backward`
/// replays the tape in reverse and returns per-parameter gradients. The tape
/// reads parameter values from a shared [`ParamStore`]; batchnorm statistic
/// updates are queued on the tape and applied by the caller, which keeps
/// inference forward passes free of side effects.
pub struct Tape<'s> {
    store: &'s ParamStore,
    phase: Phase,
    track_stats: bool,
    nodes: Vec<Node>,
    stat_updates: Vec<(BufId, Tensor)>,
    consumed: bool,
}

const EPS_NORM: f64 = 1e-5;

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore, phase: Phase) -> Tape<'s> {
        Tape {
            store,
            phase,
            track_stats: phase == Phase::Train,
            nodes: Vec::new(),
            stat_updates: Vec::new(),
            consumed: false,
        }
    }

    /// Disable running-statistic updates (used by finite-difference probes,
    /// which must evaluate the loss without mutating model state).
    pub fn without_stat_updates(mut self) -> Tape<'s> {
        self.track_stats = false;
        self
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => &self.store.param(*id).value,
        }
    }

    pub fn take_stat_updates(&mut self) -> Vec<(BufId, Tensor)> {
        std::mem::take(&mut self.stat_updates)
    }

    pub(crate) fn queue_stat_update(&mut self, buf: BufId, value: Tensor) {
        if self.track_stats {
            self.stat_updates.push((buf, value));
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite forward output");
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const, false)
    }

    // ── elementwise and reductions ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(out, op, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * c).collect();
        let out = Tensor::from_vec(t.shape(), data).expect("scale preserves shape");
        let needs = self.needs(x.0);
        self.push(out, Op::Scale(x.0, c), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_op(x, Op::Relu(x.0), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_op(x, Op::Tanh(x.0), f64::tanh)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map_op(x, Op::Abs(x.0), f64::abs)
    }

    fn map_op(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_vec(t.shape(), data).expect("map preserves shape");
        let needs = self.needs(x.0);
        self.push(out, op, needs)
    }

    /// Sum of all entries, as a `[1,1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x.0);
        self.push(Tensor::scalar(total), Op::Sum(x.0), needs)
    }

    /// Column means of an `N×D` tensor, as `1×D`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, d) = (t.rows(), t.cols());
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let out = Tensor::from_vec(&[1, d], out).expect("mean_rows shape");
        let needs = self.needs(x.0);
        self.push(out, Op::MeanRows(x.0), needs)
    }

    /// Multiply row `i` by the constant weight `weights[i]` (loss masking).
    pub fn scale_rows(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if weights.len() != t.rows() {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                detail: format!("{} weights for {} rows", weights.len(), t.rows()),
            });
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(t.numel());
        for (r, &w) in weights.iter().enumerate() {
            data.extend(t.row(r).iter().map(|&v| v * w));
        }
        let out = Tensor::from_vec(&[weights.len(), cols], data)?;
        let needs = self.needs(x.0);
        Ok(self.push(
            out,
            Op::ScaleRows {
                x: x.0,
                weights: weights.to_vec(),
            },
            needs,
        ))
    }

    // ── matrix products ─────────────────────────────────────────────────

    /// Fully-connected layer: `x·W + b` with `x: N×Din`, `W: Din×Dout`, `b: 1×Dout`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.shape().len() != 2 || tw.shape().len() != 2 || tx.cols() != tw.rows() {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!("x {:?} · W {:?}", tx.shape(), tw.shape()),
            });
        }
        let (n, din, dout) = (tx.rows(), tw.rows(), tw.cols());
        if tb.numel() != dout {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!("bias {:?} for {dout} outputs", tb.shape()),
            });
        }
        let mut out = Vec::with_capacity(n * dout);
        for r in 0..n {
            out.extend_from_slice(tb.data());
            let orow = &mut out[r * dout..(r + 1) * dout];
            let xrow = tx.row(r);
            for i in 0..din {
                axpy(xrow[i], tw.row(i), orow);
            }
        }
        let out = Tensor::from_vec(&[n, dout], out)?;
        let needs = self.needs(x.0) || self.needs(w.0) || self.needs(b.0);
        Ok(self.push(out, Op::Linear { x: x.0, w: w.0, b: b.0 }, needs))
    }

    /// `a·b` with `a: N×K`, `b: K×M`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} · {:?}", ta.shape(), tb.shape()),
            });
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let orow = &mut out[r * m..(r + 1) * m];
            let arow = ta.row(r);
            for p in 0..k {
                axpy(arow[p], tb.row(p), orow);
            }
        }
        let out = Tensor::from_vec(&[n, m], out)?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(out, Op::Matmul(a.0, b.0), needs))
    }

    /// `a·bᵀ` with `a: N×K`, `b: M×K`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("{:?} · {:?}ᵀ", ta.shape(), tb.shape()),
            });
        }
        let (n, m) = (ta.rows(), tb.rows());
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            let arow = ta.row(r);
            for q in 0..m {
                out.push(dot(arow, tb.row(q)));
            }
        }
        let out = Tensor::from_vec(&[n, m], out)?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(out, Op::MatmulNT(a.0, b.0), needs))
    }

    // ── sequence operations ─────────────────────────────────────────────

    /// Same-padded 1-D convolution over time: `x: T×Cin`, `w: K×Cin×Cout`.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                detail: format!("kernel rank {:?}", tw.shape()),
            });
        }
        let (k, cin, cout) = (tw.dim(0), tw.dim(1), tw.dim(2));
        if k % 2 == 0 {
            return Err(Error::Config {
                field: "kernel",
                detail: format!("conv1d kernel width must be odd, got {k}"),
            });
        }
        if tx.cols() != cin {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                detail: format!("input {:?} vs kernel {:?}", tx.shape(), tw.shape()),
            });
        }
        let t_len = tx.rows();
        let pad = (k / 2) as isize;
        let wdata = tw.data();
        let mut out = vec![0.0; t_len * cout];
        for t in 0..t_len {
            let orow = &mut out[t * cout..(t + 1) * cout];
            for dk in 0..k {
                let s = t as isize + dk as isize - pad;
                if s < 0 || s >= t_len as isize {
                    continue;
                }
                let xrow = tx.row(s as usize);
                let wbase = dk * cin * cout;
                for (i, &xv) in xrow.iter().enumerate() {
                    axpy(xv, &wdata[wbase + i * cout..wbase + (i + 1) * cout], orow);
                }
            }
        }
        let out = Tensor::from_vec(&[t_len, cout], out)?;
        let needs = self.needs(x.0) || self.needs(w.0);
        Ok(self.push(out, Op::Conv1d { x: x.0, w: w.0 }, needs))
    }

    /// Non-overlapping window-2 average pooling with edge replication on an
    /// odd tail, so the output length is `ceil(T/2)` for every `T ≥ 1`.
    pub fn avgpool1d(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c) = (t.rows(), t.cols());
        let s_len = n.div_ceil(2);
        let mut out = Vec::with_capacity(s_len * c);
        for s in 0..s_len {
            let lo = t.row(2 * s);
            let hi = t.row((2 * s + 1).min(n - 1));
            out.extend(lo.iter().zip(hi).map(|(&a, &b)| 0.5 * (a + b)));
        }
        let out = Tensor::from_vec(&[s_len, c], out).expect("avgpool shape");
        let needs = self.needs(x.0);
        self.push(out, Op::AvgPool1d(x.0), needs)
    }

    // ── normalization ───────────────────────────────────────────────────

    /// Batch normalization over the row axis with learned per-channel
    /// scale/shift. In `Train` phase rows are normalized with batch
    /// statistics and a `(mean, var)` update is queued for the running
    /// buffers; in `Eval` the provided running statistics are used.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (BufId, BufId),
        momentum: f64,
    ) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = (t.rows(), t.cols());
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::ShapeMismatch {
                op: "batchnorm1d",
                detail: format!("{c} channels vs scale/shift extents"),
            });
        }
        match self.phase {
            Phase::Train => {
                if n < 2 {
                    return Err(Error::InvalidInput(format!(
                        "batchnorm1d in train mode needs at least 2 rows, got {n}"
                    )));
                }
                let mut mean = vec![0.0; c];
                for r in 0..n {
                    for (m, v) in mean.iter_mut().zip(t.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for r in 0..n {
                    for ((vv, v), m) in var.iter_mut().zip(t.row(r)).zip(&mean) {
                        let d = v - m;
                        *vv += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + EPS_NORM).sqrt()).collect();
                let mut xhat = Vec::with_capacity(n * c);
                for r in 0..n {
                    for ((v, m), inv) in t.row(r).iter().zip(&mean).zip(&inv_std) {
                        xhat.push((v - m) * inv);
                    }
                }
                let xhat = Tensor::from_vec(&[n, c], xhat)?;
                let g = self.value(gamma).data().to_vec();
                let b = self.value(beta).data().to_vec();
                let mut out = Vec::with_capacity(n * c);
                for r in 0..n {
                    for ((h, gv), bv) in xhat.row(r).iter().zip(&g).zip(&b) {
                        out.push(h * gv + bv);
                    }
                }
                // Running stats track the unbiased variance.
                if self.track_stats {
                    let (rm_id, rv_id) = running;
                    let rm = self.store.buffer(rm_id);
                    let rv = self.store.buffer(rv_id);
                    let unbias = n as f64 / (n as f64 - 1.0);
                    let new_mean: Vec<f64> = rm
                        .data()
                        .iter()
                        .zip(&mean)
                        .map(|(&old, &b)| (1.0 - momentum) * old + momentum * b)
                        .collect();
                    let new_var: Vec<f64> = rv
                        .data()
                        .iter()
                        .zip(&var)
                        .map(|(&old, &b)| (1.0 - momentum) * old + momentum * b * unbias)
                        .collect();
                    self.queue_stat_update(rm_id, Tensor::from_vec(&[1, c], new_mean)?);
                    self.queue_stat_update(rv_id, Tensor::from_vec(&[1, c], new_var)?);
                }
                let out = Tensor::from_vec(&[n, c], out)?;
                let needs = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
                Ok(self.push(
                    out,
                    Op::BatchNormTrain {
                        x: x.0,
                        gamma: gamma.0,
                        beta: beta.0,
                        xhat,
                        inv_std,
                    },
                    needs,
                ))
            }
            Phase::Eval => {
                let (rm_id, rv_id) = running;
                let mean = self.store.buffer(rm_id).data().to_vec();
                let var = self.store.buffer(rv_id).data().to_vec();
                let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + EPS_NORM).sqrt()).collect();
                let mut xhat = Vec::with_capacity(n * c);
                for r in 0..n {
                    for ((v, m), inv) in t.row(r).iter().zip(&mean).zip(&inv_std) {
                        xhat.push((v - m) * inv);
                    }
                }
                let xhat = Tensor::from_vec(&[n, c], xhat)?;
                let g = self.value(gamma).data().to_vec();
                let b = self.value(beta).data().to_vec();
                let mut out = Vec::with_capacity(n * c);
                for r in 0..n {
                    for ((h, gv), bv) in xhat.row(r).iter().zip(&g).zip(&b) {
                        out.push(h * gv + bv);
                    }
                }
                let out = Tensor::from_vec(&[n, c], out)?;
                let needs = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
                Ok(self.push(
                    out,
                    Op::BatchNormEval {
                        x: x.0,
                        gamma: gamma.0,
                        beta: beta.0,
                        xhat,
                        inv_std,
                    },
                    needs,
                ))
            }
        }
    }

    /// Per-row normalization with learned scale/shift over the feature axis.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = (t.rows(), t.cols());
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                detail: format!("{d} features vs scale/shift extents"),
            });
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut xhat = Vec::with_capacity(n * d);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + EPS_NORM).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let xhat = Tensor::from_vec(&[n, d], xhat)?;
        let out = Tensor::from_vec(&[n, d], out)?;
        let needs = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Row-wise softmax, numerically stabilized by the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, m) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / total));
        }
        let out = Tensor::from_vec(&[n, m], out).expect("softmax shape");
        let needs = self.needs(x.0);
        self.push(out, Op::SoftmaxRows(x.0), needs)
    }

    /// Weighted mean of per-row `−log softmax(logits)[target]`.
    ///
    /// Weights are loss-mask values; rows with weight zero contribute
    /// exactly nothing. The plain unweighted form passes all-ones.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        let (n, c) = (t.rows(), t.cols());
        if targets.len() != n || weights.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{n} rows vs {} targets / {} weights", targets.len(), weights.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidInput(format!(
                "cross_entropy target {bad} out of range for {c} classes"
            )));
        }
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(Error::InvalidInput(
                "cross_entropy requires a positive total weight".into(),
            ));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = 0.0;
        for r in 0..n {
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let logp = row[targets[r]] - max - total.ln();
            loss -= weights[r] * logp;
            probs.extend(exps.iter().map(|e| e / total));
        }
        loss /= wsum;
        let probs = Tensor::from_vec(&[n, c], probs)?;
        let needs = self.needs(logits.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                wsum,
            },
            needs,
        ))
    }

    // ── indexing / reshaping ────────────────────────────────────────────

    /// Embedding lookup: copy `table` rows at `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = (t.rows(), t.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidInput(format!(
                "gather_rows index {bad} out of range for table with {v} rows"
            )));
        }
        if ids.is_empty() {
            return Err(Error::InvalidInput("gather_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_vec(&[ids.len(), d], out)?;
        let needs = self.needs(table.0);
        Ok(self.push(
            out,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Repeat row `i` `counts[i]` times, preserving order (length regulation).
    pub fn repeat_rows(&mut self, x: Var, counts: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if counts.len() != t.rows() {
            return Err(Error::ShapeMismatch {
                op: "repeat_rows",
                detail: format!("{} counts for {} rows", counts.len(), t.rows()),
            });
        }
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::InvalidInput(
                "repeat_rows requires every count to be at least 1".into(),
            ));
        }
        let d = t.cols();
        let total: usize = counts.iter().sum();
        let mut out = Vec::with_capacity(total * d);
        for (r, &cnt) in counts.iter().enumerate() {
            for _ in 0..cnt {
                out.extend_from_slice(t.row(r));
            }
        }
        let out = Tensor::from_vec(&[total, d], out)?;
        let needs = self.needs(x.0);
        Ok(self.push(
            out,
            Op::RepeatRows {
                x: x.0,
                counts: counts.to_vec(),
            },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = (t.rows(), t.cols());
        if start + width > d || width == 0 {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("[{start}, {}) of {d} columns", start + width),
            });
        }
        let mut out = Vec::with_capacity(n * width);
        for r in 0..n {
            out.extend_from_slice(&t.row(r)[start..start + width]);
        }
        let out = Tensor::from_vec(&[n, width], out)?;
        let needs = self.needs(x.0);
        Ok(self.push(out, Op::SliceCols { x: x.0, start, width }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat_cols with no parts".into()));
        }
        let n = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != n) {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                detail: "row counts differ".into(),
            });
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::from_vec(&[n, total], out)?;
        let needs = parts.iter().any(|&p| self.needs(p.0));
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), needs))
    }

    // ── compositions ────────────────────────────────────────────────────

    /// Scaled dot-product attention.
    ///
    /// Returns `(out, weights)` with `weights = softmax(QKᵀ/√d)` row-stochastic
    /// and `out = weights·V`, so each output row is a convex combination of
    /// the value rows.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let d = self.value(q).cols();
        if self.value(k).cols() != d {
            return Err(Error::ShapeMismatch {
                op: "scaled_dot_attention",
                detail: format!("query width {d} vs key width {}", self.value(k).cols()),
            });
        }
        if self.value(k).rows() != self.value(v).rows() {
            return Err(Error::ShapeMismatch {
                op: "scaled_dot_attention",
                detail: "key/value row counts differ".into(),
            });
        }
        let scores = self.matmul_nt(q, k)?;
        let scaled = self.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = self.softmax_rows(scaled);
        let out = self.matmul(weights, v)?;
        Ok((out, weights))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// parameter that contributed; parameters outside the graph are absent
    /// (their accumulators stay zero).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage(
                "backward called twice on one tape; rebuild the forward graph first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.step_back(id, &g, &mut grads);
            // Param leaves keep their gradient for collection below.
            if matches!(self.nodes[id].op, Op::Param(_)) {
                grads[id] = Some(g);
            }
        }

        let mut entries = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = grads[id].take() {
                    entries.push((pid, g));
                }
            }
        }
        Ok(Gradients { entries })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: usize, update: impl FnOnce(&mut Tensor)) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let slot = grads[id].get_or_insert_with(|| match &self.nodes[id].value {
            Value::Owned(t) => Tensor::zeros(t.shape()),
            Value::Param(p) => Tensor::zeros(self.store.param(*p).value.shape()),
        });
        update(slot);
    }

    fn step_back(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Param(_) | Op::Const => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g.data(), 1.0));
                self.acc(grads, *b, |d| add_into(d, g.data(), 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g.data(), 1.0));
                self.acc(grads, *b, |d| add_into(d, g.data(), -1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(Var(*a)).clone(), self.value(Var(*b)).clone());
                self.acc(grads, *a, |d| {
                    for ((dv, gv), bv) in d.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *dv += gv * bv;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((dv, gv), av) in d.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *dv += gv * av;
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(grads, *x, |d| add_into(d, g.data(), c));
            }
            Op::Linear { x, w, b } => {
                let tx = self.value(Var(*x));
                let tw = self.value(Var(*w));
                let (n, din, dout) = (tx.rows(), tw.rows(), tw.cols());
                self.acc(grads, *x, |d| {
                    for r in 0..n {
                        let grow = g.row(r);
                        let drow = d.row_mut(r);
                        for i in 0..din {
                            drow[i] += dot(grow, tw.row(i));
                        }
                    }
                });
                self.acc(grads, *w, |d| {
                    for r in 0..n {
                        let grow = g.row(r);
                        let xrow = tx.row(r);
                        for i in 0..din {
                            axpy(xrow[i], grow, &mut d.data_mut()[i * dout..(i + 1) * dout]);
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for r in 0..n {
                        add_into_slice(d.data_mut(), g.row(r), 1.0);
                    }
                });
            }
            Op::Matmul(a, b) => {
                let ta = self.value(Var(*a));
                let tb = self.value(Var(*b));
                let (n, k) = (ta.rows(), ta.cols());
                self.acc(grads, *a, |d| {
                    for r in 0..n {
                        let grow = g.row(r);
                        let drow = d.row_mut(r);
                        for p in 0..k {
                            drow[p] += dot(grow, tb.row(p));
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    let m = d.cols();
                    for r in 0..n {
                        let grow = g.row(r);
                        let arow = ta.row(r);
                        for p in 0..k {
                            axpy(arow[p], grow, &mut d.data_mut()[p * m..(p + 1) * m]);
                        }
                    }
                });
            }
            Op::MatmulNT(a, b) => {
                let ta = self.value(Var(*a));
                let tb = self.value(Var(*b));
                let (n, m) = (ta.rows(), tb.rows());
                self.acc(grads, *a, |d| {
                    for r in 0..n {
                        let grow = g.row(r);
                        let drow = d.row_mut(r);
                        for q in 0..m {
                            axpy(grow[q], tb.row(q), drow);
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for r in 0..n {
                        let grow = g.row(r);
                        let arow = ta.row(r);
                        for q in 0..m {
                            axpy(grow[q], arow, d.row_mut(q));
                        }
                    }
                });
            }
            Op::Conv1d { x, w } => {
                let tx = self.value(Var(*x));
                let tw = self.value(Var(*w));
                let (k, cin, cout) = (tw.dim(0), tw.dim(1), tw.dim(2));
                let t_len = tx.rows();
                let pad = (k / 2) as isize;
                self.acc(grads, *x, |d| {
                    let wdata = tw.data();
                    for t in 0..t_len {
                        let grow = g.row(t);
                        for dk in 0..k {
                            let s = t as isize + dk as isize - pad;
                            if s < 0 || s >= t_len as isize {
                                continue;
                            }
                            let drow = d.row_mut(s as usize);
                            let wbase = dk * cin * cout;
                            for (i, dv) in drow.iter_mut().enumerate() {
                                *dv += dot(grow, &wdata[wbase + i * cout..wbase + (i + 1) * cout]);
                            }
                        }
                    }
                });
                self.acc(grads, *w, |d| {
                    let ddata = d.data_mut();
                    for t in 0..t_len {
                        let grow = g.row(t);
                        for dk in 0..k {
                            let s = t as isize + dk as isize - pad;
                            if s < 0 || s >= t_len as isize {
                                continue;
                            }
                            let xrow = tx.row(s as usize);
                            let wbase = dk * cin * cout;
                            for (i, &xv) in xrow.iter().enumerate() {
                                axpy(xv, grow, &mut ddata[wbase + i * cout..wbase + (i + 1) * cout]);
                            }
                        }
                    }
                });
            }
            Op::AvgPool1d(x) => {
                let n = self.value(Var(*x)).rows();
                self.acc(grads, *x, |d| {
                    for s in 0..g.rows() {
                        let grow = g.row(s);
                        add_into_slice(d.row_mut(2 * s), grow, 0.5);
                        add_into_slice(d.row_mut((2 * s + 1).min(n - 1)), grow, 0.5);
                    }
                });
            }
            Op::Relu(x) => {
                let tx = self.value(Var(*x));
                self.acc(grads, *x, |d| {
                    for ((dv, gv), xv) in d.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                        if *xv > 0.0 {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let y = match &self.nodes[id].value {
                    Value::Owned(t) => t,
                    Value::Param(_) => unreachable!(),
                };
                self.acc(grads, *x, |d| {
                    for ((dv, gv), yv) in d.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *dv += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Abs(x) => {
                let tx = self.value(Var(*x));
                self.acc(grads, *x, |d| {
                    for ((dv, gv), xv) in d.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                        *dv += gv * xv.signum() * if *xv == 0.0 { 0.0 } else { 1.0 };
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.acc(grads, *x, |d| {
                    d.data_mut().iter_mut().for_each(|v| *v += gv);
                });
            }
            Op::MeanRows(x) => {
                let n = self.value(Var(*x)).rows();
                let scale = 1.0 / n as f64;
                self.acc(grads, *x, |d| {
                    for r in 0..n {
                        add_into_slice(d.row_mut(r), g.row(0), scale);
                    }
                });
            }
            Op::ScaleRows { x, weights } => {
                self.acc(grads, *x, |d| {
                    for (r, &w) in weights.iter().enumerate() {
                        add_into_slice(d.row_mut(r), g.row(r), w);
                    }
                });
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = (xhat.rows(), xhat.cols());
                let gvals = self.value(Var(*gamma)).data().to_vec();
                // dxhat = g * gamma; column sums drive the coupled term.
                let mut sum_dh = vec![0.0; c];
                let mut sum_dh_h = vec![0.0; c];
                for r in 0..n {
                    for j in 0..c {
                        let dh = g.at(r, j) * gvals[j];
                        sum_dh[j] += dh;
                        sum_dh_h[j] += dh * xhat.at(r, j);
                    }
                }
                self.acc(grads, *x, |d| {
                    let nf = n as f64;
                    for r in 0..n {
                        for j in 0..c {
                            let dh = g.at(r, j) * gvals[j];
                            let v = (inv_std[j] / nf)
                                * (nf * dh - sum_dh[j] - xhat.at(r, j) * sum_dh_h[j]);
                            d.data_mut()[r * c + j] += v;
                        }
                    }
                });
                self.acc(grads, *gamma, |d| {
                    for r in 0..n {
                        for (j, dv) in d.data_mut().iter_mut().enumerate() {
                            *dv += g.at(r, j) * xhat.at(r, j);
                        }
                    }
                });
                self.acc(grads, *beta, |d| {
                    for r in 0..n {
                        add_into_slice(d.data_mut(), g.row(r), 1.0);
                    }
                });
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = (xhat.rows(), xhat.cols());
                let gvals = self.value(Var(*gamma)).data().to_vec();
                self.acc(grads, *x, |d| {
                    for r in 0..n {
                        for j in 0..c {
                            d.data_mut()[r * c + j] += g.at(r, j) * gvals[j] * inv_std[j];
                        }
                    }
                });
                self.acc(grads, *gamma, |d| {
                    for r in 0..n {
                        for (j, dv) in d.data_mut().iter_mut().enumerate() {
                            *dv += g.at(r, j) * xhat.at(r, j);
                        }
                    }
                });
                self.acc(grads, *beta, |d| {
                    for r in 0..n {
                        add_into_slice(d.data_mut(), g.row(r), 1.0);
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
                let (n, dcols) = (xhat.rows(), xhat.cols());
                let gvals = self.value(Var(*gamma)).data().to_vec();
                self.acc(grads, *x, |d| {
                    let df = dcols as f64;
                    for r in 0..n {
                        let grow = g.row(r);
                        let hrow = xhat.row(r);
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..dcols {
                            let dh = grow[j] * gvals[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        let drow = d.row_mut(r);
                        for j in 0..dcols {
                            let dh = grow[j] * gvals[j];
                            drow[j] += (inv_std[r] / df) * (df * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                });
                self.acc(grads, *gamma, |d| {
                    for r in 0..n {
                        for (j, dv) in d.data_mut().iter_mut().enumerate() {
                            *dv += g.at(r, j) * xhat.at(r, j);
                        }
                    }
                });
                self.acc(grads, *beta, |d| {
                    for r in 0..n {
                        add_into_slice(d.data_mut(), g.row(r), 1.0);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = match &self.nodes[id].value {
                    Value::Owned(t) => t,
                    Value::Param(_) => unreachable!(),
                };
                self.acc(grads, *x, |d| {
                    for r in 0..y.rows() {
                        let yrow = y.row(r);
                        let grow = g.row(r);
                        let inner = dot(grow, yrow);
                        let drow = d.row_mut(r);
                        for j in 0..yrow.len() {
                            drow[j] += yrow[j] * (grow[j] - inner);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                weights,
                wsum,
            } => {
                let gv = g.item();
                self.acc(grads, *logits, |d| {
                    let c = probs.cols();
                    for r in 0..probs.rows() {
                        let coeff = gv * weights[r] / wsum;
                        if coeff == 0.0 {
                            continue;
                        }
                        let prow = probs.row(r);
                        let drow = d.row_mut(r);
                        for j in 0..c {
                            let indicator = if j == targets[r] { 1.0 } else { 0.0 };
                            drow[j] += coeff * (prow[j] - indicator);
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                self.acc(grads, *table, |d| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into_slice(d.row_mut(i), g.row(r), 1.0);
                    }
                });
            }
            Op::RepeatRows { x, counts } => {
                self.acc(grads, *x, |d| {
                    let mut out_r = 0;
                    for (r, &cnt) in counts.iter().enumerate() {
                        for _ in 0..cnt {
                            add_into_slice(d.row_mut(r), g.row(out_r), 1.0);
                            out_r += 1;
                        }
                    }
                });
            }
            Op::SliceCols { x, start, width } => {
                self.acc(grads, *x, |d| {
                    for r in 0..g.rows() {
                        let drow = d.row_mut(r);
                        add_into_slice(&mut drow[*start..start + width], g.row(r), 1.0);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.value(Var(p)).cols()).collect();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    self.acc(grads, p, |d| {
                        for r in 0..g.rows() {
                            add_into_slice(d.row_mut(r), &g.row(r)[offset..offset + w], 1.0);
                        }
                    });
                    offset += w;
                }
            }
        }
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut Tensor, src: &[f64], scale: f64) {
    add_into_slice(dst.data_mut(), src, scale);
}

#[inline]
fn add_into_slice(dst: &mut [f64], src: &[f64], scale: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}
