use std::rc::Rc;

use crate::adiff::tensor::gemm;
use crate::adiff::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch-norm behaviour for one call.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with the batch's own statistics.
    Train { eps: f64 },
    /// Normalize with supplied running statistics.
    Eval {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// Per-feature statistics of one train-mode batch-norm call; `var` is the
/// unbiased estimate used for running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Mean(Var),
    Sum(Var),
    RowSum(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    SqrtEps(Var),
    SoftmaxRows(Var),
    Reshape(Var),
    GatherRows(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    SegmentMean(Var, Rc<[usize]>, Vec<f64>),
    SegmentSoftmax(Var, Rc<[usize]>, usize),
    HeadDot(Var, Var, usize),
    HeadScale(Var, Var, usize),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        train: bool,
    },
    SmoothL1 {
        pred: Var,
        target: Tensor,
        delta: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications in execution order. Node ids grow
/// monotonically, so the record is already topologically sorted and the
/// backward sweep is a single reverse pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kinks: Option<Vec<bool>>,
}

/// Adjoints of every node from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Error {
    Error::shape(op, format!("{}x{} vs {}x{}", a[0], a[1], b[0], b[1]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape that also records the sign of every ReLU / LeakyReLU input, so a
    /// finite-difference probe can tell when a perturbation crossed a kink.
    pub fn with_kink_tracking() -> Self {
        Self {
            nodes: Vec::new(),
            kinks: Some(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn kink_pattern(&self) -> Option<&[bool]> {
        self.kinks.as_deref()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf; its adjoint is available from [`Gradients::get`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Frozen parameters behave as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = Tensor::zeros(sa[0], sb[1]);
        gemm(
            self.value(a).data(),
            sa,
            false,
            self.value(b).data(),
            sb,
            false,
            out.data_mut(),
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Elementwise sum; `b` may also be a `1 × n` row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let rg = self.rg(a) || self.rg(b);
        if sa == sb {
            let out: Vec<f64> = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect();
            let t = Tensor::new(sa[0], sa[1], out)?;
            Ok(self.push(t, Op::Add(a, b), rg))
        } else if sb[0] == 1 && sb[1] == sa[1] {
            let row = self.value(b).data().to_vec();
            let mut t = self.value(a).clone();
            for r in t.data_mut().chunks_exact_mut(sa[1]) {
                for (x, y) in r.iter_mut().zip(&row) {
                    *x += y;
                }
            }
            Ok(self.push(t, Op::AddRow(a, b), rg))
        } else {
            Err(shape_err("add", sa, sb))
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("sub", sa, sb));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(sa[0], sa[1], out)?, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(sa[0], sa[1], out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x *= s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.shape(p)[0],
            None => return Err(Error::shape("concat", "no inputs")),
        };
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != rows {
                return Err(shape_err("concat", [rows, cols], s));
            }
            cols += s[1];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(rows, cols, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Column means, `m × n → 1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let [m, n] = t.shape();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, x) in out.iter_mut().zip(t.row_slice(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / m.max(1) as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(a);
        self.push(Tensor::row(out), Op::MeanRows(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().sum::<f64>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::Sum(a), rg)
    }

    /// Row sums, `m × n → m × 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let rows = out.len();
        let rg = self.rg(a);
        self.push(Tensor::new(rows, 1, out).expect("row sums"), Op::RowSum(a), rg)
    }

    fn record_kinks(&mut self, a: Var) {
        if let Some(k) = self.kinks.as_mut() {
            k.extend(self.nodes[a.0].value.data().iter().map(|&x| x > 0.0));
        }
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.record_kinks(a);
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.record_kinks(a);
        let mut t = self.value(a).clone();
        t.data_mut()
            .iter_mut()
            .for_each(|x| *x = if *x > 0.0 { *x } else { slope * *x });
        let rg = self.rg(a);
        self.push(t, Op::LeakyRelu(a, slope), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x = x.tanh());
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    /// `sqrt(x + eps)` elementwise.
    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Result<Var> {
        let mut t = self.value(a).clone();
        for x in t.data_mut() {
            if *x + eps <= 0.0 {
                return Err(Error::NonFinite(format!("sqrt of {}", *x + eps)));
            }
            *x = (*x + eps).sqrt();
        }
        let rg = self.rg(a);
        Ok(self.push(t, Op::SqrtEps(a), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        let n = t.cols();
        if n > 0 {
            for r in t.data_mut().chunks_exact_mut(n) {
                let mx = r.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut s = 0.0;
                for v in r.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                r.iter_mut().for_each(|v| *v /= s);
            }
        }
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    /// Row-major reinterpretation with the same element count.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a).clone().reshaped(rows, cols)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// `out[e] = a[index[e]]`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<[usize]>) -> Result<Var> {
        let t = self.value(a);
        let [m, n] = t.shape();
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {m}")));
        }
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index.iter() {
            out.extend_from_slice(t.row_slice(i));
        }
        let rows = index.len();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(rows, n, out)?, Op::GatherRows(a, index), rg))
    }

    fn check_segments(&self, op: &'static str, a: Var, index: &[usize], n: usize) -> Result<()> {
        let m = self.shape(a)[0];
        if index.len() != m {
            return Err(Error::shape(op, format!("{} segment ids for {m} rows", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape(op, format!("segment {bad} of {n}")));
        }
        Ok(())
    }

    /// `out[s] = Σ_{e : index[e] = s} a[e]`, with `n` output rows.
    pub fn scatter_add(&mut self, a: Var, index: Rc<[usize]>, n: usize) -> Result<Var> {
        self.check_segments("scatter_add", a, &index, n)?;
        let t = self.value(a);
        let cols = t.cols();
        let mut out = Tensor::zeros(n, cols);
        let od = out.data_mut();
        for (e, &s) in index.iter().enumerate() {
            for (o, x) in od[s * cols..(s + 1) * cols].iter_mut().zip(t.row_slice(e)) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::ScatterAdd(a, index), rg))
    }

    /// Mean of the rows in each segment; empty segments give zero rows.
    pub fn segment_mean(&mut self, a: Var, index: Rc<[usize]>, n: usize) -> Result<Var> {
        self.check_segments("segment_mean", a, &index, n)?;
        let mut counts = vec![0usize; n];
        for &s in index.iter() {
            counts[s] += 1;
        }
        let inv: Vec<f64> = counts
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
            .collect();
        let t = self.value(a);
        let cols = t.cols();
        let mut out = Tensor::zeros(n, cols);
        let od = out.data_mut();
        for (e, &s) in index.iter().enumerate() {
            for (o, x) in od[s * cols..(s + 1) * cols].iter_mut().zip(t.row_slice(e)) {
                *o += x * inv[s];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SegmentMean(a, index, inv), rg))
    }

    /// Column-wise softmax over the rows sharing a segment id.
    pub fn segment_softmax(&mut self, a: Var, index: Rc<[usize]>, n: usize) -> Result<Var> {
        self.check_segments("segment_softmax", a, &index, n)?;
        let t = self.value(a);
        let cols = t.cols();
        let mut mx = vec![f64::NEG_INFINITY; n * cols];
        for (e, &s) in index.iter().enumerate() {
            for (m, &x) in mx[s * cols..(s + 1) * cols].iter_mut().zip(t.row_slice(e)) {
                *m = m.max(x);
            }
        }
        let mut out = t.clone();
        let mut sums = vec![0.0; n * cols];
        for (e, &s) in index.iter().enumerate() {
            let row = &mut out.data_mut()[e * cols..(e + 1) * cols];
            for c in 0..cols {
                row[c] = (row[c] - mx[s * cols + c]).exp();
                sums[s * cols + c] += row[c];
            }
        }
        for (e, &s) in index.iter().enumerate() {
            let row = &mut out.data_mut()[e * cols..(e + 1) * cols];
            for c in 0..cols {
                row[c] /= sums[s * cols + c];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SegmentSoftmax(a, index, n), rg))
    }

    /// Per-head dot products: `x` is `m × (H·F)`, `a` is `H × F`, result `m × H`.
    pub fn head_dot(&mut self, x: Var, a: Var, heads: usize) -> Result<Var> {
        let (sx, sa) = (self.shape(x), self.shape(a));
        if heads == 0 || sa[0] != heads || sx[1] != heads * sa[1] {
            return Err(shape_err("head_dot", sx, sa));
        }
        let f = sa[1];
        let xv = self.value(x);
        let av = self.value(a).data();
        let mut out = Tensor::zeros(sx[0], heads);
        for r in 0..sx[0] {
            let row = xv.row_slice(r);
            for h in 0..heads {
                out.data_mut()[r * heads + h] = row[h * f..(h + 1) * f]
                    .iter()
                    .zip(&av[h * f..(h + 1) * f])
                    .map(|(p, q)| p * q)
                    .sum();
            }
        }
        let rg = self.rg(x) || self.rg(a);
        Ok(self.push(out, Op::HeadDot(x, a, heads), rg))
    }

    /// Scales each head block of `x` (`m × (H·F)`) by the matching column of
    /// `w` (`m × H`).
    pub fn head_scale(&mut self, x: Var, w: Var, heads: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if heads == 0 || sw != [sx[0], heads] || sx[1] % heads != 0 {
            return Err(shape_err("head_scale", sx, sw));
        }
        let f = sx[1] / heads;
        let wv = self.value(w).data().to_vec();
        let mut out = self.value(x).clone();
        for (r, row) in out.data_mut().chunks_exact_mut(sx[1].max(1)).enumerate() {
            for h in 0..heads {
                let s = wv[r * heads + h];
                row[h * f..(h + 1) * f].iter_mut().for_each(|v| *v *= s);
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::HeadScale(x, w, heads), rg))
    }

    /// Per-feature batch normalization of `x` (`batch × features`) followed
    /// by the affine map `gamma ⊙ x̂ + beta`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let [m, n] = self.shape(x);
        if self.shape(gamma) != [1, n] || self.shape(beta) != [1, n] {
            return Err(shape_err("batch_norm", [m, n], self.shape(gamma)));
        }
        let xv = self.value(x);
        let (mean, var, eps, stats) = match mode {
            BnMode::Train { eps } => {
                if m < 2 {
                    return Err(Error::shape("batch_norm", "train mode needs a batch of at least 2"));
                }
                let mut mean = vec![0.0; n];
                for r in 0..m {
                    for (s, v) in mean.iter_mut().zip(xv.row_slice(r)) {
                        *s += v;
                    }
                }
                mean.iter_mut().for_each(|s| *s /= m as f64);
                let mut var = vec![0.0; n];
                for r in 0..m {
                    for ((s, v), mu) in var.iter_mut().zip(xv.row_slice(r)).zip(&mean) {
                        *s += (v - mu) * (v - mu);
                    }
                }
                let unbiased = var.iter().map(|s| s / (m - 1) as f64).collect();
                var.iter_mut().for_each(|s| *s /= m as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, eps, Some(stats))
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != n || var.len() != n {
                    return Err(Error::shape("batch_norm", "running stats width"));
                }
                (mean.to_vec(), var.to_vec(), eps, None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = xv.clone();
        let mut y = xv.clone();
        for r in 0..m {
            for c in 0..n {
                let i = r * n + c;
                let h = (xv.data()[i] - mean[c]) * inv_std[c];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = g[c] * h + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let train = matches!(mode, BnMode::Train { .. });
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// `Σᵢ h(predᵢ − targetᵢ)` with the Huber function
    /// `h(d) = d²/2` for `|d| ≤ δ`, else `δ|d| − δ²/2`.
    pub fn smooth_l1_sum(&mut self, pred: Var, target: Tensor, delta: f64) -> Result<Var> {
        let sp = self.shape(pred);
        if sp != target.shape() {
            return Err(shape_err("smooth_l1", sp, target.shape()));
        }
        let v: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| huber(p - t, delta))
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(v),
            Op::SmoothL1 {
                pred,
                target,
                delta,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Parameter adjoints are *added* to
    /// the store's gradient buffers; call [`ParamStore::zero_grad`] between
    /// steps.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            let s = self.shape(loss);
            return Err(Error::shape("backward", format!("loss must be scalar, got {}x{}", s[0], s[1])));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(1, 1, 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads, store);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let [r, c] = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>], store: &mut ParamStore) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.get_mut(*id).grad.add_assign(g),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(gd, g.shape(), false, bv, sb, true, ga.data_mut(), 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(av, sa, true, gd, g.shape(), false, gb.data_mut(), 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(t) = self.slot(grads, *v) {
                        t.add_assign(g);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                let n = g.cols();
                if let Some(gb) = self.slot(grads, *b) {
                    for r in gd.chunks_exact(n.max(1)) {
                        for (o, x) in gb.data_mut().iter_mut().zip(r) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (o, x) in gb.data_mut().iter_mut().zip(gd) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, x), y) in ga.data_mut().iter_mut().zip(gd).zip(bv) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, x), y) in gb.data_mut().iter_mut().zip(gd).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, x) in ga.data_mut().iter_mut().zip(gd) {
                        *o += s * x;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if let Some(gp) = self.slot(grads, *p) {
                        for (r, row) in gp.data_mut().chunks_exact_mut(w.max(1)).enumerate() {
                            let src = &gd[r * total + offset..r * total + offset + w];
                            for (o, x) in row.iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::MeanRows(a) => {
                let [m, n] = self.shape(*a);
                let inv = 1.0 / m.max(1) as f64;
                if let Some(ga) = self.slot(grads, *a) {
                    for row in ga.data_mut().chunks_exact_mut(n.max(1)) {
                        for (o, x) in row.iter_mut().zip(gd) {
                            *o += x * inv;
                        }
                    }
                }
            }
            Op::Mean(a) => {
                let inv = gd[0] / self.value(*a).numel().max(1) as f64;
                if let Some(ga) = self.slot(grads, *a) {
                    ga.data_mut().iter_mut().for_each(|o| *o += inv);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.data_mut().iter_mut().for_each(|o| *o += gd[0]);
                }
            }
            Op::RowSum(a) => {
                let n = self.shape(*a)[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for (row, x) in ga.data_mut().chunks_exact_mut(n.max(1)).zip(gd) {
                        row.iter_mut().for_each(|o| *o += x);
                    }
                }
            }
            Op::Relu(a) | Op::LeakyRelu(a, _) => {
                let slope = match node.op {
                    Op::LeakyRelu(_, s) => s,
                    _ => 0.0,
                };
                let av = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, x), v) in ga.data_mut().iter_mut().zip(gd).zip(av) {
                        *o += if *v > 0.0 { *x } else { slope * x };
                    }
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, x), t) in ga.data_mut().iter_mut().zip(gd).zip(y) {
                        *o += x * (1.0 - t * t);
                    }
                }
            }
            Op::SqrtEps(a) => {
                let y = node.value.data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, x), s) in ga.data_mut().iter_mut().zip(gd).zip(y) {
                        *o += x / (2.0 * s);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let n = g.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gr), yr) in ga
                        .data_mut()
                        .chunks_exact_mut(n.max(1))
                        .zip(gd.chunks_exact(n.max(1)))
                        .zip(y.chunks_exact(n.max(1)))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for c in 0..n {
                            o[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, x) in ga.data_mut().iter_mut().zip(gd) {
                        *o += x;
                    }
                }
            }
            Op::GatherRows(a, index) => {
                let n = g.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    let d = ga.data_mut();
                    for (e, &i) in index.iter().enumerate() {
                        for (o, x) in d[i * n..(i + 1) * n].iter_mut().zip(&gd[e * n..(e + 1) * n]) {
                            *o += x;
                        }
                    }
                }
            }
            Op::ScatterAdd(a, index) | Op::SegmentMean(a, index, _) => {
                let n = g.cols();
                let inv = match &node.op {
                    Op::SegmentMean(_, _, inv) => Some(inv),
                    _ => None,
                };
                if let Some(ga) = self.slot(grads, *a) {
                    let d = ga.data_mut();
                    for (e, &s) in index.iter().enumerate() {
                        let w = inv.map_or(1.0, |v| v[s]);
                        for (o, x) in d[e * n..(e + 1) * n].iter_mut().zip(&gd[s * n..(s + 1) * n]) {
                            *o += w * x;
                        }
                    }
                }
            }
            Op::SegmentSoftmax(a, index, segs) => {
                let n = g.cols();
                let y = node.value.data();
                let mut dots = vec![0.0; segs * n];
                for (e, &s) in index.iter().enumerate() {
                    for c in 0..n {
                        dots[s * n + c] += gd[e * n + c] * y[e * n + c];
                    }
                }
                if let Some(ga) = self.slot(grads, *a) {
                    let d = ga.data_mut();
                    for (e, &s) in index.iter().enumerate() {
                        for c in 0..n {
                            let i = e * n + c;
                            d[i] += y[i] * (gd[i] - dots[s * n + c]);
                        }
                    }
                }
            }
            Op::HeadDot(x, a, heads) => {
                let h = *heads;
                let f = self.shape(*a)[1];
                let xv = self.value(*x);
                let av = self.value(*a).data();
                let m = xv.rows();
                if let Some(gx) = self.slot(grads, *x) {
                    let d = gx.data_mut();
                    for r in 0..m {
                        for k in 0..h {
                            let gr = gd[r * h + k];
                            for j in 0..f {
                                d[r * h * f + k * f + j] += gr * av[k * f + j];
                            }
                        }
                    }
                }
                if let Some(ga) = self.slot(grads, *a) {
                    let d = ga.data_mut();
                    for r in 0..m {
                        let row = xv.row_slice(r);
                        for k in 0..h {
                            let gr = gd[r * h + k];
                            for j in 0..f {
                                d[k * f + j] += gr * row[k * f + j];
                            }
                        }
                    }
                }
            }
            Op::HeadScale(x, w, heads) => {
                let h = *heads;
                let [m, width] = self.shape(*x);
                let f = width / h;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(gx) = self.slot(grads, *x) {
                    let d = gx.data_mut();
                    for r in 0..m {
                        for k in 0..h {
                            let s = wv[r * h + k];
                            for j in 0..f {
                                let i = r * width + k * f + j;
                                d[i] += gd[i] * s;
                            }
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    let d = gw.data_mut();
                    for r in 0..m {
                        for k in 0..h {
                            let i0 = r * width + k * f;
                            d[r * h + k] += (0..f).map(|j| gd[i0 + j] * xv[i0 + j]).sum::<f64>();
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [m, n] = xhat.shape();
                let xh = xhat.data();
                let mut sum_g = vec![0.0; n];
                let mut sum_gx = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        let i = r * n + c;
                        sum_g[c] += gd[i];
                        sum_gx[c] += gd[i] * xh[i];
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (o, v) in gg.data_mut().iter_mut().zip(&sum_gx) {
                        *o += v;
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for (o, v) in gb.data_mut().iter_mut().zip(&sum_g) {
                        *o += v;
                    }
                }
                let gam = self.value(*gamma).data().to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    let d = gx.data_mut();
                    let mf = m as f64;
                    for r in 0..m {
                        for c in 0..n {
                            let i = r * n + c;
                            d[i] += if *train {
                                // dx̂ = g·γ, summed terms scale by γ as well.
                                gam[c] * inv_std[c] / mf
                                    * (mf * gd[i] - sum_g[c] - xh[i] * sum_gx[c])
                            } else {
                                gam[c] * inv_std[c] * gd[i]
                            };
                        }
                    }
                }
            }
            Op::SmoothL1 {
                pred,
                target,
                delta,
            } => {
                let pv = self.value(*pred).data();
                if let Some(gp) = self.slot(grads, *pred) {
                    for ((o, p), t) in gp.data_mut().iter_mut().zip(pv).zip(target.data()) {
                        *o += gd[0] * (p - t).clamp(-delta, *delta);
                    }
                }
            }
        }
    }
}

/// Huber function with threshold `delta`.
pub fn huber(d: f64, delta: f64) -> f64 {
    let a = d.abs();
    if a <= delta {
        0.5 * d * d
    } else {
        delta * a - 0.5 * delta * delta
    }
}
