//! Reverse-mode differentiation over a linear tape. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid topological
//! order for the adjoint pass.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::tensor::Tensor;
use super::{lit, Real};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

enum Op<T> {
    Leaf,
    Reshape(Var),
    Linear(Vec<(Var, T)>),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    /// `batch_stats` marks statistics taken from the batch itself, which
    /// adds their dependence on `x` to the input gradient.
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<T>,
        xhat: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat(Var, Var),
    Softmax {
        x: Var,
        temperature: T,
    },
    LogSoftmax {
        x: Var,
        temperature: T,
    },
    CrossEntropy {
        target: Var,
        pred: Var,
    },
    WeightedCrossEntropy {
        target: Tensor<T>,
        log_pred: Var,
    },
    Mse(Var, Var),
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Clamp applied to predicted probabilities inside the cross entropy.
pub const PROB_FLOOR: f64 = 1e-12;

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gemm<T: Real>(alpha: T, a: ArrayView2<'_, T>, b: ArrayView2<'_, T>, beta: T, c: &mut [T], c_shape: (usize, usize)) {
    let mut c = ArrayViewMut2::from_shape(c_shape, c).expect("gemm output shape");
    general_mat_mul(alpha, &a, &b, beta, &mut c);
}

fn view2<T>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view shape")
}

fn softmax_rows<T: Real>(x: &[T], cols: usize, temperature: T) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = ((v - max) / temperature).exp();
            sum += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= sum;
        }
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf node. `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Σ k_i · x_i over same-shape operands.
    pub fn linear(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::Empty("linear combination of nothing".into()))?;
        let shape = self.shape(first).to_vec();
        let mut out = Tensor::zeros(&shape);
        for &(v, k) in terms {
            let val = self.value(v);
            if val.shape() != shape.as_slice() {
                return Err(Error::shape("linear combination", &shape, val.shape()));
            }
            for (o, &x) in out.data_mut().iter_mut().zip(val.data()) {
                *o += k * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(out, Op::Linear(terms.to_vec()), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear(&[(a, T::one()), (b, T::one())])
    }

    /// x: `[B, Cin, L]`, w: `[Cout, Cin, K]`, b: `[Cout]` → `[B, Cout, Lout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(Error::shape(
                "conv1d input",
                &[0, ws.get(1).copied().unwrap_or(0), 0],
                &xs,
            ));
        }
        let (batch, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if self.shape(b) != [cout] {
            return Err(Error::shape("conv1d bias", &[cout], self.shape(b)));
        }
        let padded = len + geom.pad_left + geom.pad_right;
        if padded < k || geom.stride == 0 {
            return Err(Error::shape("conv1d output length", &[k], &[padded]));
        }
        let lout = (padded - k) / geom.stride + 1;
        let ck = cin * k;
        let ncols = batch * lout;
        let xd = self.value(x).data();
        let mut cols = vec![T::zero(); ck * ncols];
        for bi in 0..batch {
            for ci in 0..cin {
                let xrow = &xd[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                for kk in 0..k {
                    let dst = &mut cols[(ci * k + kk) * ncols + bi * lout..][..lout];
                    for (o, d) in dst.iter_mut().enumerate() {
                        let pos = o * geom.stride + kk;
                        if pos >= geom.pad_left && pos - geom.pad_left < len {
                            *d = xrow[pos - geom.pad_left];
                        }
                    }
                }
            }
        }
        let mut out2 = vec![T::zero(); cout * ncols];
        gemm(
            T::one(),
            view2(self.value(w).data(), cout, ck),
            view2(&cols, ck, ncols),
            T::zero(),
            &mut out2,
            (cout, ncols),
        );
        let bias = self.value(b).data();
        let mut out = vec![T::zero(); batch * cout * lout];
        for co in 0..cout {
            for bi in 0..batch {
                let src = &out2[co * ncols + bi * lout..][..lout];
                let dst = &mut out[(bi * cout + co) * lout..][..lout];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias[co];
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(&[batch, cout, lout], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, geom, cols }, rg))
    }

    fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
        match *shape {
            [b, c, l] => Ok((b, c, l)),
            [b, c] => Ok((b, c, 1)),
            _ => Err(Error::shape("batchnorm input", &[0, 0, 0], shape)),
        }
    }

    /// Batch normalization using the batch's own per-channel statistics.
    /// Returns the output and the (mean, biased variance) used.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (batch, ch, len) = Self::channel_layout(self.shape(x))?;
        let n = lit::<T>((batch * len) as f64);
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); ch];
        let mut var = vec![T::zero(); ch];
        for bi in 0..batch {
            for c in 0..ch {
                for &v in &xd[(bi * ch + c) * len..][..len] {
                    mean[c] += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..batch {
            for c in 0..ch {
                for &v in &xd[(bi * ch + c) * len..][..len] {
                    let d = v - mean[c];
                    var[c] += d * d;
                }
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        for bi in 0..batch {
            for c in 0..ch {
                let off = (bi * ch + c) * len;
                for i in off..off + len {
                    xhat[i] = (xd[i] - mean[c]) * inv_std[c];
                }
            }
        }
        let out = self.affine_channels(&xhat, gamma, batch, ch, len, beta)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.shape(x).to_vec();
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
                batch_stats: true,
            },
            rg,
        );
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let (batch, ch, len) = Self::channel_layout(self.shape(x))?;
        if mean.len() != ch || var.len() != ch {
            return Err(Error::shape("batchnorm statistics", &[ch], &[mean.len()]));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let mut xhat = vec![T::zero(); xd.len()];
        for bi in 0..batch {
            for c in 0..ch {
                let off = (bi * ch + c) * len;
                for i in off..off + len {
                    xhat[i] = (xd[i] - mean[c]) * inv_std[c];
                }
            }
        }
        let out = self.affine_channels(&xhat, gamma, batch, ch, len, beta)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
                batch_stats: false,
            },
            rg,
        ))
    }

    fn affine_channels(
        &self,
        xhat: &[T],
        gamma: Var,
        batch: usize,
        ch: usize,
        len: usize,
        beta: Var,
    ) -> Result<Vec<T>> {
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        if g.len() != ch || b.len() != ch {
            return Err(Error::shape("batchnorm affine", &[ch], &[g.len()]));
        }
        let mut out = vec![T::zero(); xhat.len()];
        for bi in 0..batch {
            for c in 0..ch {
                let off = (bi * ch + c) * len;
                for i in off..off + len {
                    out[i] = g[c] * xhat[i] + b[c];
                }
            }
        }
        Ok(out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(T::zero())).collect();
        let value = Tensor::new(v.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Non-overlapping max pooling over `[B, C, L]`; trailing remainder dropped.
    pub fn maxpool1d(&mut self, x: Var, size: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, ch, len) = match *xs.as_slice() {
            [b, c, l] => (b, c, l),
            _ => return Err(Error::shape("maxpool1d input", &[0, 0, 0], &xs)),
        };
        let lout = if size == 0 { 0 } else { len / size };
        if lout == 0 {
            return Err(Error::shape("maxpool1d output length", &[size], &[len]));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(batch * ch * lout);
        let mut argmax = Vec::with_capacity(batch * ch * lout);
        for row in 0..batch * ch {
            for o in 0..lout {
                let start = row * len + o * size;
                let mut best = start;
                for i in start + 1..start + size {
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[batch, ch, lout], out)?, Op::MaxPool { x, argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, ch, len) = match *xs.as_slice() {
            [b, c, l] if l > 0 => (b, c, l),
            _ => return Err(Error::shape("global average pool input", &[0, 0, 0], &xs)),
        };
        let inv = lit::<T>(1.0 / len as f64);
        let out = self
            .value(x)
            .data()
            .chunks(len)
            .map(|c| c.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[batch, ch], out)?, Op::GlobalAvgPool(x), rg))
    }

    /// x: `[B, In]`, w: `[In, Out]`, b: `[Out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape(
                "dense input",
                &[xs.first().copied().unwrap_or(0), ws.first().copied().unwrap_or(0)],
                &xs,
            ));
        }
        let (batch, fin, fout) = (xs[0], xs[1], ws[1]);
        if self.shape(b) != [fout] {
            return Err(Error::shape("dense bias", &[fout], self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut out: Vec<T> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
        gemm(
            T::one(),
            view2(self.value(x).data(), batch, fin),
            view2(self.value(w).data(), fin, fout),
            T::one(),
            &mut out,
            (batch, fout),
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(&[batch, fout], out)?, Op::Dense { x, w, b }, rg))
    }

    /// Concatenates two `[B, F]` tensors along the feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape("concat", &sa, &sb));
        }
        let (batch, fa, fb) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * (fa + fb));
        for i in 0..batch {
            out.extend_from_slice(&da[i * fa..(i + 1) * fa]);
            out.extend_from_slice(&db[i * fb..(i + 1) * fb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[batch, fa + fb], out)?, Op::Concat(a, b), rg))
    }

    fn check_rows(&self, x: Var, what: &str) -> Result<usize> {
        match *self.shape(x) {
            [_, c] if c > 0 => Ok(c),
            ref s => Err(Error::shape(what, &[0, 0], s)),
        }
    }

    /// Row-wise softmax of `x / temperature`, max-subtracted.
    pub fn softmax(&mut self, x: Var, temperature: T) -> Result<Var> {
        let cols = self.check_rows(x, "softmax input")?;
        let out = softmax_rows(self.value(x).data(), cols, temperature);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, temperature }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, temperature: T) -> Result<Var> {
        let cols = self.check_rows(x, "log-softmax input")?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for (row, o) in xd.chunks(cols).zip(out.chunks_mut(cols)) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row
                .iter()
                .fold(T::zero(), |s, &v| s + ((v - max) / temperature).exp())
                .ln();
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = (v - max) / temperature - lse;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSoftmax { x, temperature }, rg))
    }

    /// Batch mean of −Σ p·ln(max(q, 1e-12)) over `[B, C]` distributions.
    pub fn cross_entropy(&mut self, target: Var, pred: Var) -> Result<Var> {
        self.check_rows(pred, "cross entropy prediction")?;
        if self.shape(target) != self.shape(pred) {
            return Err(Error::shape("cross entropy", self.shape(pred), self.shape(target)));
        }
        let floor = lit::<T>(PROB_FLOOR);
        let batch = self.shape(pred)[0];
        let total = self
            .value(target)
            .data()
            .iter()
            .zip(self.value(pred).data())
            .fold(T::zero(), |s, (&p, &q)| s - p * q.max(floor).ln());
        let rg = self.rg(target) || self.rg(pred);
        Ok(self.push(
            Tensor::scalar(total / lit(batch as f64)),
            Op::CrossEntropy { target, pred },
            rg,
        ))
    }

    /// Batch mean of −Σ p·log_q, with log-probabilities computed upstream
    /// (e.g. by [`Tape::log_softmax`]). `target` is a constant.
    pub fn cross_entropy_log(&mut self, target: Tensor<T>, log_pred: Var) -> Result<Var> {
        self.check_rows(log_pred, "cross entropy prediction")?;
        if target.shape() != self.shape(log_pred) {
            return Err(Error::shape("cross entropy", self.shape(log_pred), target.shape()));
        }
        let batch = target.shape()[0];
        let total = target
            .data()
            .iter()
            .zip(self.value(log_pred).data())
            .fold(T::zero(), |s, (&p, &lq)| s - p * lq);
        let rg = self.rg(log_pred);
        Ok(self.push(
            Tensor::scalar(total / lit(batch as f64)),
            Op::WeightedCrossEntropy { target, log_pred },
            rg,
        ))
    }

    /// Mean of squared element differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse", self.shape(a), self.shape(b)));
        }
        let n = self.value(a).len();
        let total = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .fold(T::zero(), |s, (&x, &y)| s + (x - y) * (x - y));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(total / lit(n as f64)), Op::Mse(a, b), rg))
    }

    /// Σ w·x with constant weights; used to pick output components.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.shape() != self.shape(x) {
            return Err(Error::shape("weighted sum", self.shape(x), weights.shape()));
        }
        let total = weights
            .data()
            .iter()
            .zip(self.value(x).data())
            .fold(T::zero(), |s, (&w, &v)| s + w * v);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { x, weights }, rg))
    }

    /// Adjoint pass from a scalar node. Only nodes that require gradients
    /// receive them; everything else stays `None`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward loss", &[1], self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => {
                let d = g.clone().reshape(self.shape(*x))?;
                self.accumulate(grads, *x, d);
            }
            Op::Linear(terms) => {
                for &(v, k) in terms {
                    if self.rg(v) {
                        let data = gd.iter().map(|&a| a * k).collect();
                        self.accumulate(grads, v, Tensor::new(g.shape(), data)?);
                    }
                }
            }
            Op::Conv1d { x, w, b, geom, cols } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (batch, cin, len) = (xs[0], xs[1], xs[2]);
                let (cout, k) = (ws[0], ws[2]);
                let lout = g.shape()[2];
                let ncols = batch * lout;
                let ck = cin * k;
                let mut g2 = vec![T::zero(); cout * ncols];
                for bi in 0..batch {
                    for co in 0..cout {
                        g2[co * ncols + bi * lout..][..lout].copy_from_slice(&gd[(bi * cout + co) * lout..][..lout]);
                    }
                }
                if self.rg(*b) {
                    let db = g2
                        .chunks(ncols)
                        .map(|r| r.iter().fold(T::zero(), |a, &v| a + v))
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(&[cout], db)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); cout * ck];
                    gemm(
                        T::one(),
                        view2(&g2, cout, ncols),
                        view2(cols, ck, ncols).t(),
                        T::zero(),
                        &mut dw,
                        (cout, ck),
                    );
                    self.accumulate(grads, *w, Tensor::new(ws, dw)?);
                }
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); ck * ncols];
                    gemm(
                        T::one(),
                        view2(self.value(*w).data(), cout, ck).t(),
                        view2(&g2, cout, ncols),
                        T::zero(),
                        &mut dcols,
                        (ck, ncols),
                    );
                    let mut dx = vec![T::zero(); batch * cin * len];
                    for bi in 0..batch {
                        for ci in 0..cin {
                            let drow = &mut dx[(bi * cin + ci) * len..][..len];
                            for kk in 0..k {
                                let src = &dcols[(ci * k + kk) * ncols + bi * lout..][..lout];
                                for (o, &s) in src.iter().enumerate() {
                                    let pos = o * geom.stride + kk;
                                    if pos >= geom.pad_left && pos - geom.pad_left < len {
                                        drow[pos - geom.pad_left] += s;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xs, dx)?);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
                batch_stats,
            } => {
                let (batch, ch, len) = Self::channel_layout(self.shape(*x))?;
                let mut dgamma = vec![T::zero(); ch];
                let mut dbeta = vec![T::zero(); ch];
                for bi in 0..batch {
                    for c in 0..ch {
                        let off = (bi * ch + c) * len;
                        for i in off..off + len {
                            dgamma[c] += gd[i] * xhat[i];
                            dbeta[c] += gd[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![T::zero(); gd.len()];
                    let n = lit::<T>((batch * len) as f64);
                    for bi in 0..batch {
                        for c in 0..ch {
                            let off = (bi * ch + c) * len;
                            for i in off..off + len {
                                dx[i] = if *batch_stats {
                                    // d/dx of (x - mean_B)/std_B through the batch statistics
                                    gam[c] * inv_std[c] / n * (n * gd[i] - dbeta[c] - xhat[i] * dgamma[c])
                                } else {
                                    gam[c] * inv_std[c] * gd[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(&[ch], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(&[ch], dbeta)?);
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let data = gd
                    .iter()
                    .zip(xd)
                    .map(|(&a, &v)| if v > T::zero() { a } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), data)?);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let dd = dx.data_mut();
                for (&src, &a) in argmax.iter().zip(gd) {
                    dd[src] += a;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let len = xs[2];
                let inv = lit::<T>(1.0 / len as f64);
                let data = gd.iter().flat_map(|&a| std::iter::repeat_n(a * inv, len)).collect();
                self.accumulate(grads, *x, Tensor::new(xs, data)?);
            }
            Op::Dense { x, w, b } => {
                let xs = self.shape(*x);
                let (batch, fin) = (xs[0], xs[1]);
                let fout = g.shape()[1];
                if self.rg(*b) {
                    let mut db = vec![T::zero(); fout];
                    for row in gd.chunks(fout) {
                        for (d, &a) in db.iter_mut().zip(row) {
                            *d += a;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&[fout], db)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); fin * fout];
                    gemm(
                        T::one(),
                        view2(self.value(*x).data(), batch, fin).t(),
                        view2(gd, batch, fout),
                        T::zero(),
                        &mut dw,
                        (fin, fout),
                    );
                    self.accumulate(grads, *w, Tensor::new(&[fin, fout], dw)?);
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); batch * fin];
                    gemm(
                        T::one(),
                        view2(gd, batch, fout),
                        view2(self.value(*w).data(), fin, fout).t(),
                        T::zero(),
                        &mut dx,
                        (batch, fin),
                    );
                    self.accumulate(grads, *x, Tensor::new(&[batch, fin], dx)?);
                }
            }
            Op::Concat(a, b) => {
                let fa = self.shape(*a)[1];
                let fb = self.shape(*b)[1];
                let batch = self.shape(*a)[0];
                let mut da = Vec::with_capacity(batch * fa);
                let mut db = Vec::with_capacity(batch * fb);
                for row in gd.chunks(fa + fb) {
                    da.extend_from_slice(&row[..fa]);
                    db.extend_from_slice(&row[fa..]);
                }
                self.accumulate(grads, *a, Tensor::new(&[batch, fa], da)?);
                self.accumulate(grads, *b, Tensor::new(&[batch, fb], db)?);
            }
            Op::Softmax { x, temperature } => {
                let cols = g.shape()[1];
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(gd.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot) / *temperature;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape(), dx)?);
            }
            Op::LogSoftmax { x, temperature } => {
                let cols = g.shape()[1];
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(gd.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let gsum = gr.iter().fold(T::zero(), |s, &a| s + a);
                    for ((d, &lyi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = (gi - lyi.exp() * gsum) / *temperature;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape(), dx)?);
            }
            Op::CrossEntropy { target, pred } => {
                let batch = self.shape(*pred)[0];
                let scale = gd[0] / lit(batch as f64);
                let floor = lit::<T>(PROB_FLOOR);
                let p = self.value(*target).data();
                let q = self.value(*pred).data();
                if self.rg(*pred) {
                    let dq = p
                        .iter()
                        .zip(q)
                        .map(|(&pi, &qi)| if qi > floor { -scale * pi / qi } else { T::zero() })
                        .collect();
                    self.accumulate(grads, *pred, Tensor::new(self.shape(*pred), dq)?);
                }
                if self.rg(*target) {
                    let dp = q.iter().map(|&qi| -scale * qi.max(floor).ln()).collect();
                    self.accumulate(grads, *target, Tensor::new(self.shape(*target), dp)?);
                }
            }
            Op::WeightedCrossEntropy { target, log_pred } => {
                let batch = target.shape()[0];
                let scale = gd[0] / lit(batch as f64);
                let d = target.data().iter().map(|&p| -scale * p).collect();
                self.accumulate(grads, *log_pred, Tensor::new(target.shape(), d)?);
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).len();
                let scale = gd[0] * lit(2.0 / n as f64);
                let diff: Vec<T> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&x, &y)| (x - y) * scale)
                    .collect();
                if self.rg(*b) {
                    let neg = diff.iter().map(|&d| -d).collect();
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b), neg)?);
                }
                self.accumulate(grads, *a, Tensor::new(self.shape(*a), diff)?);
            }
            Op::WeightedSum { x, weights } => {
                let d = weights.data().iter().map(|&w| w * gd[0]).collect();
                self.accumulate(grads, *x, Tensor::new(weights.shape(), d)?);
            }
        }
        Ok(())
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
