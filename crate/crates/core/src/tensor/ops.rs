//! Differentiable primitives. Each forward method records an [`Op`] whose
//! backward rule lives in [`Tape::backward_node`].

use crate::error::{Error, Result};
use crate::quantizer::QuantParams;

use super::gemm::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::tape::{AttnGeom, ConvGeom, GradStore, NormGeom, Op, QVar, Tape, Var};
use super::{Scalar, Tensor};

/// Variance epsilon for batch and layer normalization.
pub const NORM_EPS: f64 = 1e-5;
/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Per-channel statistics of one batch-norm forward in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<T>,
}

/// Running estimates consumed by batch norm in evaluation mode.
pub struct RunningStats<'a, T> {
    pub mean: &'a [T],
    pub var: &'a [T],
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let x3 = x * x * x;
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x3);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
    max + sum.ln()
}

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
        );
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds `bias` (`[D]` or `[R, D]`) to consecutive rows of `x`, cycling
    /// through the bias rows.
    pub fn add_rows(&mut self, x: Var, bias: Var) -> Result<Var> {
        let bias_len = self.value(bias).len();
        let d = *self.shape(bias).last().unwrap_or(&1);
        let xs = self.shape(x);
        if xs.last() != Some(&d) || self.value(x).len() % bias_len != 0 {
            return Err(Error::shape("add_rows", xs, self.shape(bias)));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % bias_len])
            .collect();
        let out = Tensor::new(xs, data)?;
        Ok(self.push(out, Op::AddRows { x, bias }, &[x, bias]))
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::MulScalar { x, s }, &[x])
    }

    /// Rectified linear unit; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu { x }, &[x])
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/π) (x + 0.044715 x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Mean over dimension `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("mean_axis", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let scale = T::one() / T::lit(len as f64);
        out.iter_mut().for_each(|v| *v *= scale);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            out,
            Op::MeanAxis {
                x,
                outer,
                axis: len,
                inner,
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    /// `out[i] = x[index[i]]` over flat storage, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape("gather", self.shape(x), &[bad]));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Gather { x, index }, &[x]))
    }

    /// 2-D cross-correlation of `x [N,C,H,W]` with `w [F,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ws[0], ws[2], ws[3]);
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::Config(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                wd + 2 * padding
            )));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (wd + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            f,
            kh,
            kw,
            stride,
            pad: padding,
            ho,
            wo,
        };
        let (k, p) = (c * kh * kw, ho * wo);
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let mut out = vec![T::zero(); n * f * p];
        let mut cols = vec![T::zero(); k * p];
        for img in 0..n {
            im2col(
                &geom,
                &xd[img * c * h * wd..(img + 1) * c * h * wd],
                &mut cols,
            );
            gemm_acc(
                f,
                k,
                p,
                wdata,
                &cols,
                &mut out[img * f * p..(img + 1) * f * p],
            );
        }
        let out = Tensor::new(&[n, f, ho, wo], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// Batch normalization over `[N, C, ...]`, per channel `C`.
    ///
    /// With `running = None` the batch statistics normalize the input and are
    /// returned for the caller's running estimate; otherwise the given running
    /// statistics are used and nothing is returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<RunningStats<'_, T>>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || xs[0] == 0 {
            return Err(Error::Config(format!(
                "batch_norm needs a non-empty batch, got {xs:?}"
            )));
        }
        let c = xs[1];
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("batch_norm", &xs, self.shape(gamma)));
        }
        let geom = NormGeom {
            outer: xs[0],
            channels: c,
            inner: xs[2..].iter().product(),
        };
        let count = geom.outer * geom.inner;
        let xd = self.value(x).data();
        let (mean, var, stats) = match &running {
            Some(r) => {
                if r.mean.len() != c || r.var.len() != c {
                    return Err(Error::shape(
                        "batch_norm running stats",
                        &xs,
                        &[r.mean.len()],
                    ));
                }
                (r.mean.to_vec(), r.var.to_vec(), None)
            }
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for o in 0..geom.outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * geom.inner;
                        for &v in &xd[base..base + geom.inner] {
                            mean[ch] += v;
                        }
                    }
                }
                let inv_count = T::one() / T::lit(count as f64);
                mean.iter_mut().for_each(|m| *m *= inv_count);
                for o in 0..geom.outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * geom.inner;
                        for &v in &xd[base..base + geom.inner] {
                            let d = v - mean[ch];
                            var[ch] += d * d;
                        }
                    }
                }
                var.iter_mut().for_each(|v| *v *= inv_count);
                let unbiased = if count > 1 {
                    let s = T::lit(count as f64 / (count - 1) as f64);
                    var.iter().map(|&v| v * s).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::lit(NORM_EPS)).sqrt())
            .collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..geom.outer {
            for ch in 0..c {
                let base = (o * c + ch) * geom.inner;
                for i in base..base + geom.inner {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + b[ch];
                }
            }
        }
        let out = Tensor::new(&xs, out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            geom,
            xhat,
            inv_std,
            batch_stats: running.is_none(),
        };
        Ok((self.push(out, op, &[x, gamma, beta]), stats))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap_or(&0);
        if d == 0 || self.value(x).is_empty() {
            return Err(Error::Config(format!(
                "layer_norm needs non-empty input, got {xs:?}"
            )));
        }
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm", &xs, self.shape(gamma)));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xd.len() / d;
        let inv_d = T::one() / T::lit(d as f64);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + T::lit(NORM_EPS)).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(&xs, out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            dim: d,
            xhat,
            inv_std,
        };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch * tokens, dim]` with heads laid out as
    /// contiguous column blocks of width `dim / heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let qs = self.shape(q).to_vec();
        if qs.len() != 2 || batch == 0 || qs[0] % batch != 0 {
            return Err(Error::shape("attention", &qs, &[batch]));
        }
        let dim = qs[1];
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        let geom = AttnGeom {
            batch,
            tokens: qs[0] / batch,
            heads,
            dim,
        };
        let (t, dh) = (geom.tokens, dim / heads);
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![T::zero(); qd.len()];
        let mut probs = vec![T::zero(); batch * heads * t * t];
        let mut scores = vec![T::zero(); t * t];
        for b in 0..batch {
            for h in 0..heads {
                let qh = head_block(qd, b, h, t, dim, dh);
                let kh = head_block(kd, b, h, t, dim, dh);
                let vh = head_block(vd, b, h, t, dim, dh);
                scores.iter_mut().for_each(|s| *s = T::zero());
                gemm_nt_acc(t, dh, t, &qh, &kh, &mut scores);
                scores.iter_mut().for_each(|s| *s *= scale);
                let p = &mut probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                for r in 0..t {
                    softmax_row(&scores[r * t..(r + 1) * t], &mut p[r * t..(r + 1) * t]);
                }
                let mut oh = vec![T::zero(); t * dh];
                gemm_acc(t, t, dh, p, &vh, &mut oh);
                scatter_head(&mut out, &oh, b, h, t, dim, dh);
            }
        }
        let out = Tensor::new(&qs, out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(Error::shape("softmax_cross_entropy", ls, &[labels.len()]));
        }
        let (n, c) = (ls[0], ls[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let data = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &data[r * c..(r + 1) * c];
            let lse = softmax_row(row, &mut probs[r * c..(r + 1) * c]);
            loss += lse - row[label];
        }
        loss = loss / T::lit(n as f64);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Mean over rows of `KL(target ‖ softmax(logits))` for fixed target
    /// distributions `target [N, C]`.
    pub fn soft_target_kl(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls != target.shape() || ls[0] == 0 {
            return Err(Error::shape("soft_target_kl", ls, target.shape()));
        }
        let (n, c) = (ls[0], ls[1]);
        let data = self.value(logits).data();
        let t = target.data();
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for r in 0..n {
            let row = &data[r * c..(r + 1) * c];
            let lse = softmax_row(row, &mut probs[r * c..(r + 1) * c]);
            for j in 0..c {
                let tj = t[r * c + j];
                if tj > T::zero() {
                    loss += tj * (tj.ln() - (row[j] - lse));
                }
            }
        }
        loss = loss / T::lit(n as f64);
        let op = Op::SoftTargetKl {
            logits,
            target: t.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if ad.is_empty() {
            return Err(Error::shape("mse", &[0], &[0]));
        }
        let sum: T = ad.iter().zip(bd).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let loss = sum / T::lit(ad.len() as f64);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { a, b }, &[a, b]))
    }

    /// Fake-quantize `x` with the quantizer recorded as `q`.
    pub fn fake_quant(&mut self, x: Var, q: QVar) -> Result<Var> {
        let params: QuantParams = self.quants[q.0].params;
        params.validate()?;
        let out = self
            .value(x)
            .map(|v| T::lit(params.forward_scalar(v.as_f64())));
        let requires_grad = self.nodes[x.0].requires_grad || self.quants[q.0].requires_grad;
        Ok(self.push_raw(out, Op::FakeQuant { x, q }, requires_grad))
    }

    pub(crate) fn backward_node(&self, id: usize, g: &[T], store: &mut GradStore<'_, T>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = store.slot(*a) {
                    gemm_nt_acc(m, n, k, g, bv, ga);
                }
                if let Some(gb) = store.slot(*b) {
                    gemm_tn_acc(k, m, n, av, g, gb);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(gv) = store.slot(v) {
                        gv.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = store.slot(*a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = store.slot(*b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRows { x, bias } => {
                if let Some(gx) = store.slot(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = store.slot(*bias) {
                    let len = gb.len();
                    for (i, &s) in g.iter().enumerate() {
                        gb[i % len] += s;
                    }
                }
            }
            Op::MulScalar { x, s } => {
                if let Some(gx) = store.slot(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, &u)| *d += u * *s);
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                if let Some(gx) = store.slot(*x) {
                    for i in 0..g.len() {
                        if xv[i] > T::zero() {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                if let Some(gx) = store.slot(*x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = store.slot(*x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAxis {
                x,
                outer,
                axis,
                inner,
            } => {
                let scale = T::one() / T::lit(*axis as f64);
                if let Some(gx) = store.slot(*x) {
                    for o in 0..*outer {
                        for a in 0..*axis {
                            let base = (o * axis + a) * inner;
                            for i in 0..*inner {
                                gx[base + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = store.slot(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Gather { x, index } => {
                if let Some(gx) = store.slot(*x) {
                    for (&i, &s) in index.iter().zip(g) {
                        gx[i] += s;
                    }
                }
            }
            Op::Conv2d { x, w, geom } => conv2d_backward(self, *x, *w, geom, g, store),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                geom,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let gam = self.value(*gamma).data();
                let c = geom.channels;
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for o in 0..geom.outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * geom.inner;
                        for i in base..base + geom.inner {
                            sum_dy[ch] += g[i];
                            sum_dy_xhat[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if let Some(gg) = store.slot(*gamma) {
                    gg.iter_mut().zip(&sum_dy_xhat).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = store.slot(*beta) {
                    gb.iter_mut().zip(&sum_dy).for_each(|(d, &s)| *d += s);
                }
                if let Some(gx) = store.slot(*x) {
                    let m = T::lit((geom.outer * geom.inner) as f64);
                    for o in 0..geom.outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * geom.inner;
                            let k = gam[ch] * inv_std[ch];
                            for i in base..base + geom.inner {
                                gx[i] += if *batch_stats {
                                    k * (g[i] - sum_dy[ch] / m - xhat[i] * sum_dy_xhat[ch] / m)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                dim,
                xhat,
                inv_std,
            } => {
                let d = *dim;
                let gam = self.value(*gamma).data();
                let rows = g.len() / d;
                if let Some(gg) = store.slot(*gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = store.slot(*beta) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = store.slot(*x) {
                    let inv_d = T::one() / T::lit(d as f64);
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dxh = g[r * d + j] * gam[j];
                            s1 += dxh;
                            s2 += dxh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dxh = g[r * d + j] * gam[j];
                            gx[r * d + j] +=
                                inv_std[r] * (dxh - s1 * inv_d - xhat[r * d + j] * s2 * inv_d);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            } => attention_backward(self, [*q, *k, *v], geom, probs, g, store),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if let Some(gl) = store.slot(*logits) {
                    let n = labels.len();
                    let c = probs.len() / n;
                    let scale = g[0] / T::lit(n as f64);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::SoftTargetKl {
                logits,
                target,
                probs,
            } => {
                if let Some(gl) = store.slot(*logits) {
                    let n = self.shape(*logits)[0];
                    let scale = g[0] / T::lit(n as f64);
                    for i in 0..probs.len() {
                        gl[i] += scale * (probs[i] - target[i]);
                    }
                }
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let scale = T::lit(2.0) * g[0] / T::lit(av.len() as f64);
                if let Some(ga) = store.slot(*a) {
                    for i in 0..av.len() {
                        ga[i] += scale * (av[i] - bv[i]);
                    }
                }
                if let Some(gb) = store.slot(*b) {
                    for i in 0..av.len() {
                        gb[i] -= scale * (av[i] - bv[i]);
                    }
                }
            }
            Op::FakeQuant { x, q } => {
                let leaf = &self.quants[q.0];
                let params = leaf.params;
                let xv = self.value(*x).data();
                let mut acc = super::QuantGrads::default();
                let mut gx = store.slot(*x);
                for i in 0..g.len() {
                    let s = params.backward_scalar(g[i].as_f64(), xv[i].as_f64());
                    if let Some(gx) = gx.as_deref_mut() {
                        gx[i] += T::lit(s.v);
                    }
                    acc.lower += s.lower;
                    acc.upper += s.upper;
                    acc.alpha += s.alpha;
                }
                if leaf.requires_grad {
                    let dst = &mut store.quant[q.0];
                    dst.lower += acc.lower;
                    dst.upper += acc.upper;
                    if params.mode.has_alpha() {
                        dst.alpha += acc.alpha;
                    }
                }
            }
        }
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.ho * g.wo;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] =
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                x[(ci * g.h + iy as usize) * g.w + ix as usize]
                            } else {
                                T::zero()
                            };
                    }
                }
            }
        }
    }
}

fn col2im_acc<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.ho * g.wo;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[(ci * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    w: Var,
    geom: &ConvGeom,
    g: &[T],
    store: &mut GradStore<'_, T>,
) {
    let (k, p) = (geom.c * geom.kh * geom.kw, geom.ho * geom.wo);
    let img_in = geom.c * geom.h * geom.w;
    let img_out = geom.f * p;
    let xd = tape.value(x).data();
    let wd = tape.value(w).data();
    let mut cols = vec![T::zero(); k * p];
    if store.slot(w).is_some() {
        let mut gw = vec![T::zero(); geom.f * k];
        for img in 0..geom.n {
            im2col(geom, &xd[img * img_in..(img + 1) * img_in], &mut cols);
            gemm_nt_acc(
                geom.f,
                p,
                k,
                &g[img * img_out..(img + 1) * img_out],
                &cols,
                &mut gw,
            );
        }
        let dst = store.slot(w).expect("checked above");
        dst.iter_mut().zip(&gw).for_each(|(d, &s)| *d += s);
    }
    if let Some(gx) = store.slot(x) {
        for img in 0..geom.n {
            cols.iter_mut().for_each(|v| *v = T::zero());
            gemm_tn_acc(
                k,
                geom.f,
                p,
                wd,
                &g[img * img_out..(img + 1) * img_out],
                &mut cols,
            );
            col2im_acc(geom, &cols, &mut gx[img * img_in..(img + 1) * img_in]);
        }
    }
}

fn head_block<T: Scalar>(src: &[T], b: usize, h: usize, t: usize, dim: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(t * dh);
    for r in 0..t {
        let base = (b * t + r) * dim + h * dh;
        out.extend_from_slice(&src[base..base + dh]);
    }
    out
}

fn scatter_head<T: Scalar>(
    dst: &mut [T],
    block: &[T],
    b: usize,
    h: usize,
    t: usize,
    dim: usize,
    dh: usize,
) {
    for r in 0..t {
        let base = (b * t + r) * dim + h * dh;
        for j in 0..dh {
            dst[base + j] += block[r * dh + j];
        }
    }
}

fn attention_backward<T: Scalar>(
    tape: &Tape<T>,
    [q, k, v]: [Var; 3],
    geom: &AttnGeom,
    probs: &[T],
    g: &[T],
    store: &mut GradStore<'_, T>,
) {
    let (t, dim, heads) = (geom.tokens, geom.dim, geom.heads);
    let dh = dim / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let (qd, kd, vd) = (
        tape.value(q).data(),
        tape.value(k).data(),
        tape.value(v).data(),
    );
    let len = qd.len();
    let mut dq = vec![T::zero(); len];
    let mut dk = vec![T::zero(); len];
    let mut dv = vec![T::zero(); len];
    for b in 0..geom.batch {
        for h in 0..heads {
            let p = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
            let qh = head_block(qd, b, h, t, dim, dh);
            let kh = head_block(kd, b, h, t, dim, dh);
            let vh = head_block(vd, b, h, t, dim, dh);
            let go = head_block(g, b, h, t, dim, dh);

            let mut dvh = vec![T::zero(); t * dh];
            gemm_tn_acc(t, t, dh, p, &go, &mut dvh);
            let mut dp = vec![T::zero(); t * t];
            gemm_nt_acc(t, dh, t, &go, &vh, &mut dp);
            let mut ds = vec![T::zero(); t * t];
            for r in 0..t {
                let row = r * t..(r + 1) * t;
                let dot: T = dp[row.clone()]
                    .iter()
                    .zip(&p[row.clone()])
                    .map(|(&a, &b)| a * b)
                    .sum();
                for j in row {
                    ds[j] = p[j] * (dp[j] - dot) * scale;
                }
            }
            let mut dqh = vec![T::zero(); t * dh];
            gemm_acc(t, t, dh, &ds, &kh, &mut dqh);
            let mut dkh = vec![T::zero(); t * dh];
            gemm_tn_acc(t, t, dh, &ds, &qh, &mut dkh);

            scatter_head(&mut dq, &dqh, b, h, t, dim, dh);
            scatter_head(&mut dk, &dkh, b, h, t, dim, dh);
            scatter_head(&mut dv, &dvh, b, h, t, dim, dh);
        }
    }
    for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(dst) = store.slot(var) {
            dst.iter_mut().zip(&grad).for_each(|(d, &s)| *d += s);
        }
    }
}
