//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation in execution order together with the
//! forward values its adjoint needs. [`Tape::backward`] replays the record in
//! reverse exactly once per node. Nodes created with [`Tape::constant`] and
//! everything computed only from constants carry no adjoint.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics observed by a batch-normalizing node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    Relu(Var),
    NormBatch {
        x: Var,
        inv_std: Vec<T>,
    },
    NormFixed {
        x: Var,
        inv_std: Vec<T>,
    },
    Affine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    AvgPool(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    KlDiv {
        p: Var,
        q: Var,
        p_probs: Vec<T>,
        q_probs: Vec<T>,
        row_kl: Vec<T>,
    },
    RowDist {
        a: Var,
        b: Var,
        dists: Vec<T>,
    },
    Add(Var, Var),
    Scale(Var, T),
    Mul(Var, Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a `[N, C, ...]` shape into `(N, C, spatial)`.
fn channel_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("expected [N, C, ...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Row-wise softmax and log-softmax of `[N, K]` logits, max-shifted.
fn softmax_rows<T: Scalar>(logits: &[T], n: usize, k: usize) -> (Vec<T>, Vec<T>) {
    let mut probs = vec![T::zero(); n * k];
    let mut logp = vec![T::zero(); n * k];
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for j in 0..k {
            logp[i * k + j] = row[j] - lse;
            probs[i * k + j] = logp[i * k + j].exp();
        }
    }
    (probs, logp)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf whose adjoint is tracked.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.value(a).dims2("matmul")?;
        let [k2, n] = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    /// `[N, K] + [K]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [n, k] = self.value(x).dims2("add_bias")?;
        let b = self.value(bias);
        if b.len() != k {
            return Err(Error::shape("add_bias", format!("bias of {} for width {k}", b.len())));
        }
        let mut data = self.value(x).data().to_vec();
        for i in 0..n {
            for j in 0..k {
                data[i * k + j] = data[i * k + j] + b.data()[j];
            }
        }
        let value = Tensor::new(vec![n, k], data)?;
        let g = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddBias(x, bias), g))
    }

    /// Zero-padded cross-correlation of `x: [N, C, H, W]` with `kernel: [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("conv2d")?;
        let [o, kc, kh, kw] = self.value(kernel).dims4("conv2d")?;
        if kc != c {
            return Err(Error::InvalidInput(format!(
                "conv2d: kernel expects {kc} input channels, input has {c}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidInput("conv2d: stride must be >= 1".into()));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let geom = ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(kernel).data());
        let value = Tensor::new(vec![n, o, geom.out_h(), geom.out_w()], out)?;
        let g = self.needs(x) || self.needs(kernel);
        Ok(self.push(value, Op::Conv2d { x, kernel, geom }, g))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let g = self.needs(x);
        self.push(value, Op::Relu(x), g)
    }

    /// Normalizes each channel of `[N, C, ...]` with the statistics of this
    /// batch: `(x - mean) / sqrt(var + eps)` using the biased variance.
    pub fn norm_batch(&mut self, x: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let xv = self.value(x);
        let (n, c, s) = channel_dims(xv.shape(), "norm_batch")?;
        if n < 2 {
            return Err(Error::InvalidInput(format!(
                "batch statistics need at least 2 samples, got {n}"
            )));
        }
        let count = T::of((n * s) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let xd = xv.data();
        for ch in 0..c {
            let mut acc = T::zero();
            for i in 0..n {
                for &v in &xd[(i * c + ch) * s..(i * c + ch + 1) * s] {
                    acc = acc + v;
                }
            }
            let mu = acc / count;
            let mut sq = T::zero();
            for i in 0..n {
                for &v in &xd[(i * c + ch) * s..(i * c + ch + 1) * s] {
                    sq = sq + (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = sq / count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let value = Self::normalize(xv, &mean, &inv_std, c, s);
        let g = self.needs(x);
        let var_node = self.push(value, Op::NormBatch { x, inv_std }, g);
        Ok((var_node, BatchStats { mean, var }))
    }

    /// Normalizes each channel with fixed statistics (no adjoint to them).
    pub fn norm_fixed(&mut self, x: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (_, c, s) = channel_dims(xv.shape(), "norm_fixed")?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "norm_fixed",
                format!("{c} channels vs stats of {}/{}", mean.len(), var.len()),
            ));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let value = Self::normalize(xv, mean, &inv_std, c, s);
        let g = self.needs(x);
        Ok(self.push(value, Op::NormFixed { x, inv_std }, g))
    }

    fn normalize(x: &Tensor<T>, mean: &[T], inv_std: &[T], c: usize, s: usize) -> Tensor<T> {
        let mut out = x.clone();
        for (idx, chunk) in out.data_mut().chunks_mut(s).enumerate() {
            let ch = idx % c;
            for v in chunk {
                *v = (*v - mean[ch]) * inv_std[ch];
            }
        }
        out
    }

    /// Per-channel `gamma * x + beta`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, c, s) = channel_dims(self.value(x).shape(), "channel_affine")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("channel_affine", "affine width differs from channels"));
        }
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut out = self.value(x).clone();
        for (idx, chunk) in out.data_mut().chunks_mut(s).enumerate() {
            let ch = idx % c;
            for v in chunk {
                *v = *v * gd[ch] + bd[ch];
            }
        }
        let g = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::Affine { x, gamma, beta }, g))
    }

    /// Spatial mean: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let s = h * w;
        let inv = T::one() / T::of(s as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(s)
            .map(|chunk| chunk.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        let g = self.needs(x);
        Ok(self.push(value, Op::AvgPool(x), g))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k] = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidInput(format!("label {bad} outside [0, {k})")));
        }
        let (probs, logp) = softmax_rows(self.value(logits).data(), n, k);
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -logp[i * k + l])
            .sum();
        let value = Tensor::scalar(total / T::of(n as f64));
        let g = self.needs(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            g,
        ))
    }

    /// Mean over rows of `KL(softmax(p) ‖ softmax(q))`.
    pub fn kl_div_logits(&mut self, p: Var, q: Var) -> Result<Var> {
        let [n, k] = self.value(p).dims2("kl_div_logits")?;
        self.value(p).expect_same_shape(self.value(q), "kl_div_logits")?;
        let (p_probs, p_log) = softmax_rows(self.value(p).data(), n, k);
        let (q_probs, q_log) = softmax_rows(self.value(q).data(), n, k);
        let row_kl: Vec<T> = (0..n)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        let idx = i * k + j;
                        p_probs[idx] * (p_log[idx] - q_log[idx])
                    })
                    .sum()
            })
            .collect();
        let value = Tensor::scalar(row_kl.iter().copied().sum::<T>() / T::of(n as f64));
        let g = self.needs(p) || self.needs(q);
        Ok(self.push(
            value,
            Op::KlDiv {
                p,
                q,
                p_probs,
                q_probs,
                row_kl,
            },
            g,
        ))
    }

    /// Mean over rows of the Euclidean distance `‖a_i - b_i‖₂`.
    pub fn row_distance_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, f] = self.value(a).dims2("row_distance_mean")?;
        self.value(a).expect_same_shape(self.value(b), "row_distance_mean")?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let dists: Vec<T> = (0..n)
            .map(|i| {
                (0..f)
                    .map(|j| {
                        let d = ad[i * f + j] - bd[i * f + j];
                        d * d
                    })
                    .sum::<T>()
                    .sqrt()
            })
            .collect();
        let value = Tensor::scalar(dists.iter().copied().sum::<T>() / T::of(n as f64));
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::RowDist { a, b, dists }, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).scale(c);
        let g = self.needs(a);
        self.push(value, Op::Scale(a, c), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let g = self.needs(a);
        self.push(value, Op::Sum(a), g)
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Adjoints<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = adj[idx].take() else { continue };
            self.propagate(node, &dy, &mut adj)?;
            adj[idx] = Some(dy);
        }
        Ok(Adjoints { adj })
    }

    fn propagate(&self, node: &Node<T>, dy: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut send = |v: Var, g: Tensor<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.add_assign_tensor(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let [m, k] = av.dims2("matmul")?;
                let n = bv.shape()[1];
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_nt(m, n, k, dy.data(), bv.data(), &mut da, false);
                    send(*a, Tensor::new(vec![m, k], da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm_tn(k, m, n, av.data(), dy.data(), &mut db, false);
                    send(*b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::AddBias(x, bias) => {
                send(*x, dy.clone());
                if self.needs(*bias) {
                    let [n, k] = dy.dims2("add_bias")?;
                    let mut db = vec![T::zero(); k];
                    for i in 0..n {
                        for j in 0..k {
                            db[j] = db[j] + dy.data()[i * k + j];
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    send(*bias, Tensor::new(shape, db)?);
                }
            }
            Op::Conv2d { x, kernel, geom } => {
                let (dx, dk) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*kernel).data(),
                    dy.data(),
                    self.needs(*x),
                    self.needs(*kernel),
                );
                if let Some(dx) = dx {
                    send(*x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
                }
                if let Some(dk) = dk {
                    send(*kernel, Tensor::new(self.value(*kernel).shape().to_vec(), dk)?);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let g = xv.zip_map(dy, |v, d| if v > T::zero() { d } else { T::zero() })?;
                send(*x, g);
            }
            Op::NormBatch { x, inv_std } => {
                // dx = inv_std / M * (M dy - Σdy - y Σ(dy·y)), y = normalized output
                let y = &node.value;
                let (n, c, s) = channel_dims(y.shape(), "norm_batch")?;
                let count = T::of((n * s) as f64);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_y = vec![T::zero(); c];
                for (idx, (yc, dc)) in y.data().chunks(s).zip(dy.data().chunks(s)).enumerate() {
                    let ch = idx % c;
                    for (&yv, &dv) in yc.iter().zip(dc) {
                        sum_dy[ch] = sum_dy[ch] + dv;
                        sum_dy_y[ch] = sum_dy_y[ch] + dv * yv;
                    }
                }
                let mut dx = dy.clone();
                for (idx, (dxc, yc)) in dx.data_mut().chunks_mut(s).zip(y.data().chunks(s)).enumerate() {
                    let ch = idx % c;
                    let scale = inv_std[ch] / count;
                    for (d, &yv) in dxc.iter_mut().zip(yc) {
                        *d = scale * (count * *d - sum_dy[ch] - yv * sum_dy_y[ch]);
                    }
                }
                send(*x, dx);
            }
            Op::NormFixed { x, inv_std } => {
                let (_, c, s) = channel_dims(dy.shape(), "norm_fixed")?;
                let mut dx = dy.clone();
                for (idx, chunk) in dx.data_mut().chunks_mut(s).enumerate() {
                    let inv = inv_std[idx % c];
                    for d in chunk {
                        *d = *d * inv;
                    }
                }
                send(*x, dx);
            }
            Op::Affine { x, gamma, beta } => {
                let (_, c, s) = channel_dims(dy.shape(), "channel_affine")?;
                let gd = self.value(*gamma).data();
                if self.needs(*x) {
                    let mut dx = dy.clone();
                    for (idx, chunk) in dx.data_mut().chunks_mut(s).enumerate() {
                        let gv = gd[idx % c];
                        for d in chunk {
                            *d = *d * gv;
                        }
                    }
                    send(*x, dx);
                }
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    let xv = self.value(*x).data();
                    for (idx, (dc, xc)) in dy.data().chunks(s).zip(xv.chunks(s)).enumerate() {
                        let ch = idx % c;
                        for (&dv, &xv) in dc.iter().zip(xc) {
                            dg[ch] = dg[ch] + dv * xv;
                            db[ch] = db[ch] + dv;
                        }
                    }
                    send(*gamma, Tensor::new(self.value(*gamma).shape().to_vec(), dg)?);
                    send(*beta, Tensor::new(self.value(*beta).shape().to_vec(), db)?);
                }
            }
            Op::AvgPool(x) => {
                let shape = self.value(*x).shape().to_vec();
                let s = shape[2] * shape[3];
                let inv = T::one() / T::of(s as f64);
                let mut dx = Vec::with_capacity(shape.iter().product());
                for &d in dy.data() {
                    dx.extend(std::iter::repeat_n(d * inv, s));
                }
                send(*x, Tensor::new(shape, dx)?);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let [n, k] = self.value(*logits).dims2("softmax_cross_entropy")?;
                let scale = dy.item()? / T::of(n as f64);
                let mut g = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    g[i * k + l] = g[i * k + l] - T::one();
                }
                for v in &mut g {
                    *v = *v * scale;
                }
                send(*logits, Tensor::new(vec![n, k], g)?);
            }
            Op::KlDiv {
                p,
                q,
                p_probs,
                q_probs,
                row_kl,
            } => {
                let [n, k] = self.value(*p).dims2("kl_div_logits")?;
                let scale = dy.item()? / T::of(n as f64);
                if self.needs(*p) {
                    let (_, p_log) = softmax_rows(self.value(*p).data(), n, k);
                    let (_, q_log) = softmax_rows(self.value(*q).data(), n, k);
                    let mut g = vec![T::zero(); n * k];
                    for i in 0..n {
                        for j in 0..k {
                            let idx = i * k + j;
                            g[idx] = scale * p_probs[idx] * (p_log[idx] - q_log[idx] - row_kl[i]);
                        }
                    }
                    send(*p, Tensor::new(vec![n, k], g)?);
                }
                if self.needs(*q) {
                    let g: Vec<T> = q_probs
                        .iter()
                        .zip(p_probs)
                        .map(|(&qv, &pv)| scale * (qv - pv))
                        .collect();
                    send(*q, Tensor::new(vec![n, k], g)?);
                }
            }
            Op::RowDist { a, b, dists } => {
                let [n, f] = self.value(*a).dims2("row_distance_mean")?;
                let scale = dy.item()? / T::of(n as f64);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![T::zero(); n * f];
                for i in 0..n {
                    // the norm's subgradient at zero is taken as 0
                    if dists[i] == T::zero() {
                        continue;
                    }
                    for j in 0..f {
                        ga[i * f + j] = scale * (ad[i * f + j] - bd[i * f + j]) / dists[i];
                    }
                }
                if self.needs(*b) {
                    let gb = ga.iter().map(|&v| -v).collect();
                    send(*b, Tensor::new(vec![n, f], gb)?);
                }
                send(*a, Tensor::new(vec![n, f], ga)?);
            }
            Op::Add(a, b) => {
                send(*a, dy.clone());
                send(*b, dy.clone());
            }
            Op::Scale(a, c) => send(*a, dy.scale(*c)),
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    send(*a, dy.zip_map(self.value(*b), |d, v| d * v)?);
                }
                if self.needs(*b) {
                    send(*b, dy.zip_map(self.value(*a), |d, v| d * v)?);
                }
            }
            Op::Sum(a) => {
                let d = dy.item()?;
                send(*a, Tensor::full(self.value(*a).shape(), d));
            }
        }
        Ok(())
    }
}

/// Adjoints produced by one backward sweep, indexed by node.
pub struct Adjoints<T> {
    adj: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adjoints<T> {
    /// Adjoint of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.adj.get(v.0).and_then(|a| a.as_ref())
    }

    /// Adjoint of `v`, zero-filled to `like`'s shape when unreached.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
