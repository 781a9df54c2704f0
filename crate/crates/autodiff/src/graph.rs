use crate::conv::{self, ConvCache};
use crate::error::{AutodiffError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const POWER_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// How symbols `[B, N, K, 1]` are grouped when measuring average power.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PowerMode {
    /// Every transmitter row `(b, n)` is normalized on its own.
    PerTransmitter,
    /// Power averaged over the concatenation of all `N` rows of a sample.
    Concatenated,
    /// Power measured on the superposition `sum_n x[b, n, :]`.
    Superposed,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize, cache: ConvCache<T> },
    ConvT2d { x: Var, w: Var, stride: usize, pad: usize, cache: ConvCache<T> },
    ChannelBias { x: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    PRelu { x: Var, a: Var },
    Affine { x: Var, scale: T },
    Add { a: Var, b: Var },
    Concat { parts: Vec<Var> },
    Reshape { x: Var },
    FlattenTruncate { x: Var },
    UnflattenPad { x: Var, channels_per_group: usize },
    PowerNorm { x: Var, mode: PowerMode, inv_rms: Vec<T> },
    SumTransmitters { x: Var },
    BroadcastScale { s: Var, g: Var },
    GaussianNll { pred: Var, target: Var, sigma2: f64 },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Eager tape over a borrowed parameter store.
///
/// Batch-norm running statistics are not written back automatically; call
/// [`Graph::running_stat_updates`] after a training forward pass.
pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    train: bool,
    nodes: Vec<Node<T>>,
    bn_updates: Vec<(ParamId, Tensor<T>)>,
}

fn mismatch<T>(msg: String) -> Result<T> {
    Err(AutodiffError::ShapeMismatch(msg))
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>, train: bool) -> Self {
        Self { params, train, nodes: Vec::new(), bn_updates: Vec::new() }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.params.is_trainable(id);
        self.push(self.params.get(id).clone(), Op::Param(id), trainable)
    }

    pub fn conv2d(&mut self, x: Var, w: ParamId, stride: usize, pad: usize) -> Result<Var> {
        let wv = self.param(w);
        let (y, cache) = conv::conv2d_forward(self.value(x), self.value(wv), stride, pad)?;
        let rg = self.rg(x) || self.rg(wv);
        Ok(self.push(y, Op::Conv2d { x, w: wv, stride, pad, cache }, rg))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: ParamId, stride: usize, pad: usize, out_pad: (usize, usize)) -> Result<Var> {
        let wv = self.param(w);
        let (y, cache) = conv::conv_transpose2d_forward(self.value(x), self.value(wv), stride, pad, out_pad)?;
        let rg = self.rg(x) || self.rg(wv);
        Ok(self.push(y, Op::ConvT2d { x, w: wv, stride, pad, cache }, rg))
    }

    /// Adds `b[c]` to every pixel of channel `c`.
    pub fn channel_bias(&mut self, x: Var, b: ParamId) -> Result<Var> {
        let bv = self.param(b);
        let [n, c, h, w] = self.shape(x);
        if self.value(bv).len() != c {
            return mismatch(format!("bias of {} entries for {c} channels", self.value(bv).len()));
        }
        let hw = h * w;
        let mut y = self.value(x).clone();
        let bias = self.value(bv).data().to_vec();
        for bi in 0..n {
            for (ci, &bc) in bias.iter().enumerate() {
                for v in &mut y.data_mut()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                    *v += bc;
                }
            }
        }
        let rg = self.rg(x) || self.rg(bv);
        Ok(self.push(y, Op::ChannelBias { x, b: bv }, rg))
    }

    /// Per-channel batch normalization with learned scale and shift.
    ///
    /// Training mode uses batch statistics and queues running-statistic
    /// updates; evaluation mode uses the stored running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var> {
        let gv = self.param(gamma);
        let bv = self.param(beta);
        let [n, c, h, w] = self.shape(x);
        if self.value(gv).len() != c || self.value(bv).len() != c {
            return mismatch(format!("batch norm parameters do not match {c} channels"));
        }
        let hw = h * w;
        let m = n * hw;
        let train = self.train;
        if train && n < 2 {
            return Err(AutodiffError::DegenerateBatch(n));
        }
        let xs = self.value(x).data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        if train {
            for bi in 0..n {
                for ci in 0..c {
                    let s = &xs[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    mean[ci] += s.iter().map(|v| v.as_f64()).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for bi in 0..n {
                for ci in 0..c {
                    let s = &xs[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    var[ci] += s.iter().map(|v| (v.as_f64() - mean[ci]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
        } else {
            let rm = self.params.get(running_mean).data();
            let rv = self.params.get(running_var).data();
            for ci in 0..c {
                mean[ci] = rm[ci].as_f64();
                var[ci] = rv[ci].as_f64();
            }
        }
        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + BN_EPS).sqrt())).collect();
        let g = self.value(gv).data();
        let b = self.value(bv).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut y = vec![T::zero(); xs.len()];
        for bi in 0..n {
            for ci in 0..c {
                let mu = T::from_f64(mean[ci]);
                for i in (bi * c + ci) * hw..(bi * c + ci + 1) * hw {
                    let xh = (xs[i] - mu) * inv_std[ci];
                    xhat[i] = xh;
                    y[i] = g[ci] * xh + b[ci];
                }
            }
        }
        if train {
            let rm = self.params.get(running_mean).data();
            let rv = self.params.get(running_var).data();
            let unbiased = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
            let new_mean: Vec<T> =
                (0..c).map(|ci| T::from_f64((1.0 - BN_MOMENTUM) * rm[ci].as_f64() + BN_MOMENTUM * mean[ci])).collect();
            let new_var: Vec<T> = (0..c)
                .map(|ci| T::from_f64((1.0 - BN_MOMENTUM) * rv[ci].as_f64() + BN_MOMENTUM * var[ci] * unbiased))
                .collect();
            let shape = self.params.get(running_mean).shape();
            self.bn_updates.push((running_mean, Tensor::from_vec(shape, new_mean)?));
            self.bn_updates.push((running_var, Tensor::from_vec(shape, new_var)?));
        }
        let rg = self.rg(x) || self.rg(gv) || self.rg(bv);
        let y = Tensor::from_vec([n, c, h, w], y)?;
        Ok(self.push(y, Op::BatchNorm { x, gamma: gv, beta: bv, xhat, inv_std, train }, rg))
    }

    /// Running-statistic values produced by training-mode batch norms, in order.
    pub fn running_stat_updates(&self) -> &[(ParamId, Tensor<T>)] {
        &self.bn_updates
    }

    /// `x` for `x >= 0`, `a[c] * x` otherwise.
    pub fn prelu(&mut self, x: Var, a: ParamId) -> Result<Var> {
        let av = self.param(a);
        let [n, c, h, w] = self.shape(x);
        if self.value(av).len() != c {
            return mismatch(format!("prelu slope of {} entries for {c} channels", self.value(av).len()));
        }
        let hw = h * w;
        let slopes = self.value(av).data().to_vec();
        let mut y = self.value(x).clone();
        for bi in 0..n {
            for (ci, &s) in slopes.iter().enumerate() {
                for v in &mut y.data_mut()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                    if *v < T::zero() {
                        *v *= s;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(av);
        Ok(self.push(y, Op::PRelu { x, a: av }, rg))
    }

    /// `scale * x + shift` with constant scalars.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::from_f64(scale), T::from_f64(shift));
        let y = self.value(x).map(|v| v * s + t);
        let rg = self.rg(x);
        self.push(y, Op::Affine { x, scale: s }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return mismatch(format!("add {:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| AutodiffError::ShapeMismatch("empty concat".into()))?);
        let [n, _, h, w] = first;
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != n || s[2] != h || s[3] != w {
                return mismatch(format!("concat {:?} with {:?}", first, s));
            }
            c_total += s[1];
        }
        let hw = h * w;
        let mut y = Vec::with_capacity(n * c_total * hw);
        for bi in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                y.extend_from_slice(&self.value(p).data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let y = Tensor::from_vec([n, c_total, h, w], y)?;
        Ok(self.push(y, Op::Concat { parts: parts.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: [usize; 4]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Reshape { x }, rg))
    }

    /// Row-major flatten of each item followed by truncation to `keep` values.
    /// Output shape `[M, keep, 1, 1]`.
    pub fn flatten_truncate(&mut self, x: Var, keep: usize) -> Result<Var> {
        let [m, c, h, w] = self.shape(x);
        let per = c * h * w;
        if keep == 0 || keep > per {
            return mismatch(format!("cannot keep {keep} of {per} values per item"));
        }
        let src = self.value(x).data();
        let mut y = Vec::with_capacity(m * keep);
        for i in 0..m {
            y.extend_from_slice(&src[i * per..i * per + keep]);
        }
        let rg = self.rg(x);
        let y = Tensor::from_vec([m, keep, 1, 1], y)?;
        Ok(self.push(y, Op::FlattenTruncate { x }, rg))
    }

    /// Inverse of [`Graph::flatten_truncate`] per group: `[B, G, K, 1]` becomes
    /// `[B, G * channels_per_group, h, w]`, zero-padding past `K`.
    pub fn unflatten_pad(&mut self, x: Var, channels_per_group: usize, h: usize, w: usize) -> Result<Var> {
        let [b, g, k, one] = self.shape(x);
        let per = channels_per_group * h * w;
        if one != 1 || k > per {
            return mismatch(format!("cannot unflatten {:?} into {channels_per_group}x{h}x{w}", self.shape(x)));
        }
        let src = self.value(x).data();
        let mut y = vec![T::zero(); b * g * per];
        for bi in 0..b {
            for gi in 0..g {
                let dst = (bi * g + gi) * per;
                let s = (bi * g + gi) * k;
                y[dst..dst + k].copy_from_slice(&src[s..s + k]);
            }
        }
        let rg = self.rg(x);
        let y = Tensor::from_vec([b, g * channels_per_group, h, w], y)?;
        Ok(self.push(y, Op::UnflattenPad { x, channels_per_group }, rg))
    }

    /// Scales symbols `[B, N, K, 1]` to unit average power per channel use.
    pub fn power_normalize(&mut self, x: Var, mode: PowerMode) -> Result<Var> {
        let [b, n, k, one] = self.shape(x);
        if one != 1 {
            return mismatch(format!("symbols must be [B, N, K, 1], got {:?}", self.shape(x)));
        }
        let src = self.value(x).data();
        let mut y = vec![T::zero(); src.len()];
        let mut inv_rms = Vec::new();
        let scale_rows = |rows: std::ops::Range<usize>, power: f64, y: &mut [T]| {
            let r = T::from_f64(1.0 / (power + POWER_EPS).sqrt());
            for i in rows {
                y[i] = src[i] * r;
            }
            r
        };
        match mode {
            PowerMode::PerTransmitter => {
                for row in 0..b * n {
                    let s = &src[row * k..(row + 1) * k];
                    let p = s.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / k as f64;
                    inv_rms.push(scale_rows(row * k..(row + 1) * k, p, &mut y));
                }
            }
            PowerMode::Concatenated => {
                let len = n * k;
                for bi in 0..b {
                    let s = &src[bi * len..(bi + 1) * len];
                    let p = s.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / len as f64;
                    inv_rms.push(scale_rows(bi * len..(bi + 1) * len, p, &mut y));
                }
            }
            PowerMode::Superposed => {
                let len = n * k;
                for bi in 0..b {
                    let p = superposed_power(&src[bi * len..(bi + 1) * len], n, k);
                    inv_rms.push(scale_rows(bi * len..(bi + 1) * len, p, &mut y));
                }
            }
        }
        let rg = self.rg(x);
        let y = Tensor::from_vec([b, n, k, 1], y)?;
        Ok(self.push(y, Op::PowerNorm { x, mode, inv_rms }, rg))
    }

    /// `[B, N, K, 1] -> [B, 1, K, 1]` by summing the transmitter axis.
    pub fn sum_transmitters(&mut self, x: Var) -> Result<Var> {
        let [b, n, k, one] = self.shape(x);
        if one != 1 {
            return mismatch(format!("symbols must be [B, N, K, 1], got {:?}", self.shape(x)));
        }
        let src = self.value(x).data();
        let mut y = vec![T::zero(); b * k];
        for bi in 0..b {
            for ni in 0..n {
                for ki in 0..k {
                    y[bi * k + ki] += src[(bi * n + ni) * k + ki];
                }
            }
        }
        let rg = self.rg(x);
        let y = Tensor::from_vec([b, 1, k, 1], y)?;
        Ok(self.push(y, Op::SumTransmitters { x }, rg))
    }

    /// `out[b, c] = g[c] * s[b, 0]` for a single-channel `s`.
    pub fn broadcast_scale(&mut self, s: Var, g: ParamId) -> Result<Var> {
        let gv = self.param(g);
        let [b, one, h, w] = self.shape(s);
        if one != 1 {
            return mismatch(format!("broadcast_scale needs one channel, got {one}"));
        }
        let gains = self.value(gv).data().to_vec();
        let c = gains.len();
        let hw = h * w;
        let src = self.value(s).data();
        let mut y = Vec::with_capacity(b * c * hw);
        for bi in 0..b {
            for &gc in &gains {
                y.extend(src[bi * hw..(bi + 1) * hw].iter().map(|&v| v * gc));
            }
        }
        let rg = self.rg(s) || self.rg(gv);
        let y = Tensor::from_vec([b, c, h, w], y)?;
        Ok(self.push(y, Op::BroadcastScale { s, g: gv }, rg))
    }

    /// Batch mean of the negative log-likelihood of `target` under independent
    /// Gaussians with means `pred` and common variance `sigma2`.
    pub fn gaussian_nll(&mut self, pred: Var, target: Var, sigma2: f64) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return mismatch(format!("nll {:?} vs {:?}", self.shape(pred), self.shape(target)));
        }
        let loss = gaussian_nll_value(self.value(pred), self.value(target), sigma2);
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(T::from_f64(loss)), Op::GaussianNll { pred, target, sigma2 }, rg))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return mismatch(format!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut out = Gradients::new(self.params.len());
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut send = |v: Var, g: Tensor<T>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.accumulate(*id, dy),
                Op::Conv2d { x, w, stride, pad, cache } => {
                    let (dx, dw) = conv::conv2d_backward(&dy, self.value(*w), cache, *stride, *pad);
                    send(*x, dx);
                    send(*w, dw);
                }
                Op::ConvT2d { x, w, stride, pad, cache } => {
                    let (dx, dw) = conv::conv_transpose2d_backward(&dy, self.value(*w), cache, *stride, *pad);
                    send(*x, dx);
                    send(*w, dw);
                }
                Op::ChannelBias { x, b } => {
                    let [n, c, h, w] = dy.shape();
                    let hw = h * w;
                    let mut db = vec![T::zero(); c];
                    for bi in 0..n {
                        for (ci, acc) in db.iter_mut().enumerate() {
                            *acc += dy.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].iter().copied().sum::<T>();
                        }
                    }
                    let bshape = self.shape(*b);
                    send(*b, Tensor::from_vec(bshape, db)?);
                    send(*x, dy);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let [n, c, h, w] = dy.shape();
                    let hw = h * w;
                    let m = (n * hw) as f64;
                    let g = self.value(*gamma).data();
                    let dyd = dy.data();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for bi in 0..n {
                        for ci in 0..c {
                            for i in (bi * c + ci) * hw..(bi * c + ci + 1) * hw {
                                dgamma[ci] += dyd[i] * xhat[i];
                                dbeta[ci] += dyd[i];
                            }
                        }
                    }
                    let mut dx = vec![T::zero(); dyd.len()];
                    for bi in 0..n {
                        for ci in 0..c {
                            let range = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                            if *train {
                                // dxhat = dy * gamma; sums over the channel are dbeta*gamma and dgamma*gamma
                                let mean_dxhat = T::from_f64(dbeta[ci].as_f64() * g[ci].as_f64() / m);
                                let mean_dxhat_xhat = T::from_f64(dgamma[ci].as_f64() * g[ci].as_f64() / m);
                                for i in range {
                                    dx[i] = inv_std[ci] * (dyd[i] * g[ci] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                                }
                            } else {
                                for i in range {
                                    dx[i] = dyd[i] * g[ci] * inv_std[ci];
                                }
                            }
                        }
                    }
                    let pshape = self.shape(*gamma);
                    send(*gamma, Tensor::from_vec(pshape, dgamma)?);
                    send(*beta, Tensor::from_vec(pshape, dbeta)?);
                    send(*x, Tensor::from_vec(dy.shape(), dx)?);
                }
                Op::PRelu { x, a } => {
                    let [n, c, h, w] = dy.shape();
                    let hw = h * w;
                    let xs = self.value(*x).data();
                    let slopes = self.value(*a).data();
                    let mut da = vec![T::zero(); c];
                    let mut dx = dy.clone();
                    for bi in 0..n {
                        for ci in 0..c {
                            for i in (bi * c + ci) * hw..(bi * c + ci + 1) * hw {
                                if xs[i] < T::zero() {
                                    da[ci] += dy.data()[i] * xs[i];
                                    dx.data_mut()[i] *= slopes[ci];
                                }
                            }
                        }
                    }
                    let ashape = self.shape(*a);
                    send(*a, Tensor::from_vec(ashape, da)?);
                    send(*x, dx);
                }
                Op::Affine { x, scale } => {
                    let s = *scale;
                    send(*x, dy.map(|v| v * s));
                }
                Op::Add { a, b } => {
                    send(*a, dy.clone());
                    send(*b, dy);
                }
                Op::Concat { parts } => {
                    let [n, c_total, h, w] = dy.shape();
                    let hw = h * w;
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.shape(p)[1];
                        let mut part = Vec::with_capacity(n * c * hw);
                        for bi in 0..n {
                            let start = (bi * c_total + offset) * hw;
                            part.extend_from_slice(&dy.data()[start..start + c * hw]);
                        }
                        offset += c;
                        send(p, Tensor::from_vec([n, c, h, w], part)?);
                    }
                }
                Op::Reshape { x } => {
                    let s = self.shape(*x);
                    send(*x, dy.reshape(s)?);
                }
                Op::FlattenTruncate { x } => {
                    let shape = self.shape(*x);
                    let [m, keep, _, _] = dy.shape();
                    let per = shape[1] * shape[2] * shape[3];
                    let mut dx = Tensor::zeros(shape);
                    for i in 0..m {
                        dx.data_mut()[i * per..i * per + keep].copy_from_slice(&dy.data()[i * keep..(i + 1) * keep]);
                    }
                    send(*x, dx);
                }
                Op::UnflattenPad { x, channels_per_group } => {
                    let shape = self.shape(*x);
                    let [b, g, k, _] = shape;
                    let [_, _, h, w] = dy.shape();
                    let per = channels_per_group * h * w;
                    let mut dx = Vec::with_capacity(b * g * k);
                    for row in 0..b * g {
                        dx.extend_from_slice(&dy.data()[row * per..row * per + k]);
                    }
                    send(*x, Tensor::from_vec(shape, dx)?);
                }
                Op::PowerNorm { x, mode, inv_rms } => {
                    let shape = self.shape(*x);
                    let [b, n, k, _] = shape;
                    let xs = self.value(*x).data();
                    let dyd = dy.data();
                    let mut dx = vec![T::zero(); xs.len()];
                    let group = |range: std::ops::Range<usize>, r: T, dx: &mut [T], dp: &dyn Fn(usize) -> f64| {
                        let r64 = r.as_f64();
                        let proj: f64 = range.clone().map(|i| dyd[i].as_f64() * xs[i].as_f64()).sum();
                        let coef = -0.5 * r64 * r64 * r64 * proj;
                        for i in range {
                            dx[i] = T::from_f64(r64 * dyd[i].as_f64() + coef * dp(i));
                        }
                    };
                    match mode {
                        PowerMode::PerTransmitter => {
                            for row in 0..b * n {
                                group(row * k..(row + 1) * k, inv_rms[row], &mut dx, &|i| 2.0 * xs[i].as_f64() / k as f64);
                            }
                        }
                        PowerMode::Concatenated => {
                            let len = n * k;
                            for bi in 0..b {
                                group(bi * len..(bi + 1) * len, inv_rms[bi], &mut dx, &|i| {
                                    2.0 * xs[i].as_f64() / len as f64
                                });
                            }
                        }
                        PowerMode::Superposed => {
                            let len = n * k;
                            for bi in 0..b {
                                let base = bi * len;
                                let sums: Vec<f64> = (0..k)
                                    .map(|ki| (0..n).map(|ni| xs[base + ni * k + ki].as_f64()).sum())
                                    .collect();
                                group(base..base + len, inv_rms[bi], &mut dx, &|i| {
                                    2.0 * sums[(i - base) % k] / k as f64
                                });
                            }
                        }
                    }
                    send(*x, Tensor::from_vec(shape, dx)?);
                }
                Op::SumTransmitters { x } => {
                    let shape = self.shape(*x);
                    let [b, n, k, _] = shape;
                    let mut dx = Vec::with_capacity(b * n * k);
                    for bi in 0..b {
                        for _ in 0..n {
                            dx.extend_from_slice(&dy.data()[bi * k..(bi + 1) * k]);
                        }
                    }
                    send(*x, Tensor::from_vec(shape, dx)?);
                }
                Op::BroadcastScale { s, g } => {
                    let [b, c, h, w] = dy.shape();
                    let hw = h * w;
                    let sv = self.value(*s).data();
                    let gains = self.value(*g).data();
                    let mut ds = vec![T::zero(); b * hw];
                    let mut dg = vec![T::zero(); c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let d = &dy.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                            for p in 0..hw {
                                ds[bi * hw + p] += d[p] * gains[ci];
                                dg[ci] += d[p] * sv[bi * hw + p];
                            }
                        }
                    }
                    let (gshape, sshape) = (self.shape(*g), self.shape(*s));
                    send(*g, Tensor::from_vec(gshape, dg)?);
                    send(*s, Tensor::from_vec(sshape, ds)?);
                }
                Op::GaussianNll { pred, target, sigma2 } => {
                    let upstream = dy.data()[0].as_f64();
                    let b = self.shape(*pred)[0] as f64;
                    let coef = upstream / (sigma2 * b);
                    let p = self.value(*pred);
                    let t = self.value(*target);
                    let mut dp = p.clone();
                    for (d, &tv) in dp.data_mut().iter_mut().zip(t.data()) {
                        *d = T::from_f64((d.as_f64() - tv.as_f64()) * coef);
                    }
                    let dt = dp.map(|v| -v);
                    send(*pred, dp);
                    send(*target, dt);
                }
            }
        }
        Ok(out)
    }
}

fn superposed_power<T: Real>(rows: &[T], n: usize, k: usize) -> f64 {
    (0..k)
        .map(|ki| (0..n).map(|ni| rows[ni * k + ki].as_f64()).sum::<f64>().powi(2))
        .sum::<f64>()
        / k as f64
}

/// Batch-mean Gaussian negative log-likelihood, `sum (t - p)^2 / (2 s2) + n ln sqrt(2 pi s2)` per item.
pub(crate) fn gaussian_nll_value<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, sigma2: f64) -> f64 {
    let b = pred.shape()[0];
    let per_item = pred.len() / b;
    let sq: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (t.as_f64() - p.as_f64()).powi(2)).sum();
    let constant = per_item as f64 * (2.0 * std::f64::consts::PI * sigma2).sqrt().ln();
    sq / (2.0 * sigma2 * b as f64) + constant
}
