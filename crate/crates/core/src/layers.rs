//! Differentiable primitives: 1-D convolution (symmetric or causal padding),
//! batch norm, max-pool, dropout, GELU, ReLU, sigmoid, layer norm, linear,
//! softmax, and a sequential container.
//!
//! Feature maps are laid out `N x C x L` (batch, channels, time).

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autograd::{missing_cache, scoped, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn dims3(x: &Tensor, kind: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c, l] => Ok((n, c, l)),
        _ => Err(Error::Dimension(format!("{kind} expects N x C x L input, got {:?}", x.shape()))),
    }
}

fn check_upstream(kind: &str, upstream: &Tensor, expected: &[usize]) -> Result<()> {
    if upstream.shape() != expected {
        return Err(Error::Dimension(format!(
            "{kind}: upstream gradient {:?} does not match output {expected:?}",
            upstream.shape()
        )));
    }
    Ok(())
}

/// Dot product with four independent partial sums (fixed order, so deterministic).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

// ---------------------------------------------------------------------------
// Identity

#[derive(Debug, Default, Clone)]
pub struct Identity;

impl Layer for Identity {
    fn kind(&self) -> &'static str {
        "identity"
    }

    fn forward(&mut self, x: &Tensor, _rng: &mut Rng) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        Ok(upstream.clone())
    }
}

// ---------------------------------------------------------------------------
// Conv1d

/// Geometry of a 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub left_pad: usize,
    pub right_pad: usize,
    pub causal: bool,
}

impl Conv1dSpec {
    /// Symmetric zero padding on both sides.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            left_pad: pad,
            right_pad: pad,
            causal: false,
        }
    }

    /// Stride 1, `kernel - 1` zeros on the left only: output `t` sees inputs `<= t`.
    pub fn causal(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            left_pad: kernel.saturating_sub(1),
            right_pad: 0,
            causal: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config(format!("conv1d: zero-sized dimension in {self:?}")));
        }
        if self.causal && (self.left_pad != self.kernel - 1 || self.right_pad != 0 || self.stride != 1) {
            return Err(Error::Config(format!(
                "conv1d: causal spec requires left_pad = K - 1, right_pad = 0, stride = 1; got {self:?}"
            )));
        }
        Ok(())
    }

    /// `floor((L + left + right - K) / stride) + 1`.
    pub fn output_len(&self, len: usize) -> Result<usize> {
        let padded = len + self.left_pad + self.right_pad;
        if padded < self.kernel {
            return Err(Error::Dimension(format!(
                "conv1d: padded length {padded} shorter than kernel {}",
                self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

/// 1-D cross-correlation with bias. Weight shape `C_out x C_in x K`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    spec: Conv1dSpec,
    pub weight: Param,
    pub bias: Param,
    cache: Option<(Tensor, usize)>,
}

impl Conv1d {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation for weight and bias.
    pub fn new(spec: Conv1dSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let bound = 1.0 / libm::sqrt((spec.in_channels * spec.kernel) as f64);
        let weight = uniform_tensor(&[spec.out_channels, spec.in_channels, spec.kernel], bound, rng);
        let bias = uniform_tensor(&[spec.out_channels], bound, rng);
        Self::with_params(spec, weight, bias)
    }

    pub fn with_params(spec: Conv1dSpec, weight: Tensor, bias: Tensor) -> Result<Self> {
        spec.validate()?;
        let wshape = [spec.out_channels, spec.in_channels, spec.kernel];
        if weight.shape() != wshape || bias.shape() != [spec.out_channels] {
            return Err(Error::Config(format!(
                "conv1d: weight {:?} / bias {:?} do not match {:?}",
                weight.shape(),
                bias.shape(),
                spec
            )));
        }
        Ok(Self {
            spec,
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        })
    }

    pub fn spec(&self) -> &Conv1dSpec {
        &self.spec
    }

    fn pad(&self, x: &Tensor) -> Result<(Tensor, usize, usize)> {
        let (n, c, l) = dims3(x, "conv1d")?;
        if c != self.spec.in_channels {
            return Err(Error::Dimension(format!(
                "conv1d: expected {} input channels, got shape {:?}",
                self.spec.in_channels,
                x.shape()
            )));
        }
        let lout = self.spec.output_len(l)?;
        let lp = l + self.spec.left_pad + self.spec.right_pad;
        let mut padded = vec![0.0; n * c * lp];
        for (dst, src) in padded.chunks_mut(lp).zip(x.data().chunks(l)) {
            dst[self.spec.left_pad..self.spec.left_pad + l].copy_from_slice(src);
        }
        Ok((Tensor::new(vec![n, c, lp], padded)?, l, lout))
    }
}

impl Layer for Conv1d {
    fn kind(&self) -> &'static str {
        if self.spec.causal {
            "causal_conv1d"
        } else {
            "conv1d"
        }
    }

    fn forward(&mut self, x: &Tensor, _rng: &mut Rng) -> Result<Tensor> {
        let (padded, l, lout) = self.pad(x)?;
        let (n, ci, lp) = (padded.dim(0), padded.dim(1), padded.dim(2));
        let (co, k, s) = (self.spec.out_channels, self.spec.kernel, self.spec.stride);
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        let xp = padded.data();
        let mut out = vec![0.0; n * co * lout];
        for bn in 0..n {
            for o in 0..co {
                let row = &mut out[(bn * co + o) * lout..(bn * co + o + 1) * lout];
                row.fill(b[o]);
                for c in 0..ci {
                    let w_row = &w[(o * ci + c) * k..(o * ci + c + 1) * k];
                    let x_row = &xp[(bn * ci + c) * lp..(bn * ci + c + 1) * lp];
                    if s == 1 {
                        for (kk, &wv) in w_row.iter().enumerate() {
                            axpy(row, wv, &x_row[kk..kk + lout]);
                        }
                    } else {
                        for (t, r) in row.iter_mut().enumerate() {
                            *r += dot(w_row, &x_row[t * s..t * s + k]);
                        }
                    }
                }
            }
        }
        self.cache = Some((padded, l));
        Tensor::new(vec![n, co, lout], out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (padded, l) = self.cache.take().ok_or_else(|| missing_cache(self.kind()))?;
        let (n, ci, lp) = (padded.dim(0), padded.dim(1), padded.dim(2));
        let (co, k, s) = (self.spec.out_channels, self.spec.kernel, self.spec.stride);
        let lout = (lp - k) / s + 1;
        check_upstream(self.kind(), upstream, &[n, co, lout])?;
        let g = upstream.data();
        let xp = padded.data();
        let w = self.weight.value.data();
        let dw = self.weight.grad.data_mut();
        let mut dpad = vec![0.0; n * ci * lp];
        for bn in 0..n {
            for o in 0..co {
                let g_row = &g[(bn * co + o) * lout..(bn * co + o + 1) * lout];
                self.bias.grad.data_mut()[o] += g_row.iter().sum::<f64>();
                for c in 0..ci {
                    let wi = (o * ci + c) * k;
                    let w_row = &w[wi..wi + k];
                    let dw_row = &mut dw[wi..wi + k];
                    let xi = (bn * ci + c) * lp;
                    let x_row = &xp[xi..xi + lp];
                    let dx_row = &mut dpad[xi..xi + lp];
                    if s == 1 {
                        for kk in 0..k {
                            dw_row[kk] += dot(g_row, &x_row[kk..kk + lout]);
                            axpy(&mut dx_row[kk..kk + lout], w_row[kk], g_row);
                        }
                    } else {
                        for (t, &gv) in g_row.iter().enumerate() {
                            axpy(dw_row, gv, &x_row[t * s..t * s + k]);
                            axpy(&mut dx_row[t * s..t * s + k], gv, w_row);
                        }
                    }
                }
            }
        }
        let left = self.spec.left_pad;
        let mut dx = Vec::with_capacity(n * ci * l);
        for row in dpad.chunks(lp) {
            dx.extend_from_slice(&row[left..left + l]);
        }
        Tensor::new(vec![n, ci, l], dx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// MaxPool1d

/// Windowed maximum per channel; the gradient goes to the first maximal position.
#[derive(Debug, Clone)]
pub struct MaxPool1d {
    pub kernel: usize,
    pub stride: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool1d {
    pub fn new(kernel: usize, stride: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Config(format!("maxpool1d: kernel {kernel} / stride {stride} must be positive")));
        }
        Ok(Self {
            kernel,
            stride,
            cache: None,
        })
    }

    pub fn output_len(&self, len: usize) -> Result<usize> {
        if len < self.kernel {
            return Err(Error::Dimension(format!(
                "maxpool1d: input length {len} shorter than window {}",
                self.kernel
            )));
        }
        Ok((len - self.kernel) / self.stride + 1)
    }
}

impl Layer for MaxPool1d {
    fn kind(&self) -> &'static str {
        "maxpool1d"
    }

    fn forward(&mut self, x: &Tensor, _rng: &mut Rng) -> Result<Tensor> {
        let (n, c, l) = dims3(x, "maxpool1d")?;
        let lout = self.output_len(l)?;
        let mut out = Vec::with_capacity(n * c * lout);
        let mut arg = Vec::with_capacity(n * c * lout);
        for (r, row) in x.data().chunks(l).enumerate() {
            for t in 0..lout {
                let start = t * self.stride;
                let mut best = start;
                for j in start + 1..start + self.kernel {
                    // NaN wins so a corrupt input stays visible downstream
                    if row[j] > row[best] || (row[j].is_nan() && !row[best].is_nan()) {
                        best = j;
                    }
                }
                out.push(row[best]);
                arg.push(r * l + best);
            }
        }
        self.cache = Some((x.shape().to_vec(), arg));
        Tensor::new(vec![n, c, lout], out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (shape, arg) = self.cache.take().ok_or_else(|| missing_cache(self.kind()))?;
        if upstream.len() != arg.len() {
            return Err(Error::Dimension(format!(
                "maxpool1d: upstream gradient {:?} does not match cached output",
                upstream.shape()
            )));
        }
        let mut dx = Tensor::zeros(&shape);
        let d = dx.data_mut();
        for (&i, &g) in arg.iter().zip(upstream.data()) {
            d[i] += g;
        }
        Ok(dx)
    }

    fn active_branches(&self, out: &mut Vec<u64>) {
        if let Some((_, arg)) = &self.cache {
            out.extend(arg.iter().map(|&i| i as u64));
        }
    }
}

// ---------------------------------------------------------------------------
// BatchNorm1d

/// Per-channel batch normalisation over `N x L`, biased batch variance,
/// running statistics (unbiased variance) for eval mode.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
    mode: Mode,
    cache: Option<(Tensor, Vec<f64>, Mode)>,
}

impl BatchNorm1d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: BATCH_NORM_EPS,
            momentum: BATCH_NORM_MOMENTUM,
            mode: Mode::Train,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

impl Layer for BatchNorm1d {
    fn kind(&self) -> &'static str {
        "batchnorm1d"
    }

    fn forward(&mut self, x: &Tensor, _rng: &mut Rng) -> Result<Tensor> {
        let (n, c, l) = dims3(x, "batchnorm1d")?;
        if c != self.channels() {
            return Err(Error::Dimension(format!(
                "batchnorm1d: expected {} channels, got shape {:?}",
                self.channels(),
                x.shape()
            )));
        }
        let m = n * l;
        if self.mode == Mode::Train && m < 2 {
            return Err(Error::Domain("batchnorm1d: train mode needs at least two values per channel".into()));
        }
        let xd = x.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; xd.len()];
        for ch in 0..c {
            let rows = (0..n).map(|b| (b * c + ch) * l);
            let (mean, var_b) = match self.mode {
                Mode::Train => {
                    // shifted by the first value so a constant channel has an exact mean
                    let pivot = xd[ch * l];
                    let mean = pivot
                        + rows.clone().map(|i| xd[i..i + l].iter().map(|v| v - pivot).sum::<f64>()).sum::<f64>() / m as f64;
                    let var = rows
                        .clone()
                        .map(|i| xd[i..i + l].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                        .sum::<f64>()
                        / m as f64;
                    let unbiased = var * m as f64 / (m - 1) as f64;
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = (1.0 - self.momentum) * *rm + self.momentum * mean;
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = (1.0 - self.momentum) * *rv + self.momentum * unbiased;
                    (mean, var)
                }
                Mode::Eval => (self.running_mean.data()[ch], self.running_var.data()[ch]),
            };
            let inv = 1.0 / libm::sqrt(var_b + self.eps);
            inv_std[ch] = inv;
            let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            for i in rows {
                for j in i..i + l {
                    let h = (xd[j] - mean) * inv;
                    xhat[j] = h;
                    out[j] = g * h + b;
                }
            }
        }
        self.cache = Some((Tensor::new(x.shape().to_vec(), xhat)?, inv_std, self.mode));
        Tensor::new(x.shape().to_vec(), out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (xhat, inv_std, mode) = self.cache.take().ok_or_else(|| missing_cache(self.kind()))?;
        check_upstream(self.kind(), upstream, xhat.shape())?;
        let (n, c, l) = (xhat.dim(0), xhat.dim(1), xhat.dim(2));
        let m = (n * l) as f64;
        let (g, h) = (upstream.data(), xhat.data());
        let mut dx = vec![0.0; g.len()];
        for ch in 0..c {
            let rows: Vec<usize> = (0..n).map(|b| (b * c + ch) * l).collect();
            let mut sum_g = 0.0;
            let mut sum_gh = 0.0;
            for &i in &rows {
                for j in i..i + l {
                    sum_g += g[j];
                    sum_gh += g[j] * h[j];
                }
            }
            self.beta.grad.data_mut()[ch] += sum_g;
            self.gamma.grad.data_mut()[ch] += sum_gh;
            let gamma = self.gamma.value.data()[ch];
            let inv = inv_std[ch];
            for &i in &rows {
                for j in i..i + l {
                    dx[j] = match mode {
                        Mode::Train => gamma * inv / m * (m * g[j] - sum_g - h[j] * sum_gh),
                        Mode::Eval => gamma * inv * g[j],
                    };
                }
            }
        }
        Tensor::new(xhat.shape().to_vec(), dx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("running_mean", &mut self.running_mean);
        f("running_var", &mut self.running_var);
    }

    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }
}

// ---------------------------------------------------------------------------
// Dropout

/// Inverted dropout: kept units are scaled by `1 / (1 - p)`; identity in eval mode.
#[derive(Debug, Clone)]
pub struct Dropout {
    p: f64,
    mode: Mode,
    cache: Option<Option<Vec<f64>>>,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain(format!("dropout probability {p} outside [0, 1)")));
        }
        Ok(Self {
            p,
            mode: Mode::Train,
            cache: None,
        })
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

impl Layer for Dropout {
    fn kind(&self) -> &'static str {
        "dropout"
    }

    fn forward(&mut self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        if self.mode == Mode::Eval || self.p == 0.0 {
            self.cache = Some(None);
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - self.p);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < self.p { 0.0 } else { keep })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.cache = Some(Some(mask));
        Tensor::new(x.shape().to_vec(), out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        match self.cache.take().ok_or_else(|| missing_cache(self.kind()))? {
            None => Ok(upstream.clone()),
            Some(mask) => {
                if mask.len() != upstream.len() {
                    return Err(Error::Dimension("dropout: upstream gradient size mismatch".into()));
                }
                let d = upstream.data().iter().zip(&mask).map(|(g, m)| g * m).collect();
                Tensor::new(upstream.shape().to_vec(), d)
            }
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }
}

// ---------------------------------------------------------------------------
// Pointwise activations

/// Standard normal CDF via `erf`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI)
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| v * normal_cdf(v))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 })
}

/// Logistic sigmoid clamped to the open interval (0, 1).
pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

fn sigmoid_scalar(v: f64) -> f64 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

macro_rules! activation {
    ($name:ident, $kind:literal, $fwd:expr, $grad:expr, $piecewise:expr) => {
        #[derive(Debug, Default, Clone)]
        pub struct $name {
            cache: Option<(Tensor, Tensor)>,
        }

        impl $name {
            pub fn new() -> Self {
                Self::default()
            }
        }

        impl Layer for $name {
            fn kind(&self) -> &'static str {
                $kind
            }

            fn forward(&mut self, x: &Tensor, _rng: &mut Rng) -> Result<Tensor> {
                let y: Tensor = $fwd(x);
                self.cache = Some((x.clone(), y.clone()));
                Ok(y)
            }

            fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
                let (x, y) = self.cache.take().ok_or_else(|| missing_cache($kind))?;
                check_upstream($kind, upstream, x.shape())?;
                let grad: fn(f64, f64) -> f64 = $grad;
                let d = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(upstream.data())
                    .map(|((&xv, &yv), &g)| g * grad(xv, yv))
                    .collect();
                Tensor::new(x.shape().to_vec(), d)
            }

            fn active_branches(&self, out: &mut Vec<u64>) {
                if $piecewise {
                    if let Some((x, _)) = &self.cache {
                        for chunk in x.data().chunks(64) {
                            out.push(chunk.iter().enumerate().fold(0u64, |m, (i, &v)| m | ((v > 0.0) as u64) << i));
                        }
                    }
                }
            }
        }
    };
}

activation!(Gelu, "gelu", gelu, |x, _| normal_cdf(x) + x * normal_pdf(x), false);
activation!(Relu, "relu", relu, |x, _| if x > 0.0 { 1.0 } else { 0.0 }, true);
activation!(Sigmoid, "sigmoid", sigmoid, |_, y| y * (1.0 - y), false);

// ---------------------------------------------------------------------------
// Softmax

/// Softmax over the last axis, stabilised by subtracting the row maximum.
pub fn softmax(x: &Tensor) -> Tensor {
    let k = x.shape().last().copied().unwrap_or(1).max(1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(k) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `dx = y * (g - sum(g * y))` row-wise.
pub(crate) fn softmax_backward_in_place(y: &[f64], g: &[f64], dx: &mut [f64]) {
    let s: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
        *d = yv * (gv - s);
    }
}

#[derive(Debug, Default, Clone)]
pub struct Softmax {
    cache: Option<Tensor>,
}

impl Softmax {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Softmax {
    fn kind(&self) -> &'static str {
        "softmax"
    }

    fn forward(&mut self, x: &Tensor, _rng: &mut Rng) -> Result<Tensor> {
        let y = softmax(x);
        self.cache = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let y = self.cache.take().ok_or_else(|| missing_cache("softmax"))?;
        check_upstream("softmax", upstream, y.shape())?;
        let k = y.shape().last().copied().unwrap_or(1).max(1);
        let mut dx = Tensor::zeros(y.shape());
        for ((yr, gr), dr) in y.data().chunks(k).zip(upstream.data().chunks(k)).zip(dx.data_mut().chunks_mut(k)) {
            softmax_backward_in_place(yr, gr, dr);
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// LayerNorm

/// Normalisation over the last axis with per-position gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
    pub eps: f64,
    cache: Option<(Tensor, Vec<f64>)>,
}

impl LayerNorm {
    pub fn new(len: usize) -> Result<Self> {
        if len < 2 {
            return Err(Error::Domain(format!("layernorm over {len} element(s); need at least 2")));
        }
        Ok(Self {
            gain: Param::new(Tensor::full(&[len], 1.0)),
            bias: Param::new(Tensor::zeros(&[len])),
            eps: LAYER_NORM_EPS,
            cache: None,
        })
    }

    fn len(&self) -> usize {
        self.gain.value.len()
    }
}

impl Layer for LayerNorm {
    fn kind(&self) -> &'static str {
        "layernorm"
    }

    fn forward(&mut self, x: &Tensor, _rng: &mut Rng) -> Result<Tensor> {
        let l = self.len();
        if x.shape().last() != Some(&l) {
            return Err(Error::Dimension(format!("layernorm over {l}: got shape {:?}", x.shape())));
        }
        let (gain, bias) = (self.gain.value.data(), self.bias.value.data());
        let mut xhat = x.clone();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.len() / l);
        for (h, o) in xhat.data_mut().chunks_mut(l).zip(out.data_mut().chunks_mut(l)) {
            let pivot = h[0];
            let mean = pivot + h.iter().map(|v| v - pivot).sum::<f64>() / l as f64;
            let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / l as f64;
            let inv = 1.0 / libm::sqrt(var + self.eps);
            inv_std.push(inv);
            for j in 0..l {
                h[j] = (h[j] - mean) * inv;
                o[j] = gain[j] * h[j] + bias[j];
            }
        }
        self.cache = Some((xhat, inv_std));
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (xhat, inv_std) = self.cache.take().ok_or_else(|| missing_cache("layernorm"))?;
        check_upstream("layernorm", upstream, xhat.shape())?;
        let l = self.len();
        let lf = l as f64;
        let mut dx = Tensor::zeros(xhat.shape());
        let gain = self.gain.value.data().to_vec();
        for (((h, g), d), &inv) in xhat
            .data()
            .chunks(l)
            .zip(upstream.data().chunks(l))
            .zip(dx.data_mut().chunks_mut(l))
            .zip(&inv_std)
        {
            let mut sum_dh = 0.0;
            let mut sum_dh_h = 0.0;
            for j in 0..l {
                self.gain.grad.data_mut()[j] += g[j] * h[j];
                self.bias.grad.data_mut()[j] += g[j];
                let dh = g[j] * gain[j];
                sum_dh += dh;
                sum_dh_h += dh * h[j];
            }
            for j in 0..l {
                let dh = g[j] * gain[j];
                d[j] = inv / lf * (lf * dh - sum_dh - h[j] * sum_dh_h);
            }
        }
        Ok(dx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("gain", &mut self.gain);
        f("bias", &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// Linear

/// `y = x W^T + b` over the last axis. Weight shape `D_out x D_in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::Config(format!("linear {d_in} -> {d_out}: zero width")));
        }
        let bound = 1.0 / libm::sqrt(d_in as f64);
        let w = uniform_tensor(&[d_out, d_in], bound, rng);
        let b = uniform_tensor(&[d_out], bound, rng);
        Self::with_params(w, b)
    }

    pub fn with_params(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.dim(0)] {
            return Err(Error::Config(format!(
                "linear: weight {:?} / bias {:?} inconsistent",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.dim(0)
    }
}

impl Layer for Linear {
    fn kind(&self) -> &'static str {
        "linear"
    }

    fn forward(&mut self, x: &Tensor, _rng: &mut Rng) -> Result<Tensor> {
        let (din, dout) = (self.d_in(), self.d_out());
        if x.shape().last() != Some(&din) {
            return Err(Error::Shape {
                op: "linear",
                left: x.shape().to_vec(),
                right: self.weight.value.shape().to_vec(),
            });
        }
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        let rows = x.len() / din;
        let mut out = Vec::with_capacity(rows * dout);
        for xr in x.data().chunks(din) {
            for o in 0..dout {
                out.push(b[o] + dot(xr, &w[o * din..(o + 1) * din]));
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = dout;
        self.cache = Some(x.clone());
        Tensor::new(shape, out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let x = self.cache.take().ok_or_else(|| missing_cache("linear"))?;
        let (din, dout) = (self.d_in(), self.d_out());
        let mut expected = x.shape().to_vec();
        *expected.last_mut().expect("rank >= 1") = dout;
        check_upstream("linear", upstream, &expected)?;
        let w = self.weight.value.data();
        let dw = self.weight.grad.data_mut();
        let db = self.bias.grad.data_mut();
        let mut dx = Tensor::zeros(x.shape());
        for ((xr, gr), dxr) in x.data().chunks(din).zip(upstream.data().chunks(dout)).zip(dx.data_mut().chunks_mut(din)) {
            for (o, &g) in gr.iter().enumerate() {
                db[o] += g;
                axpy(&mut dw[o * din..(o + 1) * din], g, xr);
                axpy(dxr, g, &w[o * din..(o + 1) * din]);
            }
        }
        Ok(dx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// Sequential

/// Named layers applied in order; backward runs in reverse.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<(String, Box<dyn Layer>)>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Layer + 'static) {
        self.layers.push((name.into(), Box::new(layer)));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Layer for Sequential {
    fn kind(&self) -> &'static str {
        "sequential"
    }

    fn forward(&mut self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let mut h = x.clone();
        for (_, layer) in &mut self.layers {
            h = layer.forward(&h, rng)?;
        }
        Ok(h)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let mut g = upstream.clone();
        for (_, layer) in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (name, layer) in &mut self.layers {
            layer.visit_params(&mut |n, p| f(&scoped(name, n), p));
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (name, layer) in &mut self.layers {
            layer.visit_buffers(&mut |n, t| f(&scoped(name, n), t));
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        for (_, layer) in &mut self.layers {
            layer.set_mode(mode);
        }
    }

    fn active_branches(&self, out: &mut Vec<u64>) {
        for (_, layer) in &self.layers {
            layer.active_branches(out);
        }
    }
}
