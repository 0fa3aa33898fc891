//! Minimal neural-network building blocks on top of candle: seeded parameter
//! stores, equalized-learning-rate layers, modulated convolution and Adam.
//!
//! Parameters are kept in a `BTreeMap` so iteration order, checksums and
//! serialization are deterministic.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LRELU_SLOPE: f64 = 0.2;

/// Leaky ReLU with the usual `sqrt(2)` gain.
pub fn lrelu(x: &Tensor) -> Result<Tensor> {
    let gain = std::f64::consts::SQRT_2;
    let y = ((x * (LRELU_SLOPE * gain))? + (x.relu()? * ((1.0 - LRELU_SLOPE) * gain))?)?;
    Ok(y)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// 64-bit FNV-1a over the raw bits of `values`.
pub fn fnv1a(values: impl IntoIterator<Item = f32>, mut hash: u64) -> u64 {
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// Named parameters of one network. Frozen stores hand out detached tensors
/// and are never touched by an optimizer.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    trainable: bool,
    rng: std::sync::Arc<std::sync::Mutex<ChaCha8Rng>>,
}

impl ParamStore {
    pub fn new(seed: u64, trainable: bool) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            trainable,
            rng: std::sync::Arc::new(std::sync::Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    fn register(&mut self, name: &str, tensor: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        let var = Var::from_tensor(&tensor)?;
        let t = self.handle(&var);
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    fn handle(&self, var: &Var) -> Tensor {
        if self.trainable {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        }
    }

    /// Registers a parameter drawn from `N(0, std²)`.
    pub fn randn(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = {
            let mut rng = self.rng.lock().expect("rng lock");
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    (z * std) as f32
                })
                .collect()
        };
        self.register(name, Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.register(name, Tensor::from_vec(vec![value; n], shape, &Device::Cpu)?)
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.vars.get(name).map(|v| self.handle(v))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Checksum over all parameter values in name order.
    pub fn checksum(&self) -> Result<u64> {
        let mut h = FNV_OFFSET;
        for (name, var) in &self.vars {
            h = fnv1a(name.bytes().map(|b| b as f32), h);
            let values: Vec<f32> = var.as_tensor().flatten_all()?.to_vec1()?;
            h = fnv1a(values, h);
        }
        Ok(h)
    }

    pub fn all_finite(&self) -> Result<bool> {
        for var in self.vars.values() {
            let values: Vec<f32> = var.as_tensor().flatten_all()?.to_vec1()?;
            if values.iter().any(|v| !v.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Overwrites one parameter in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::argument("name", format!("unknown parameter `{name}`")))?;
        if var.shape() != value.shape() {
            return Err(Error::Validation(format!(
                "parameter `{name}` expects shape {:?}, got {:?}",
                var.shape(),
                value.shape()
            )));
        }
        var.set(&value.to_dtype(DType::F32)?)?;
        Ok(())
    }

    /// Copies every parameter into a name-prefixed map.
    pub fn export(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            out.insert(format!("{prefix}{name}"), var.as_tensor().copy()?);
        }
        Ok(())
    }

    /// Loads every parameter from a name-prefixed map; all names must be present.
    pub fn import(&self, prefix: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for name in self.vars.keys() {
            let key = format!("{prefix}{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks tensor `{key}`")))?;
            self.set(name, t)?;
        }
        Ok(())
    }
}

/// Convolution as im2col followed by a batched matmul.
///
/// Same result as `Tensor::conv2d`, but the backward pass runs through gemm
/// instead of the much slower direct transposed-convolution kernel.
pub fn conv2d_gemm(x: &Tensor, w: &Tensor, padding: usize, stride: usize, dilation: usize) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, ci, kh, kw) = w.dims4()?;
    if ci != c {
        return Err(Error::Validation(format!("conv expects {ci} input channels, got {c}")));
    }
    let span_h = dilation * (kh - 1) + 1;
    let span_w = dilation * (kw - 1) + 1;
    if h + 2 * padding < span_h || wd + 2 * padding < span_w {
        return Err(Error::Validation(format!("conv input {h}x{wd} smaller than kernel span")));
    }
    let ho = (h + 2 * padding - span_h) / stride + 1;
    let wo = (wd + 2 * padding - span_w) / stride + 1;
    if kh == 1 && kw == 1 && padding == 0 && stride == 1 {
        let cols = x.reshape((b, c, h * wd))?;
        return Ok(w.reshape((o, c))?.broadcast_matmul(&cols)?.reshape((b, o, ho, wo))?);
    }
    // extra trailing zeros so every tap can take `stride * out` rows and then
    // keep phase 0 of each stride group
    let need_h = (kh - 1) * dilation + stride * ho;
    let need_w = (kw - 1) * dilation + stride * wo;
    let xp = x
        .pad_with_zeros(2, padding, need_h - h - padding)?
        .pad_with_zeros(3, padding, need_w - wd - padding)?;
    let mut taps = Vec::with_capacity(kh * kw);
    for ky in 0..kh {
        for kx in 0..kw {
            let t = xp.narrow(2, ky * dilation, stride * ho)?.narrow(3, kx * dilation, stride * wo)?;
            let t = if stride == 1 {
                t
            } else {
                t.reshape((b, c, ho, stride, wo, stride))?
                    .narrow(3, 0, 1)?
                    .narrow(5, 0, 1)?
                    .reshape((b, c, ho, wo))?
            };
            taps.push(t);
        }
    }
    let cols = Tensor::stack(&taps, 2)?.reshape((b, c * kh * kw, ho * wo))?;
    let y = w.reshape((o, c * kh * kw))?.broadcast_matmul(&cols)?;
    Ok(y.reshape((b, o, ho, wo))?)
}

/// 2-D convolution with equalized learning rate (weights `N(0,1)`, scaled at run time).
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    scale: f64,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        let weight = store.randn(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], 1.0)?;
        let bias = store.constant(&format!("{name}.bias"), &[out_ch], 0.0)?;
        Ok(Conv2d {
            weight,
            bias: Some(bias),
            scale: 1.0 / ((in_ch * kernel * kernel) as f64).sqrt(),
            stride,
            padding: dilation * (kernel / 2),
            dilation,
        })
    }

    pub fn param_count(in_ch: usize, out_ch: usize, kernel: usize) -> usize {
        out_ch * in_ch * kernel * kernel + out_ch
    }

    /// Copy whose weights are cut from the autograd graph (shares storage).
    pub fn detached(&self) -> Self {
        Conv2d {
            weight: self.weight.detach(),
            bias: self.bias.as_ref().map(Tensor::detach),
            ..self.clone()
        }
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = (&self.weight * self.scale)?;
        let y = conv2d_gemm(x, &w, self.padding, self.stride, self.dilation)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Fully connected layer with equalized learning rate.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
    scale: f64,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias_init: f32) -> Result<Self> {
        let weight = store.randn(&format!("{name}.weight"), &[out_dim, in_dim], 1.0)?;
        let bias = store.constant(&format!("{name}.bias"), &[out_dim], bias_init)?;
        Ok(Linear {
            weight,
            bias: Some(bias),
            scale: 1.0 / (in_dim as f64).sqrt(),
        })
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = store.randn(&format!("{name}.weight"), &[out_dim, in_dim], 1.0)?;
        Ok(Linear {
            weight,
            bias: None,
            scale: 1.0 / (in_dim as f64).sqrt(),
        })
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn detached(&self) -> Self {
        Linear {
            weight: self.weight.detach(),
            bias: self.bias.as_ref().map(Tensor::detach),
            scale: self.scale,
        }
    }

    /// `x · Wᵀ` without the bias.
    pub fn forward_no_bias(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&(&self.weight * self.scale)?.t()?)?)
    }

    pub fn add_bias(&self, y: &Tensor) -> Result<Tensor> {
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y.clone()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.add_bias(&self.forward_no_bias(x)?)
    }
}

/// Convolution whose input channels are scaled per sample by an affine
/// projection of a style vector, followed by weight demodulation.
#[derive(Debug, Clone)]
pub struct ModulatedConv {
    affine: Linear,
    weight: Tensor,
    bias: Tensor,
    scale: f64,
    padding: usize,
}

impl ModulatedConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        style_dim: usize,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Result<Self> {
        let affine = Linear::new(store, &format!("{name}.affine"), style_dim, in_ch, 1.0)?;
        let weight = store.randn(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], 1.0)?;
        let bias = store.constant(&format!("{name}.bias"), &[out_ch], 0.0)?;
        Ok(ModulatedConv {
            affine,
            weight,
            bias,
            scale: 1.0 / ((in_ch * kernel * kernel) as f64).sqrt(),
            padding: kernel / 2,
        })
    }

    pub fn param_count(style_dim: usize, in_ch: usize, out_ch: usize, kernel: usize) -> usize {
        Linear::param_count(style_dim, in_ch) + out_ch * in_ch * kernel * kernel + out_ch
    }

    pub fn forward(&self, x: &Tensor, style: &Tensor) -> Result<Tensor> {
        let s = self.affine.forward(style)?; // (N, in)
        let (n, c) = s.dims2()?;
        let xs = x.broadcast_mul(&s.reshape((n, c, 1, 1))?)?;
        let w = (&self.weight * self.scale)?;
        let y = conv2d_gemm(&xs, &w, self.padding, 1, 1)?;
        // demodulation: 1 / sqrt(sum_{i,k} (w_oik s_i)^2)
        let w2 = w.sqr()?.sum((2, 3))?; // (out, in)
        let d = (s.sqr()?.matmul(&w2.t()?)? + 1e-8)?.sqrt()?.recip()?; // (N, out)
        let o = d.dim(1)?;
        let y = y.broadcast_mul(&d.reshape((n, o, 1, 1))?)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, o, 1, 1))?)?)
    }
}

/// Per-group minibatch standard deviation appended as one extra channel.
pub fn minibatch_stddev(x: &Tensor, group_size: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let g = (1..=group_size.min(n)).rev().find(|g| n % g == 0).unwrap_or(1);
    let y = x.reshape((g, n / g, c, h, w))?;
    let mean = y.mean_keepdim(0)?;
    let var = y.broadcast_sub(&mean)?.sqr()?.mean(0)?; // (n/g, c, h, w)
    let std = (var + 1e-8)?.sqrt()?;
    let feat = std.mean_keepdim((1, 2, 3))?; // (n/g, 1, 1, 1)
    // sample i belongs to group slot i % (n/g)
    let feat = feat.reshape((1, n / g, 1, 1, 1))?.broadcast_as((g, n / g, 1, h, w))?.reshape((n, 1, h, w))?;
    Ok(Tensor::cat(&[x, &feat], 1)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam with explicit, serializable moment buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter of `store` that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        if !store.is_trainable() {
            return Err(Error::Config("refusing to optimize a frozen parameter store".into()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = match self.first.get(name) {
                Some(m) => ((m * beta1)? + (g * (1.0 - beta1))?)?,
                None => (g * (1.0 - beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let denom = ((&v / c2)?.sqrt()? + eps)?;
            let update = ((&m / c1)? / denom)?;
            let next = (var.as_tensor() - (update * lr)?)?;
            var.set(&next)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn export(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
        for (k, v) in &self.first {
            out.insert(format!("{prefix}m.{k}"), v.clone());
        }
        for (k, v) in &self.second {
            out.insert(format!("{prefix}v.{k}"), v.clone());
        }
    }

    pub fn import(&mut self, prefix: &str, step: u64, tensors: &BTreeMap<String, Tensor>) {
        self.step = step;
        self.first.clear();
        self.second.clear();
        let m_prefix = format!("{prefix}m.");
        let v_prefix = format!("{prefix}v.");
        for (k, v) in tensors {
            if let Some(name) = k.strip_prefix(&m_prefix) {
                self.first.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix(&v_prefix) {
                self.second.insert(name.to_string(), v.clone());
            }
        }
    }
}

/// Row-major `f32` values of a tensor.
pub fn to_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?)
}

/// Scalar value of a 0-d or single-element tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    let v = to_vec(t)?;
    v.first()
        .map(|&x| x as f64)
        .ok_or_else(|| Error::Numeric("empty tensor where a scalar was expected".into()))
}
