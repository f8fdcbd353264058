//! Minimal layer stack for the encoder/decoder networks: conv2d with
//! same padding, fully connected, batch norm, activations and shape
//! plumbing, each with a hand-written backward pass. Also exact
//! trainable-parameter and FLOP accounting and a finite-difference
//! gradient checker.

use num_traits::{Float, NumAssignOps};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
    #[error("backward called without a cached forward pass")]
    MissingForward,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

/// Scalar type usable by the layer stack. Training runs in `f32`,
/// gradient checks in `f64`.
pub trait Real:
    Float + NumAssignOps + Default + Copy + Send + Sync + std::fmt::Debug + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor with an explicit shape; the leading axis is
/// always the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R> {
    pub shape: Vec<usize>,
    pub data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![R::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<R>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape: shape.to_vec(), data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn map_to<T: Real>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| T::from_f64(Real::to_f64(v))).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Sigmoid,
    LeakyRelu,
}

pub const LEAKY_SLOPE: f64 = 0.3;

/// Declarative layer description used for construction and accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel_size: usize },
    FullyConnected { in_features: usize, out_features: usize },
    BatchNorm { channels: usize },
    Activation { function: Activation },
    Flatten,
    Reshape { channels: usize, height: usize, width: usize },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<(), NetError> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel_size } => {
                if kernel_size % 2 == 0 {
                    return Err(NetError::InvalidSpec("kernel size must be odd".into()));
                }
                if in_channels == 0 || out_channels == 0 {
                    return Err(NetError::InvalidSpec("channel counts must be >= 1".into()));
                }
            }
            LayerSpec::FullyConnected { in_features, out_features } => {
                if in_features == 0 || out_features == 0 {
                    return Err(NetError::InvalidSpec("feature counts must be >= 1".into()));
                }
            }
            LayerSpec::BatchNorm { channels } => {
                if channels == 0 {
                    return Err(NetError::InvalidSpec("channels must be >= 1".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Trainable-parameter count used by the accounting tables:
    /// conv `(C_in K^2 + 1) C_out`, FC `F_out (F_in + 1)`, batch norm a
    /// fixed 64, everything else 0.
    pub fn param_count(&self) -> u64 {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel_size } => {
                (in_channels as u64 * (kernel_size as u64).pow(2) + 1) * out_channels as u64
            }
            LayerSpec::FullyConnected { in_features, out_features } => {
                out_features as u64 * (in_features as u64 + 1)
            }
            LayerSpec::BatchNorm { .. } => 64,
            _ => 0,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel_size } => {
                format!("conv{kernel_size}x{kernel_size} {in_channels}->{out_channels}")
            }
            LayerSpec::FullyConnected { in_features, out_features } => {
                format!("fc {in_features}->{out_features}")
            }
            LayerSpec::BatchNorm { channels } => format!("batch_norm c={channels}"),
            LayerSpec::Activation { function } => format!("activation {function:?}"),
            LayerSpec::Flatten => "flatten".into(),
            LayerSpec::Reshape { channels, height, width } => {
                format!("reshape {channels}x{height}x{width}")
            }
        }
    }
}

/// Encoder/decoder architecture description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
    /// Maximum codeword length produced by the encoder.
    pub m: usize,
    /// Whether the decoder consumes the uplink magnitude as an extra
    /// input channel (concatenated after the reshape layer).
    pub auxiliary_input: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCount {
    pub label: String,
    pub params: u64,
}

/// Per-layer parameter counts plus encoder/decoder/combined totals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub encoder_layers: Vec<LayerCount>,
    pub decoder_layers: Vec<LayerCount>,
    pub encoder_total: u64,
    pub decoder_total: u64,
    pub total: u64,
}

pub fn count_params(config: &NetworkConfig) -> ParamBreakdown {
    let count = |specs: &[LayerSpec]| -> (Vec<LayerCount>, u64) {
        let layers: Vec<LayerCount> =
            specs.iter().map(|s| LayerCount { label: s.label(), params: s.param_count() }).collect();
        let total = layers.iter().map(|l| l.params).sum();
        (layers, total)
    };
    let (encoder_layers, encoder_total) = count(&config.encoder);
    let (decoder_layers, decoder_total) = count(&config.decoder);
    ParamBreakdown {
        encoder_layers,
        decoder_layers,
        encoder_total,
        decoder_total,
        total: encoder_total + decoder_total,
    }
}

/// FLOPs of one fully connected layer: `2 I O`.
pub fn count_fc_flops(input: u64, output: u64) -> u64 {
    2 * input * output
}

/// Total FC FLOPs of the encoder and decoder when only the first
/// `active_len` codeword elements participate. FC layers that produce
/// (or consume) the codeword contribute `2 F_in L` (resp. `2 L F_out`);
/// any other FC layer counts fully.
pub fn fc_flops_at_length(config: &NetworkConfig, active_len: usize) -> (u64, u64) {
    let l = active_len as u64;
    let encoder: u64 = config
        .encoder
        .iter()
        .map(|s| match *s {
            LayerSpec::FullyConnected { in_features, out_features } if out_features == config.m => {
                count_fc_flops(in_features as u64, l)
            }
            LayerSpec::FullyConnected { in_features, out_features } => {
                count_fc_flops(in_features as u64, out_features as u64)
            }
            _ => 0,
        })
        .sum();
    let decoder: u64 = config
        .decoder
        .iter()
        .map(|s| match *s {
            LayerSpec::FullyConnected { in_features, out_features } if in_features == config.m => {
                count_fc_flops(l, out_features as u64)
            }
            LayerSpec::FullyConnected { in_features, out_features } => {
                count_fc_flops(in_features as u64, out_features as u64)
            }
            _ => 0,
        })
        .sum();
    (encoder, decoder)
}

// ---------------------------------------------------------------------------
// Runtime layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d<R> {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub weight: Vec<R>, // (out_c, in_c, k, k)
    pub bias: Vec<R>,
    pub grad_weight: Vec<R>,
    pub grad_bias: Vec<R>,
    cache_input: Option<Tensor<R>>,
}

impl<R: Real> Conv2d<R> {
    fn new(in_c: usize, out_c: usize, k: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let fan_out = (out_c * k * k) as f64;
        let limit = (6.0 / (fan_in + fan_out)).sqrt();
        let weight = (0..out_c * in_c * k * k).map(|_| R::from_f64(rng.gen_range(-limit..limit))).collect();
        Self {
            in_c,
            out_c,
            k,
            weight,
            bias: vec![R::zero(); out_c],
            grad_weight: vec![R::zero(); out_c * in_c * k * k],
            grad_bias: vec![R::zero(); out_c],
            cache_input: None,
        }
    }

    fn forward(&mut self, x: &Tensor<R>, train: bool) -> Result<Tensor<R>, NetError> {
        if x.shape.len() != 4 || x.shape[1] != self.in_c {
            return Err(NetError::Shape {
                expected: vec![0, self.in_c, 0, 0],
                got: x.shape.clone(),
            });
        }
        let (b, _, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let p = self.k / 2;
        let mut out = Tensor::zeros(&[b, self.out_c, h, w]);
        for bi in 0..b {
            for oc in 0..self.out_c {
                let out_base = ((bi * self.out_c) + oc) * h * w;
                for v in &mut out.data[out_base..out_base + h * w] {
                    *v = self.bias[oc];
                }
                for ic in 0..self.in_c {
                    let in_base = ((bi * self.in_c) + ic) * h * w;
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let wv = self.weight[((oc * self.in_c + ic) * self.k + ky) * self.k + kx];
                            if wv == R::zero() {
                                continue;
                            }
                            // Output row y reads input row y + ky - p.
                            let y_lo = p.saturating_sub(ky);
                            let y_hi = (h + p - ky).min(h);
                            let x_lo = p.saturating_sub(kx);
                            let x_hi = (w + p - kx).min(w);
                            for y in y_lo..y_hi {
                                let iy = y + ky - p;
                                let orow = out_base + y * w;
                                let irow = in_base + iy * w + x_lo + kx - p;
                                let (dst, src) = (
                                    &mut out.data[orow + x_lo..orow + x_hi],
                                    &x.data[irow..irow + x_hi - x_lo],
                                );
                                for (o, &i) in dst.iter_mut().zip(src) {
                                    *o += wv * i;
                                }
                            }
                        }
                    }
                }
            }
        }
        if train {
            self.cache_input = Some(x.clone());
        }
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<R>) -> Result<Tensor<R>, NetError> {
        let x = self.cache_input.as_ref().ok_or(NetError::MissingForward)?;
        let (b, _, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let p = self.k / 2;
        let mut grad_in = Tensor::zeros(&x.shape);
        for bi in 0..b {
            for oc in 0..self.out_c {
                let go_base = ((bi * self.out_c) + oc) * h * w;
                let mut gb = R::zero();
                for v in &grad_out.data[go_base..go_base + h * w] {
                    gb += *v;
                }
                self.grad_bias[oc] += gb;
                for ic in 0..self.in_c {
                    let in_base = ((bi * self.in_c) + ic) * h * w;
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let widx = ((oc * self.in_c + ic) * self.k + ky) * self.k + kx;
                            let wv = self.weight[widx];
                            let mut gw = R::zero();
                            let y_lo = p.saturating_sub(ky);
                            let y_hi = (h + p - ky).min(h);
                            let x_lo = p.saturating_sub(kx);
                            let x_hi = (w + p - kx).min(w);
                            for y in y_lo..y_hi {
                                let iy = y + ky - p;
                                let grow = go_base + y * w;
                                let irow = in_base + iy * w + x_lo + kx - p;
                                let len = x_hi - x_lo;
                                let gs = &grad_out.data[grow + x_lo..grow + x_hi];
                                for (&g, &xv) in gs.iter().zip(&x.data[irow..irow + len]) {
                                    gw += g * xv;
                                }
                                for (gi, &g) in
                                    grad_in.data[irow..irow + len].iter_mut().zip(gs)
                                {
                                    *gi += g * wv;
                                }
                            }
                            self.grad_weight[widx] += gw;
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }
}

#[derive(Debug, Clone)]
pub struct Fc<R> {
    pub in_f: usize,
    pub out_f: usize,
    pub weight: Vec<R>, // (out_f, in_f)
    pub bias: Vec<R>,
    pub grad_weight: Vec<R>,
    pub grad_bias: Vec<R>,
    cache_input: Option<Tensor<R>>,
}

impl<R: Real> Fc<R> {
    fn new(in_f: usize, out_f: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_f + out_f) as f64).sqrt();
        let weight = (0..out_f * in_f).map(|_| R::from_f64(rng.gen_range(-limit..limit))).collect();
        Self {
            in_f,
            out_f,
            weight,
            bias: vec![R::zero(); out_f],
            grad_weight: vec![R::zero(); out_f * in_f],
            grad_bias: vec![R::zero(); out_f],
            cache_input: None,
        }
    }

    fn forward(&mut self, x: &Tensor<R>, train: bool) -> Result<Tensor<R>, NetError> {
        if x.shape.len() != 2 || x.shape[1] != self.in_f {
            return Err(NetError::Shape { expected: vec![0, self.in_f], got: x.shape.clone() });
        }
        let b = x.shape[0];
        let mut out = Tensor::zeros(&[b, self.out_f]);
        for bi in 0..b {
            let xin = &x.data[bi * self.in_f..(bi + 1) * self.in_f];
            for o in 0..self.out_f {
                let wrow = &self.weight[o * self.in_f..(o + 1) * self.in_f];
                let mut acc = self.bias[o];
                for (wv, xv) in wrow.iter().zip(xin.iter()) {
                    acc += *wv * *xv;
                }
                out.data[bi * self.out_f + o] = acc;
            }
        }
        if train {
            self.cache_input = Some(x.clone());
        }
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<R>) -> Result<Tensor<R>, NetError> {
        let x = self.cache_input.as_ref().ok_or(NetError::MissingForward)?;
        let b = x.shape[0];
        let mut grad_in = Tensor::zeros(&x.shape);
        for bi in 0..b {
            let xin = &x.data[bi * self.in_f..(bi + 1) * self.in_f];
            let gout = &grad_out.data[bi * self.out_f..(bi + 1) * self.out_f];
            for o in 0..self.out_f {
                let g = gout[o];
                self.grad_bias[o] += g;
                let wrow = &self.weight[o * self.in_f..(o + 1) * self.in_f];
                let gwrow = &mut self.grad_weight[o * self.in_f..(o + 1) * self.in_f];
                let gin = &mut grad_in.data[bi * self.in_f..(bi + 1) * self.in_f];
                for i in 0..self.in_f {
                    gwrow[i] += g * xin[i];
                    gin[i] += g * wrow[i];
                }
            }
        }
        Ok(grad_in)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm<R> {
    pub channels: usize,
    pub gamma: Vec<R>,
    pub beta: Vec<R>,
    pub grad_gamma: Vec<R>,
    pub grad_beta: Vec<R>,
    pub running_mean: Vec<R>,
    pub running_var: Vec<R>,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache<R>>,
}

#[derive(Debug, Clone)]
struct BnCache<R> {
    xhat: Tensor<R>,
    inv_std: Vec<R>,
    train_mode: bool,
}

impl<R: Real> BatchNorm<R> {
    fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![R::one(); channels],
            beta: vec![R::zero(); channels],
            grad_gamma: vec![R::zero(); channels],
            grad_beta: vec![R::zero(); channels],
            running_mean: vec![R::zero(); channels],
            running_var: vec![R::one(); channels],
            momentum: 0.9,
            eps: 1e-5,
            cache: None,
        }
    }

    fn forward(&mut self, x: &Tensor<R>, train: bool) -> Result<Tensor<R>, NetError> {
        if x.shape.len() != 4 || x.shape[1] != self.channels {
            return Err(NetError::Shape { expected: vec![0, self.channels, 0, 0], got: x.shape.clone() });
        }
        let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let m = (b * h * w) as f64;
        let mut out = Tensor::zeros(&x.shape);
        let mut xhat = Tensor::zeros(&x.shape);
        let mut inv_std = vec![R::zero(); c];
        for ch in 0..c {
            let (mean, var) = if train {
                let mut sum = R::zero();
                for bi in 0..b {
                    let base = (bi * c + ch) * h * w;
                    for v in &x.data[base..base + h * w] {
                        sum += *v;
                    }
                }
                let mean = sum / R::from_f64(m);
                let mut var = R::zero();
                for bi in 0..b {
                    let base = (bi * c + ch) * h * w;
                    for v in &x.data[base..base + h * w] {
                        let d = *v - mean;
                        var += d * d;
                    }
                }
                let var = var / R::from_f64(m);
                let mom = R::from_f64(self.momentum);
                self.running_mean[ch] = mom * self.running_mean[ch] + (R::one() - mom) * mean;
                self.running_var[ch] = mom * self.running_var[ch] + (R::one() - mom) * var;
                (mean, var)
            } else {
                (self.running_mean[ch], self.running_var[ch])
            };
            let istd = R::one() / (var + R::from_f64(self.eps)).sqrt();
            inv_std[ch] = istd;
            for bi in 0..b {
                let base = (bi * c + ch) * h * w;
                for i in base..base + h * w {
                    let xh = (x.data[i] - mean) * istd;
                    xhat.data[i] = xh;
                    out.data[i] = self.gamma[ch] * xh + self.beta[ch];
                }
            }
        }
        self.cache = Some(BnCache { xhat, inv_std, train_mode: train });
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<R>) -> Result<Tensor<R>, NetError> {
        let cache = self.cache.as_ref().ok_or(NetError::MissingForward)?;
        let (b, c, h, w) = (
            cache.xhat.shape[0],
            cache.xhat.shape[1],
            cache.xhat.shape[2],
            cache.xhat.shape[3],
        );
        let m = R::from_f64((b * h * w) as f64);
        let mut grad_in = Tensor::zeros(&cache.xhat.shape);
        for ch in 0..c {
            let mut sum_dy = R::zero();
            let mut sum_dy_xhat = R::zero();
            for bi in 0..b {
                let base = (bi * c + ch) * h * w;
                for i in base..base + h * w {
                    sum_dy += grad_out.data[i];
                    sum_dy_xhat += grad_out.data[i] * cache.xhat.data[i];
                }
            }
            self.grad_beta[ch] += sum_dy;
            self.grad_gamma[ch] += sum_dy_xhat;
            let scale = self.gamma[ch] * cache.inv_std[ch];
            if cache.train_mode {
                let mean_dy = sum_dy / m;
                let mean_dy_xhat = sum_dy_xhat / m;
                for bi in 0..b {
                    let base = (bi * c + ch) * h * w;
                    for i in base..base + h * w {
                        grad_in.data[i] = scale
                            * (grad_out.data[i] - mean_dy - cache.xhat.data[i] * mean_dy_xhat);
                    }
                }
            } else {
                for bi in 0..b {
                    let base = (bi * c + ch) * h * w;
                    for i in base..base + h * w {
                        grad_in.data[i] = scale * grad_out.data[i];
                    }
                }
            }
        }
        Ok(grad_in)
    }
}

#[derive(Debug, Clone)]
pub struct Act<R> {
    pub function: Activation,
    cache_input: Option<Tensor<R>>,
}

impl<R: Real> Act<R> {
    fn forward(&mut self, x: &Tensor<R>, train: bool) -> Tensor<R> {
        let out = match self.function {
            Activation::Linear => x.clone(),
            Activation::Sigmoid => Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().map(|&v| R::one() / (R::one() + (-v).exp())).collect(),
            },
            Activation::LeakyRelu => {
                let slope = R::from_f64(LEAKY_SLOPE);
                Tensor {
                    shape: x.shape.clone(),
                    data: x.data.iter().map(|&v| if v >= R::zero() { v } else { v * slope }).collect(),
                }
            }
        };
        if train {
            self.cache_input = Some(x.clone());
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor<R>) -> Result<Tensor<R>, NetError> {
        let x = self.cache_input.as_ref().ok_or(NetError::MissingForward)?;
        let data = match self.function {
            Activation::Linear => grad_out.data.clone(),
            Activation::Sigmoid => x
                .data
                .iter()
                .zip(&grad_out.data)
                .map(|(&v, &g)| {
                    let s = R::one() / (R::one() + (-v).exp());
                    g * s * (R::one() - s)
                })
                .collect(),
            Activation::LeakyRelu => {
                let slope = R::from_f64(LEAKY_SLOPE);
                x.data
                    .iter()
                    .zip(&grad_out.data)
                    .map(|(&v, &g)| if v >= R::zero() { g } else { g * slope })
                    .collect()
            }
        };
        Ok(Tensor { shape: x.shape.clone(), data })
    }
}

#[derive(Debug, Clone)]
pub enum RtLayer<R> {
    Conv2d(Conv2d<R>),
    Fc(Fc<R>),
    BatchNorm(BatchNorm<R>),
    Act(Act<R>),
    Flatten { cache_shape: Option<Vec<usize>> },
    Reshape { channels: usize, height: usize, width: usize },
}

/// A sequential stack of runtime layers built from a `Vec<LayerSpec>`.
#[derive(Debug, Clone)]
pub struct Network<R> {
    pub specs: Vec<LayerSpec>,
    pub layers: Vec<RtLayer<R>>,
}

impl<R: Real> Network<R> {
    pub fn build(specs: &[LayerSpec], rng: &mut impl Rng) -> Result<Self, NetError> {
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            spec.validate()?;
            layers.push(match *spec {
                LayerSpec::Conv2d { in_channels, out_channels, kernel_size } => {
                    RtLayer::Conv2d(Conv2d::new(in_channels, out_channels, kernel_size, rng))
                }
                LayerSpec::FullyConnected { in_features, out_features } => {
                    RtLayer::Fc(Fc::new(in_features, out_features, rng))
                }
                LayerSpec::BatchNorm { channels } => RtLayer::BatchNorm(BatchNorm::new(channels)),
                LayerSpec::Activation { function } => {
                    RtLayer::Act(Act { function, cache_input: None })
                }
                LayerSpec::Flatten => RtLayer::Flatten { cache_shape: None },
                LayerSpec::Reshape { channels, height, width } => {
                    RtLayer::Reshape { channels, height, width }
                }
            });
        }
        Ok(Self { specs: specs.to_vec(), layers })
    }

    pub fn forward(&mut self, input: &Tensor<R>, train: bool) -> Result<Tensor<R>, NetError> {
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = match layer {
                RtLayer::Conv2d(l) => l.forward(&x, train)?,
                RtLayer::Fc(l) => l.forward(&x, train)?,
                RtLayer::BatchNorm(l) => l.forward(&x, train)?,
                RtLayer::Act(l) => l.forward(&x, train),
                RtLayer::Flatten { cache_shape } => {
                    *cache_shape = Some(x.shape.clone());
                    let b = x.shape[0];
                    let f = x.numel() / b;
                    Tensor { shape: vec![b, f], data: x.data }
                }
                RtLayer::Reshape { channels, height, width } => {
                    let b = x.shape[0];
                    let expected = *channels * *height * *width;
                    if x.numel() / b != expected {
                        return Err(NetError::Shape {
                            expected: vec![b, *channels, *height, *width],
                            got: x.shape.clone(),
                        });
                    }
                    Tensor { shape: vec![b, *channels, *height, *width], data: x.data }
                }
            };
        }
        Ok(x)
    }

    pub fn backward(&mut self, grad_output: &Tensor<R>) -> Result<Tensor<R>, NetError> {
        let mut g = grad_output.clone();
        for layer in self.layers.iter_mut().rev() {
            g = match layer {
                RtLayer::Conv2d(l) => l.backward(&g)?,
                RtLayer::Fc(l) => l.backward(&g)?,
                RtLayer::BatchNorm(l) => l.backward(&g)?,
                RtLayer::Act(l) => l.backward(&g)?,
                RtLayer::Flatten { cache_shape } => {
                    let shape = cache_shape.clone().ok_or(NetError::MissingForward)?;
                    Tensor { shape, data: g.data }
                }
                RtLayer::Reshape { .. } => {
                    let b = g.shape[0];
                    let f = g.numel() / b;
                    Tensor { shape: vec![b, f], data: g.data }
                }
            };
        }
        Ok(g)
    }

    pub fn zero_grads(&mut self) {
        self.visit_grads_mut(|g| g.fill(R::zero()));
    }

    fn visit_grads_mut(&mut self, mut f: impl FnMut(&mut [R])) {
        for layer in &mut self.layers {
            match layer {
                RtLayer::Conv2d(l) => {
                    f(&mut l.grad_weight);
                    f(&mut l.grad_bias);
                }
                RtLayer::Fc(l) => {
                    f(&mut l.grad_weight);
                    f(&mut l.grad_bias);
                }
                RtLayer::BatchNorm(l) => {
                    f(&mut l.grad_gamma);
                    f(&mut l.grad_beta);
                }
                _ => {}
            }
        }
    }

    /// Trainable parameters flattened in layer order.
    pub fn params_to_vec(&self) -> Vec<R> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                RtLayer::Conv2d(l) => {
                    out.extend_from_slice(&l.weight);
                    out.extend_from_slice(&l.bias);
                }
                RtLayer::Fc(l) => {
                    out.extend_from_slice(&l.weight);
                    out.extend_from_slice(&l.bias);
                }
                RtLayer::BatchNorm(l) => {
                    out.extend_from_slice(&l.gamma);
                    out.extend_from_slice(&l.beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn grads_to_vec(&self) -> Vec<R> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                RtLayer::Conv2d(l) => {
                    out.extend_from_slice(&l.grad_weight);
                    out.extend_from_slice(&l.grad_bias);
                }
                RtLayer::Fc(l) => {
                    out.extend_from_slice(&l.grad_weight);
                    out.extend_from_slice(&l.grad_bias);
                }
                RtLayer::BatchNorm(l) => {
                    out.extend_from_slice(&l.grad_gamma);
                    out.extend_from_slice(&l.grad_beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn set_params_from_vec(&mut self, params: &[R]) {
        let mut idx = 0;
        let mut take = |dst: &mut [R]| {
            dst.copy_from_slice(&params[idx..idx + dst.len()]);
            idx += dst.len();
        };
        for layer in &mut self.layers {
            match layer {
                RtLayer::Conv2d(l) => {
                    take(&mut l.weight);
                    take(&mut l.bias);
                }
                RtLayer::Fc(l) => {
                    take(&mut l.weight);
                    take(&mut l.bias);
                }
                RtLayer::BatchNorm(l) => {
                    take(&mut l.gamma);
                    take(&mut l.beta);
                }
                _ => {}
            }
        }
        assert_eq!(idx, params.len(), "parameter vector length mismatch");
    }

    pub fn param_count(&self) -> usize {
        self.params_to_vec().len()
    }

    /// Running batch-norm statistics, flattened in layer order. These are
    /// state, not trainable parameters, but checkpoints must carry them.
    pub fn running_stats_to_vec(&self) -> Vec<R> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let RtLayer::BatchNorm(l) = layer {
                out.extend_from_slice(&l.running_mean);
                out.extend_from_slice(&l.running_var);
            }
        }
        out
    }

    pub fn set_running_stats_from_vec(&mut self, stats: &[R]) {
        let mut idx = 0;
        for layer in &mut self.layers {
            if let RtLayer::BatchNorm(l) = layer {
                l.running_mean.copy_from_slice(&stats[idx..idx + l.channels]);
                idx += l.channels;
                l.running_var.copy_from_slice(&stats[idx..idx + l.channels]);
                idx += l.channels;
            }
        }
        assert_eq!(idx, stats.len(), "running stats length mismatch");
    }
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: Vec<String>,
}

/// Central finite differences against the analytic backward pass, in the
/// scalar type of the network (use `f64` for tight tolerances). The
/// probe loss is a fixed random linear functional of the output.
pub fn gradient_check<R: Real>(
    network: &mut Network<R>,
    input: &Tensor<R>,
    epsilon: f64,
    max_coords: usize,
    rng: &mut impl Rng,
) -> Result<GradCheckReport, NetError> {
    let out = network.forward(input, true)?;
    let probe: Vec<R> = (0..out.numel()).map(|_| R::from_f64(rng.gen_range(-1.0..1.0))).collect();
    let loss_of = |o: &Tensor<R>| -> f64 {
        o.data.iter().zip(&probe).map(|(&y, &r)| (y * r).to_f64()).sum()
    };

    network.zero_grads();
    let grad_out = Tensor::from_vec(&out.shape, probe.clone());
    let grad_input = network.backward(&grad_out)?;
    let analytic_params = network.grads_to_vec();

    let base_params = network.params_to_vec();
    let n_params = base_params.len();
    let n_input = input.numel();
    let total = n_params + n_input;
    let mut coords: Vec<usize> = (0..total).collect();
    if total > max_coords {
        // Fisher-Yates prefix shuffle for an unbiased subset.
        for i in 0..max_coords {
            let j = rng.gen_range(i..total);
            coords.swap(i, j);
        }
        coords.truncate(max_coords);
    }

    let mut max_rel = 0.0f64;
    let eps = epsilon;
    for &coord in &coords {
        let analytic;
        let fd;
        if coord < n_params {
            let mut params = base_params.clone();
            let orig = params[coord].to_f64();
            params[coord] = R::from_f64(orig + eps);
            network.set_params_from_vec(&params);
            let lp = loss_of(&network.forward(input, true)?);
            params[coord] = R::from_f64(orig - eps);
            network.set_params_from_vec(&params);
            let lm = loss_of(&network.forward(input, true)?);
            params[coord] = R::from_f64(orig);
            network.set_params_from_vec(&params);
            analytic = analytic_params[coord].to_f64();
            fd = (lp - lm) / (2.0 * eps);
        } else {
            let i = coord - n_params;
            let mut x = input.clone();
            let orig = x.data[i].to_f64();
            x.data[i] = R::from_f64(orig + eps);
            let lp = loss_of(&network.forward(&x, true)?);
            x.data[i] = R::from_f64(orig - eps);
            let lm = loss_of(&network.forward(&x, true)?);
            analytic = grad_input.data[i].to_f64();
            fd = (lp - lm) / (2.0 * eps);
        }
        if !analytic.is_finite() || !fd.is_finite() {
            return Err(NetError::NonFinite(format!("coordinate {coord}: analytic {analytic}, fd {fd}")));
        }
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3);
        max_rel = max_rel.max(rel);
    }
    // Restore a consistent forward cache for callers that continue training.
    network.forward(input, true)?;
    Ok(GradCheckReport { max_rel_error: max_rel, checked: coords.len(), skipped: Vec::new() })
}
