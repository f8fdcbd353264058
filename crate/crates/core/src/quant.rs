//! Codeword quantization: sigmoid bounding, uniform quantizer, mu-law
//! companding, soft-to-hard approximation and the PQB bump-function
//! surrogate gradient, plus entropy measurement and bit packing.

use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("invalid quantizer spec: {0}")]
    InvalidSpec(String),
    #[error("symbol {symbol} out of range for {bits}-bit quantizer")]
    SymbolOutOfRange { symbol: u32, bits: u8 },
    #[error("empty symbol stream")]
    EmptyStream,
    #[error("bit stream truncated: need {needed} bits, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("mu-law quantizer used without calibrated codeword range")]
    Uncalibrated,
    #[error("quantizer backward called without forward state")]
    MissingForwardState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerKind {
    None,
    MuLaw,
    PassingGradient,
    SoftToHard,
    Pqb,
}

/// Quantizer configuration. `d_rel` expresses the bump support as a
/// fraction of the half-bin width `1/2^(b+1)`, so any value in (0, 1]
/// is valid for every bit-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub kind: QuantizerKind,
    pub bits: u8,
    pub mu: f64,
    pub a: f64,
    pub d_rel: f64,
}

impl QuantizerSpec {
    pub fn none() -> Self {
        Self { kind: QuantizerKind::None, bits: 32, mu: 255.0, a: 8.0, d_rel: 0.5 }
    }

    pub fn new(kind: QuantizerKind, bits: u8) -> Self {
        Self { kind, bits, mu: 255.0, a: 8.0, d_rel: 0.5 }
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if self.kind != QuantizerKind::None && !(1..=16).contains(&self.bits) {
            return Err(QuantError::InvalidSpec(format!("bits must be in 1..=16, got {}", self.bits)));
        }
        if self.mu <= 0.0 {
            return Err(QuantError::InvalidSpec("mu must be positive".into()));
        }
        if self.a <= 0.0 {
            return Err(QuantError::InvalidSpec("a must be positive".into()));
        }
        if !(self.d_rel > 0.0 && self.d_rel <= 1.0) {
            return Err(QuantError::InvalidSpec("d_rel must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Absolute bump support `d = d_rel / 2^(b+1)`.
    pub fn d_abs(&self) -> f64 {
        self.d_rel / f64::from(1u32 << (self.bits + 1))
    }
}

const SIGMOID_CLIP: f64 = 1e-7;

pub fn sigmoid_map(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid_derivative(x: f64) -> f64 {
    let s = sigmoid_map(x);
    s * (1.0 - s)
}

/// Logit with clipping to `[1e-7, 1 - 1e-7]` so boundary values stay finite.
pub fn inverse_sigmoid_map(y: f64) -> f64 {
    let y = y.clamp(SIGMOID_CLIP, 1.0 - SIGMOID_CLIP);
    (y / (1.0 - y)).ln()
}

pub fn inverse_sigmoid_derivative(y: f64) -> f64 {
    let y = y.clamp(SIGMOID_CLIP, 1.0 - SIGMOID_CLIP);
    1.0 / (y * (1.0 - y))
}

/// Uniform quantizer on [0,1]: `round(2^b x - 0.5)`, ties rounding half
/// away from zero, clamped into the valid symbol range.
pub fn quantize(x: f64, bits: u8) -> u32 {
    let levels = 1u32 << bits;
    let x = x.clamp(0.0, 1.0);
    let v = (f64::from(levels) * x - 0.5).round();
    let v = v.max(0.0).min(f64::from(levels - 1));
    v as u32
}

/// Bin center `(symbol + 0.5) / 2^b`.
pub fn dequantize(symbol: u32, bits: u8) -> Result<f64, QuantError> {
    let levels = 1u32 << bits;
    if symbol >= levels {
        return Err(QuantError::SymbolOutOfRange { symbol, bits });
    }
    Ok((f64::from(symbol) + 0.5) / f64::from(levels))
}

/// Normalization constant of the bump surrogate: the integral of
/// `exp(-1/(1-u^2))` over (-1, 1), evaluated once by composite Simpson.
pub static BUMP_NORMALIZATION: Lazy<f64> = Lazy::new(|| {
    let f = |u: f64| {
        let t = 1.0 - u * u;
        if t <= 0.0 { 0.0 } else { (-1.0 / t).exp() }
    };
    let n = 1 << 20;
    let h = 2.0 / n as f64;
    let mut acc = f(-1.0) + f(1.0);
    for i in 1..n {
        let u = -1.0 + h * i as f64;
        acc += if i % 2 == 1 { 4.0 * f(u) } else { 2.0 * f(u) };
    }
    acc * h / 3.0
});

/// Signed offset of `x` from the center of its quantization cell:
/// `(x mod 1/2^b) - 1/2^(b+1)`.
pub fn cell_offset(x: f64, bits: u8) -> f64 {
    let cell = 1.0 / f64::from(1u32 << bits);
    let half = cell / 2.0;
    x.rem_euclid(cell) - half
}

/// Surrogate gradient of the quantize/de-quantize pair: a bump of unit
/// mass per quantization cell, zero outside `|cell_offset| < d`.
pub fn pqb_surrogate_gradient(x: f64, bits: u8, d: f64, c: f64) -> f64 {
    let m = cell_offset(x, bits);
    let r = m / d;
    let t = 1.0 - r * r;
    if t <= 0.0 {
        0.0
    } else {
        (1.0 / (c * d)) * (-1.0 / t).exp()
    }
}

/// Mu-law compandor `ln(1 + mu x) / ln(1 + mu)`, a bijection of [0,1]
/// onto itself.
pub fn mu_law_compand(x: f64, mu: f64) -> f64 {
    (1.0 + mu * x).ln() / (1.0 + mu).ln()
}

pub fn mu_law_expand(y: f64, mu: f64) -> f64 {
    ((1.0 + mu).powf(y) - 1.0) / mu
}

/// Smooth staircase `sum_i 0.5 (tanh(a (2^b x - i)) + 1)` for
/// `i = 1 .. 2^b - 1`.
pub fn soft_quantize(x: f64, bits: u8, a: f64) -> f64 {
    let levels = 1u32 << bits;
    let scaled = f64::from(levels) * x;
    (1..levels).map(|i| 0.5 * ((a * (scaled - f64::from(i))).tanh() + 1.0)).sum()
}

pub fn soft_quantize_derivative(x: f64, bits: u8, a: f64) -> f64 {
    let levels = 1u32 << bits;
    let scaled = f64::from(levels) * x;
    (1..levels)
        .map(|i| {
            let t = (a * (scaled - f64::from(i))).tanh();
            0.5 * a * f64::from(levels) * (1.0 - t * t)
        })
        .sum()
}

/// Quantized feedback payload: `n` symbols of `b` bits each, packed
/// MSB-first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedPayload {
    pub symbols: Vec<u32>,
    pub bits: u8,
}

impl QuantizedPayload {
    /// Wire format: header {n: u16 LE, b: u8}, then MSB-first packed symbols.
    pub fn encode(&self) -> Vec<u8> {
        let n = self.symbols.len() as u16;
        let mut out = Vec::with_capacity(3 + self.symbols.len());
        out.extend_from_slice(&n.to_le_bytes());
        out.push(self.bits);
        out.extend_from_slice(&pack_bits(&self.symbols, self.bits));
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, QuantError> {
        if bytes.len() < 3 {
            return Err(QuantError::Truncated { needed: 3, available: bytes.len() });
        }
        let n = u16::from_le_bytes([bytes[0], bytes[1]]) as usize;
        let bits = bytes[2];
        let symbols = unpack_bits(&bytes[3..], n, bits)?;
        Ok(Self { symbols, bits })
    }

    pub fn byte_len(n: usize, bits: u8) -> usize {
        3 + (n * bits as usize).div_ceil(8)
    }
}

/// Pack symbols MSB-first, `b` bits each, final byte zero-padded.
pub fn pack_bits(symbols: &[u32], bits: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity((symbols.len() * bits as usize).div_ceil(8));
    let mut acc: u32 = 0;
    let mut nbits: u8 = 0;
    for &s in symbols {
        acc = (acc << bits) | (s & ((1u32 << bits) - 1));
        nbits += bits;
        while nbits >= 8 {
            nbits -= 8;
            out.push(((acc >> nbits) & 0xff) as u8);
        }
    }
    if nbits > 0 {
        out.push(((acc << (8 - nbits)) & 0xff) as u8);
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize, bits: u8) -> Result<Vec<u32>, QuantError> {
    let needed = n * bits as usize;
    let available = bytes.len() * 8;
    if needed > available {
        return Err(QuantError::Truncated { needed, available });
    }
    let mut out = Vec::with_capacity(n);
    let mut acc: u32 = 0;
    let mut nbits: u8 = 0;
    let mut iter = bytes.iter();
    for _ in 0..n {
        while nbits < bits {
            acc = (acc << 8) | u32::from(*iter.next().expect("length checked"));
            nbits += 8;
        }
        nbits -= bits;
        out.push((acc >> nbits) & ((1u32 << bits) - 1));
    }
    Ok(out)
}

/// Empirical entropy of a symbol stream in bits per element.
pub fn empirical_entropy(symbols: &[u32], bits: u8) -> Result<f64, QuantError> {
    if symbols.is_empty() {
        return Err(QuantError::EmptyStream);
    }
    let levels = 1usize << bits;
    let mut counts = vec![0usize; levels];
    for &s in symbols {
        if s as usize >= levels {
            return Err(QuantError::SymbolOutOfRange { symbol: s, bits });
        }
        counts[s as usize] += 1;
    }
    let total = symbols.len() as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum())
}

/// Stateful quantizer wrapping the pure element maps with the sigmoid
/// bounding used by the end-to-end methods and the min-max rescaling
/// used by the mu-law baseline. Caches forward values for backward.
#[derive(Debug, Clone)]
pub struct Quantizer {
    pub spec: QuantizerSpec,
    /// Codeword range statistics gathered from the pretrained encoder,
    /// required by the mu-law method only.
    pub range: Option<(f64, f64)>,
    fwd_input: Vec<f64>,
    fwd_bounded: Vec<f64>,
    fwd_dequant: Vec<f64>,
}

impl Quantizer {
    pub fn new(spec: QuantizerSpec) -> Result<Self, QuantError> {
        spec.validate()?;
        Ok(Self { spec, range: None, fwd_input: Vec::new(), fwd_bounded: Vec::new(), fwd_dequant: Vec::new() })
    }

    pub fn calibrate(&mut self, lo: f64, hi: f64) {
        self.range = Some((lo, hi));
    }

    /// Quantize and de-quantize a codeword prefix. Returns the payload
    /// (absent for kind `none`) together with the reconstructed values.
    pub fn forward(&mut self, values: &[f64]) -> Result<(Option<QuantizedPayload>, Vec<f64>), QuantError> {
        let spec = self.spec;
        match spec.kind {
            QuantizerKind::None => {
                self.fwd_input.clear();
                Ok((None, values.to_vec()))
            }
            QuantizerKind::MuLaw => {
                let (lo, hi) = self.range.ok_or(QuantError::Uncalibrated)?;
                let span = (hi - lo).max(f64::EPSILON);
                let mut symbols = Vec::with_capacity(values.len());
                let mut recon = Vec::with_capacity(values.len());
                for &x in values {
                    let z = ((x - lo) / span).clamp(0.0, 1.0);
                    let y = mu_law_compand(z, spec.mu);
                    let s = quantize(y, spec.bits);
                    let yd = dequantize(s, spec.bits)?;
                    let zd = mu_law_expand(yd, spec.mu);
                    symbols.push(s);
                    recon.push(lo + zd * span);
                }
                Ok((Some(QuantizedPayload { symbols, bits: spec.bits }), recon))
            }
            QuantizerKind::PassingGradient | QuantizerKind::SoftToHard | QuantizerKind::Pqb => {
                self.fwd_input.clear();
                self.fwd_bounded.clear();
                self.fwd_dequant.clear();
                let mut symbols = Vec::with_capacity(values.len());
                let mut recon = Vec::with_capacity(values.len());
                for &x in values {
                    let y = sigmoid_map(x);
                    let s = quantize(y, spec.bits);
                    let yd = dequantize(s, spec.bits)?;
                    symbols.push(s);
                    recon.push(inverse_sigmoid_map(yd));
                    self.fwd_input.push(x);
                    self.fwd_bounded.push(y);
                    self.fwd_dequant.push(yd);
                }
                Ok((Some(QuantizedPayload { symbols, bits: spec.bits }), recon))
            }
        }
    }

    /// Back-propagate through the most recent `forward` call.
    pub fn backward(&self, grad_out: &[f64]) -> Result<Vec<f64>, QuantError> {
        let spec = self.spec;
        match spec.kind {
            QuantizerKind::None => Ok(grad_out.to_vec()),
            // The mu-law protocol never trains through the quantizer
            // (encoder frozen during decoder retraining); pass through.
            QuantizerKind::MuLaw => Ok(grad_out.to_vec()),
            QuantizerKind::PassingGradient | QuantizerKind::SoftToHard | QuantizerKind::Pqb => {
                if self.fwd_input.len() != grad_out.len() {
                    return Err(QuantError::MissingForwardState);
                }
                let c = *BUMP_NORMALIZATION;
                let d = spec.d_abs();
                let mut grad_in = Vec::with_capacity(grad_out.len());
                for (i, &g) in grad_out.iter().enumerate() {
                    let x = self.fwd_input[i];
                    let y = self.fwd_bounded[i];
                    let yd = self.fwd_dequant[i];
                    let mid = match spec.kind {
                        QuantizerKind::PassingGradient => 1.0,
                        QuantizerKind::SoftToHard => {
                            soft_quantize_derivative(y, spec.bits, spec.a) / f64::from(1u32 << spec.bits)
                        }
                        QuantizerKind::Pqb => pqb_surrogate_gradient(y, spec.bits, d, c),
                        _ => unreachable!(),
                    };
                    grad_in.push(g * sigmoid_derivative(x) * mid * inverse_sigmoid_derivative(yd));
                }
                Ok(grad_in)
            }
        }
    }
}
