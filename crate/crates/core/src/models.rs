//! Architecture builders for the two feedback autoencoders and the
//! assembled encoder → (truncate → quantize → zero-pad) → decoder model.
//!
//! `CsiNetPro` compresses the 2-channel (real/imaginary) angular-delay
//! matrix; `DualNetSph` compresses the 1-channel downlink magnitude and
//! feeds the uplink magnitude to the decoder as an auxiliary channel.

use crate::focu::FocuError;
use crate::netcore::{
    count_params, fc_flops_at_length, Activation, LayerSpec, NetError, Network, NetworkConfig,
    ParamBreakdown, Tensor,
};
use crate::quant::{QuantError, QuantizedPayload, Quantizer, QuantizerSpec};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Focu(#[from] FocuError),
    #[error("kept length {n} exceeds codeword capacity {m}")]
    KeptLengthOutOfRange { n: usize, m: usize },
    #[error("kept-length list has {got} entries for batch of {batch}")]
    KeptLengthCount { got: usize, batch: usize },
    #[error("this model requires the uplink magnitude as auxiliary decoder input")]
    MissingAuxiliaryInput,
    #[error("auxiliary input not accepted by this model")]
    UnexpectedAuxiliaryInput,
    #[error("invalid codeword length M = {0}")]
    InvalidM(usize),
    #[error("backward called without a cached forward pass")]
    MissingForward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    CsiNetPro,
    DualNetSph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelScale {
    Full,
    Toy,
}

/// Declarative description of a model variant; serialized inside
/// checkpoints and experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelVariant {
    pub family: ModelFamily,
    pub changeable_rate: bool,
    pub quantizer: QuantizerSpec,
    pub m: usize,
    pub scale: ModelScale,
}

impl ModelVariant {
    pub fn new(family: ModelFamily, scale: ModelScale, m: usize) -> Self {
        Self { family, changeable_rate: false, quantizer: QuantizerSpec::none(), m, scale }
    }

    /// The full-scale default codeword capacity for each family.
    pub fn default_full_m(family: ModelFamily) -> usize {
        match family {
            ModelFamily::CsiNetPro => 512,
            ModelFamily::DualNetSph => 256,
        }
    }

    pub fn default_toy_m(family: ModelFamily) -> usize {
        match family {
            ModelFamily::CsiNetPro => 64,
            ModelFamily::DualNetSph => 32,
        }
    }

    /// Spatial size of the angular-delay input (`h` = kept delay rows,
    /// `w` = transmit antennas).
    pub fn spatial(&self) -> (usize, usize) {
        match self.scale {
            ModelScale::Full => (32, 32),
            ModelScale::Toy => (16, 16),
        }
    }

    pub fn input_channels(&self) -> usize {
        match self.family {
            ModelFamily::CsiNetPro => 2,
            ModelFamily::DualNetSph => 1,
        }
    }

    pub fn uses_auxiliary_input(&self) -> bool {
        matches!(self.family, ModelFamily::DualNetSph)
    }

    pub fn network_config(&self) -> Result<NetworkConfig, ModelError> {
        match self.family {
            ModelFamily::CsiNetPro => build_csinetpro(self.m, self.scale),
            ModelFamily::DualNetSph => build_dualnetsph(self.m, self.scale),
        }
    }
}

const KERNEL: usize = 7;

fn feature_maps(family: ModelFamily, scale: ModelScale) -> [usize; 4] {
    match (family, scale) {
        (ModelFamily::CsiNetPro, ModelScale::Full) => [16, 8, 4, 2],
        (ModelFamily::CsiNetPro, ModelScale::Toy) => [8, 4, 2, 2],
        (ModelFamily::DualNetSph, ModelScale::Full) => [16, 8, 4, 1],
        (ModelFamily::DualNetSph, ModelScale::Toy) => [8, 4, 2, 1],
    }
}

fn conv_stack(
    specs: &mut Vec<LayerSpec>,
    mut in_c: usize,
    maps: &[usize],
    batch_norms: usize,
    final_activation: Activation,
) {
    for (i, &out_c) in maps.iter().enumerate() {
        specs.push(LayerSpec::Conv2d { in_channels: in_c, out_channels: out_c, kernel_size: KERNEL });
        if i < batch_norms {
            specs.push(LayerSpec::BatchNorm { channels: out_c });
        }
        let last = i + 1 == maps.len();
        specs.push(LayerSpec::Activation {
            function: if last { final_activation } else { Activation::LeakyRelu },
        });
        in_c = out_c;
    }
}

/// CsiNetPro: 2-channel real/imaginary input; encoder is four 7x7 conv
/// layers (each batch-normed) then an FC layer down to `m`; decoder is
/// the FC layer back up, a reshape, and four 7x7 conv layers with batch
/// norm after the first three.
pub fn build_csinetpro(m: usize, scale: ModelScale) -> Result<NetworkConfig, ModelError> {
    if m == 0 {
        return Err(ModelError::InvalidM(m));
    }
    let variant = ModelVariant::new(ModelFamily::CsiNetPro, scale, m);
    let (h, w) = variant.spatial();
    let maps = feature_maps(ModelFamily::CsiNetPro, scale);
    let flat = 2 * h * w;

    let mut encoder = Vec::new();
    conv_stack(&mut encoder, 2, &maps, 4, Activation::LeakyRelu);
    encoder.push(LayerSpec::Flatten);
    encoder.push(LayerSpec::FullyConnected { in_features: flat, out_features: m });
    // Codeword layer is linear: bounding (if any) lives in the quantizer.
    encoder.push(LayerSpec::Activation { function: Activation::Linear });

    let mut decoder = vec![
        LayerSpec::FullyConnected { in_features: m, out_features: flat },
        LayerSpec::Activation { function: Activation::LeakyRelu },
        LayerSpec::Reshape { channels: 2, height: h, width: w },
    ];
    conv_stack(&mut decoder, 2, &maps, 3, Activation::Sigmoid);

    Ok(NetworkConfig { encoder, decoder, m, auxiliary_input: false })
}

/// DualNetSph: 1-channel downlink-magnitude input; the decoder
/// concatenates the uplink magnitude as a second channel after the
/// reshape, so its first conv consumes 2 channels.
pub fn build_dualnetsph(m: usize, scale: ModelScale) -> Result<NetworkConfig, ModelError> {
    if m == 0 {
        return Err(ModelError::InvalidM(m));
    }
    let variant = ModelVariant::new(ModelFamily::DualNetSph, scale, m);
    let (h, w) = variant.spatial();
    let maps = feature_maps(ModelFamily::DualNetSph, scale);
    let flat = h * w;

    let mut encoder = Vec::new();
    conv_stack(&mut encoder, 1, &maps, 4, Activation::LeakyRelu);
    encoder.push(LayerSpec::Flatten);
    encoder.push(LayerSpec::FullyConnected { in_features: flat, out_features: m });
    encoder.push(LayerSpec::Activation { function: Activation::Linear });

    let mut decoder = vec![
        LayerSpec::FullyConnected { in_features: m, out_features: flat },
        LayerSpec::Activation { function: Activation::LeakyRelu },
        LayerSpec::Reshape { channels: 1, height: h, width: w },
    ];
    // First conv input: codeword map + uplink magnitude channel.
    conv_stack(&mut decoder, 2, &maps, 3, Activation::Sigmoid);

    Ok(NetworkConfig { encoder, decoder, m, auxiliary_input: true })
}

/// Everything the forward pass produces besides the reconstruction.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub output: Tensor<f64>,
    /// Encoder output before truncation/quantization, `(batch, M)`.
    pub codeword: Tensor<f64>,
    /// De-quantized, zero-padded decoder input, `(batch, M)`.
    pub padded: Tensor<f64>,
    /// One bit-stream payload per sample when a quantizer is active.
    pub payloads: Option<Vec<QuantizedPayload>>,
}

/// The assembled feedback model. The decoder is split at its reshape
/// layer so the auxiliary uplink channel can be concatenated in the
/// middle; for models without auxiliary input the split is inert.
#[derive(Debug, Clone)]
pub struct FeedbackModel {
    pub variant: ModelVariant,
    pub config: NetworkConfig,
    pub encoder: Network<f64>,
    pub decoder_front: Network<f64>,
    pub decoder_back: Network<f64>,
    pub quantizer: Quantizer,
    fwd_kept: Option<Vec<usize>>,
    fwd_aux: bool,
}

impl FeedbackModel {
    pub fn build(variant: ModelVariant, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let config = variant.network_config()?;
        let split = config
            .decoder
            .iter()
            .position(|s| matches!(s, LayerSpec::Reshape { .. }))
            .map(|i| i + 1)
            .unwrap_or(config.decoder.len());
        let encoder = Network::build(&config.encoder, rng)?;
        let decoder_front = Network::build(&config.decoder[..split], rng)?;
        let decoder_back = Network::build(&config.decoder[split..], rng)?;
        let quantizer = Quantizer::new(variant.quantizer)?;
        Ok(Self {
            variant,
            config,
            encoder,
            decoder_front,
            decoder_back,
            quantizer,
            fwd_kept: None,
            fwd_aux: false,
        })
    }

    /// Enable the changeable-rate codeword path (truncate/zero-pad).
    /// Shares every parameter across all kept lengths.
    pub fn with_changeable_rate(mut self) -> Self {
        self.variant.changeable_rate = true;
        self
    }

    /// Replace the codeword quantizer.
    pub fn with_quantizer(mut self, spec: QuantizerSpec) -> Result<Self, ModelError> {
        self.quantizer = Quantizer::new(spec)?;
        self.variant.quantizer = spec;
        Ok(self)
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        count_params(&self.config)
    }

    /// Trainable parameters: encoder first, then decoder (front, back).
    pub fn params_to_vec(&self) -> Vec<f64> {
        let mut v = self.encoder.params_to_vec();
        v.extend(self.decoder_front.params_to_vec());
        v.extend(self.decoder_back.params_to_vec());
        v
    }

    pub fn grads_to_vec(&self) -> Vec<f64> {
        let mut v = self.encoder.grads_to_vec();
        v.extend(self.decoder_front.grads_to_vec());
        v.extend(self.decoder_back.grads_to_vec());
        v
    }

    pub fn set_params_from_vec(&mut self, params: &[f64]) {
        let ne = self.encoder.param_count();
        let nf = self.decoder_front.param_count();
        self.encoder.set_params_from_vec(&params[..ne]);
        self.decoder_front.set_params_from_vec(&params[ne..ne + nf]);
        self.decoder_back.set_params_from_vec(&params[ne + nf..]);
    }

    /// Length of the encoder's slice of the flattened parameter vector
    /// (used to freeze the encoder during decoder retraining).
    pub fn encoder_params_len(&self) -> usize {
        self.encoder.param_count()
    }

    pub fn zero_grads(&mut self) {
        self.encoder.zero_grads();
        self.decoder_front.zero_grads();
        self.decoder_back.zero_grads();
    }

    /// Batch-norm running statistics for checkpointing, same ordering as
    /// the parameter vector.
    pub fn running_stats_to_vec(&self) -> Vec<f64> {
        let mut v = self.encoder.running_stats_to_vec();
        v.extend(self.decoder_front.running_stats_to_vec());
        v.extend(self.decoder_back.running_stats_to_vec());
        v
    }

    pub fn set_running_stats_from_vec(&mut self, stats: &[f64]) {
        let ne = self.encoder.running_stats_to_vec().len();
        let nf = self.decoder_front.running_stats_to_vec().len();
        self.encoder.set_running_stats_from_vec(&stats[..ne]);
        self.decoder_front.set_running_stats_from_vec(&stats[ne..ne + nf]);
        self.decoder_back.set_running_stats_from_vec(&stats[ne + nf..]);
    }

    fn check_kept(&self, kept: Option<&[usize]>, batch: usize) -> Result<Vec<usize>, ModelError> {
        let m = self.variant.m;
        match kept {
            None => Ok(vec![m; batch]),
            Some(ks) => {
                if ks.len() != batch {
                    return Err(ModelError::KeptLengthCount { got: ks.len(), batch });
                }
                for &n in ks {
                    if n > m {
                        return Err(ModelError::KeptLengthOutOfRange { n, m });
                    }
                }
                Ok(ks.to_vec())
            }
        }
    }

    /// Run encoder → truncate → quantize/de-quantize → zero-pad →
    /// decoder. `kept = None` means full-length feedback for every
    /// sample. `aux` is the uplink magnitude `(batch, 1, h, w)`,
    /// mandatory for models built with an auxiliary input.
    pub fn forward(
        &mut self,
        input: &Tensor<f64>,
        aux: Option<&Tensor<f64>>,
        kept: Option<&[usize]>,
        train: bool,
    ) -> Result<ForwardOutput, ModelError> {
        let batch = input.batch();
        let kept = self.check_kept(kept, batch)?;
        match (self.variant.uses_auxiliary_input(), aux) {
            (true, None) => return Err(ModelError::MissingAuxiliaryInput),
            (false, Some(_)) => return Err(ModelError::UnexpectedAuxiliaryInput),
            _ => {}
        }

        let m = self.variant.m;
        let codeword = self.encoder.forward(input, train)?;
        debug_assert_eq!(codeword.shape, vec![batch, m]);

        // Concatenate every sample's kept prefix into one flat vector so
        // the quantizer's forward cache lines up with one backward call.
        let mut flat = Vec::with_capacity(kept.iter().sum());
        for (bi, &k) in kept.iter().enumerate() {
            flat.extend_from_slice(&codeword.data[bi * m..bi * m + k]);
        }
        let (payload, recon) = self.quantizer.forward(&flat)?;
        let payloads = payload.map(|p| {
            let mut out = Vec::with_capacity(batch);
            let mut off = 0;
            for &k in &kept {
                out.push(QuantizedPayload {
                    symbols: p.symbols[off..off + k].to_vec(),
                    bits: p.bits,
                });
                off += k;
            }
            out
        });

        // Zero-pad after quantization: discarded positions are exact
        // zeros, never de-quantized values.
        let mut padded = Tensor::zeros(&[batch, m]);
        let mut off = 0;
        for (bi, &k) in kept.iter().enumerate() {
            padded.data[bi * m..bi * m + k].copy_from_slice(&recon[off..off + k]);
            off += k;
        }

        let front = self.decoder_front.forward(&padded, train)?;
        let back_in = match aux {
            Some(a) => concat_channel(&front, a)?,
            None => front,
        };
        let output = self.decoder_back.forward(&back_in, train)?;

        if train {
            self.fwd_kept = Some(kept);
            self.fwd_aux = aux.is_some();
        }
        Ok(ForwardOutput { output, codeword, padded, payloads })
    }

    /// Accumulate parameter gradients for the whole pipeline. The
    /// quantizer contributes its surrogate gradient; positions past each
    /// sample's kept length pass no gradient to the encoder.
    pub fn backward(&mut self, grad_output: &Tensor<f64>) -> Result<(), ModelError> {
        let kept = self.fwd_kept.clone().ok_or(ModelError::MissingForward)?;
        let m = self.variant.m;
        let g = self.decoder_back.backward(grad_output)?;
        let g_front = if self.fwd_aux { split_channel(&g)? } else { g };
        let g_padded = self.decoder_front.backward(&g_front)?;
        debug_assert_eq!(g_padded.shape, vec![kept.len(), m]);

        let mut flat = Vec::with_capacity(kept.iter().sum());
        for (bi, &k) in kept.iter().enumerate() {
            flat.extend_from_slice(&g_padded.data[bi * m..bi * m + k]);
        }
        let back = self.quantizer.backward(&flat)?;
        let mut g_codeword = Tensor::zeros(&[kept.len(), m]);
        let mut off = 0;
        for (bi, &k) in kept.iter().enumerate() {
            g_codeword.data[bi * m..bi * m + k].copy_from_slice(&back[off..off + k]);
            off += k;
        }
        self.encoder.backward(&g_codeword)?;
        Ok(())
    }
}

/// Append `extra` as one more channel: `(b, c, h, w) + (b, 1, h, w)`.
fn concat_channel(base: &Tensor<f64>, extra: &Tensor<f64>) -> Result<Tensor<f64>, ModelError> {
    let (b, c, h, w) = (base.shape[0], base.shape[1], base.shape[2], base.shape[3]);
    if extra.shape != vec![b, 1, h, w] {
        return Err(ModelError::Net(NetError::Shape {
            expected: vec![b, 1, h, w],
            got: extra.shape.clone(),
        }));
    }
    let mut out = Tensor::zeros(&[b, c + 1, h, w]);
    let plane = h * w;
    for bi in 0..b {
        let src = &base.data[bi * c * plane..(bi + 1) * c * plane];
        let dst = &mut out.data[bi * (c + 1) * plane..];
        dst[..c * plane].copy_from_slice(src);
        dst[c * plane..(c + 1) * plane]
            .copy_from_slice(&extra.data[bi * plane..(bi + 1) * plane]);
    }
    Ok(out)
}

/// Drop the last (auxiliary) channel from a gradient tensor.
fn split_channel(g: &Tensor<f64>) -> Result<Tensor<f64>, ModelError> {
    let (b, c1, h, w) = (g.shape[0], g.shape[1], g.shape[2], g.shape[3]);
    let c = c1 - 1;
    let plane = h * w;
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for bi in 0..b {
        out.data[bi * c * plane..(bi + 1) * c * plane]
            .copy_from_slice(&g.data[bi * c1 * plane..bi * c1 * plane + c * plane]);
    }
    Ok(out)
}

/// FC FLOPs of the changeable-rate model at active length `l`,
/// `(encoder, decoder)`. Equal to the fixed-rate model of capacity `l`.
pub fn fc_flops(config: &NetworkConfig, l: usize) -> (u64, u64) {
    fc_flops_at_length(config, l)
}

/// Quantized feedback payload size in bytes for `n` symbols at `b` bits,
/// including the 3-byte header.
pub fn payload_bytes(n: usize, bits: u8) -> usize {
    QuantizedPayload::byte_len(n, bits)
}
