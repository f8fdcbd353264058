//! Training and evaluation: adaptive-moment optimizer, deterministic
//! training loops (including decoder-only retraining for the two-phase
//! mu-law protocol), NMSE evaluation, codeword statistics, experiment
//! orchestration with persisted results, and report rendering.

use crate::channel::{
    compute_norm_params, compute_norm_params_real, to_angular_delay, to_polar, ChannelError,
    Dataset, DatasetConfig, NormParams,
};
use crate::focu::{changeable_rate_loss_grad, sample_overhead, FocuError, OverheadPolicy};
use crate::models::{
    FeedbackModel, ModelError, ModelFamily, ModelScale, ModelVariant,
};
use crate::netcore::{count_params, fc_flops_at_length, ParamBreakdown, Tensor};
use crate::quant::{empirical_entropy, QuantError, QuantizerKind, QuantizerSpec};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// NMSE reporting floor in dB (zero reconstruction error would be -inf).
pub const NMSE_FLOOR_DB: f64 = -100.0;

pub const RESULT_SCHEMA_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"VRCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Net(#[from] crate::netcore::NetError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Focu(#[from] FocuError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("empty dataset or split")]
    EmptyData,
    #[error("malformed checkpoint")]
    MalformedCheckpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdaptiveMoment,
}

/// Adaptive-moment optimizer over a flattened parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64, param_count: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub overhead_policy: OverheadPolicy,
    pub quantizer: QuantizerSpec,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(HarnessError::Config("learning_rate must be >= 0".into()));
        }
        self.overhead_policy.validate()?;
        self.quantizer.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_loss: f64,
}

/// Model-ready view of one dataset split: normalized inputs (also the
/// training targets), optional auxiliary uplink channel, and the
/// de-normalized ground truth for NMSE.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub inputs: Tensor<f64>,
    pub aux: Option<Tensor<f64>>,
    pub truth: Tensor<f64>,
    pub norm: NormParams,
}

impl PreparedData {
    pub fn len(&self) -> usize {
        self.inputs.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(&self, indices: &[usize]) -> (Tensor<f64>, Option<Tensor<f64>>, Tensor<f64>) {
        let per = self.inputs.numel() / self.len().max(1);
        let mut shape = self.inputs.shape.clone();
        shape[0] = indices.len();
        let mut inputs = Tensor::zeros(&shape);
        let mut truth = Tensor::zeros(&shape);
        for (row, &i) in indices.iter().enumerate() {
            inputs.data[row * per..(row + 1) * per]
                .copy_from_slice(&self.inputs.data[i * per..(i + 1) * per]);
            truth.data[row * per..(row + 1) * per]
                .copy_from_slice(&self.truth.data[i * per..(i + 1) * per]);
        }
        let aux = self.aux.as_ref().map(|a| {
            let per_a = a.numel() / self.len();
            let mut shape_a = a.shape.clone();
            shape_a[0] = indices.len();
            let mut out = Tensor::zeros(&shape_a);
            for (row, &i) in indices.iter().enumerate() {
                out.data[row * per_a..(row + 1) * per_a]
                    .copy_from_slice(&a.data[i * per_a..(i + 1) * per_a]);
            }
            out
        });
        (inputs, aux, truth)
    }
}

#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: PreparedData,
    pub test: PreparedData,
    pub norm: NormParams,
}

/// Convert a raw dataset to model tensors. Samples `[0, train_count)`
/// form the training split, the rest the test split; normalization
/// statistics come from the training split only. CsiNetPro consumes the
/// complex angular-delay matrix as real/imaginary channels; DualNetSph
/// consumes the downlink magnitude with the uplink magnitude as the
/// auxiliary channel (normalized with the same downlink statistics).
pub fn prepare(
    dataset: &Dataset,
    family: ModelFamily,
    train_count: usize,
) -> Result<SplitData, HarnessError> {
    let n = dataset.samples.len();
    if n == 0 || train_count == 0 || train_count >= n {
        return Err(HarnessError::EmptyData);
    }
    let kept = dataset.config.n_s_kept;
    let (h, w) = (kept, dataset.config.n_t);
    match family {
        ModelFamily::CsiNetPro => {
            let mats: Vec<_> = dataset
                .samples
                .iter()
                .map(|s| to_angular_delay(&s.downlink, kept))
                .collect::<Result<_, _>>()?;
            let norm = compute_norm_params(&mats[..train_count])?;
            let build = |range: std::ops::Range<usize>| {
                let b = range.len();
                let mut inputs = Tensor::zeros(&[b, 2, h, w]);
                let mut truth = Tensor::zeros(&[b, 2, h, w]);
                for (row, i) in range.enumerate() {
                    for (j, v) in mats[i].iter().enumerate() {
                        let base = row * 2 * h * w;
                        inputs.data[base + j] = norm.apply(v.re);
                        inputs.data[base + h * w + j] = norm.apply(v.im);
                        truth.data[base + j] = v.re;
                        truth.data[base + h * w + j] = v.im;
                    }
                }
                PreparedData { inputs, aux: None, truth, norm }
            };
            Ok(SplitData { train: build(0..train_count), test: build(train_count..n), norm })
        }
        ModelFamily::DualNetSph => {
            let down: Vec<_> = dataset
                .samples
                .iter()
                .map(|s| to_angular_delay(&s.downlink, kept).map(|m| to_polar(&m).0))
                .collect::<Result<_, _>>()?;
            let up: Vec<_> = dataset
                .samples
                .iter()
                .map(|s| to_angular_delay(&s.uplink, kept).map(|m| to_polar(&m).0))
                .collect::<Result<_, _>>()?;
            let norm = compute_norm_params_real(&down[..train_count])?;
            let build = |range: std::ops::Range<usize>| {
                let b = range.len();
                let mut inputs = Tensor::zeros(&[b, 1, h, w]);
                let mut aux = Tensor::zeros(&[b, 1, h, w]);
                let mut truth = Tensor::zeros(&[b, 1, h, w]);
                for (row, i) in range.enumerate() {
                    for (j, &v) in down[i].iter().enumerate() {
                        inputs.data[row * h * w + j] = norm.apply(v);
                        truth.data[row * h * w + j] = v;
                    }
                    for (j, &v) in up[i].iter().enumerate() {
                        aux.data[row * h * w + j] = norm.apply(v);
                    }
                }
                PreparedData { inputs, aux: Some(aux), truth, norm }
            };
            Ok(SplitData { train: build(0..train_count), test: build(train_count..n), norm })
        }
    }
}

fn train_inner(
    model: &mut FeedbackModel,
    data: &PreparedData,
    config: &TrainConfig,
    freeze_encoder: bool,
) -> Result<TrainHistory, HarnessError> {
    config.validate()?;
    if data.is_empty() {
        return Err(HarnessError::EmptyData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.learning_rate, model.params_to_vec().len());
    let encoder_len = model.encoder_params_len();
    let n = data.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_state: Option<(Vec<f64>, Vec<f64>)> = None;

    for epoch in 0..config.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in indices.chunks(config.batch_size) {
            let (inputs, aux, _) = data.gather(chunk);
            let kept: Vec<usize> =
                chunk.iter().map(|_| sample_overhead(&config.overhead_policy, &mut rng)).collect();
            let out = model.forward(&inputs, aux.as_ref(), Some(&kept), true)?;
            // Targets are the normalized inputs (autoencoder objective).
            let per = inputs.numel() / chunk.len();
            let mut loss = 0.0;
            for bi in 0..chunk.len() {
                let mut acc = 0.0;
                for i in bi * per..(bi + 1) * per {
                    let d = inputs.data[i] - out.output.data[i];
                    acc += d * d;
                }
                loss += config.overhead_policy.weight(kept[bi]) * acc / per as f64;
            }
            loss /= chunk.len() as f64;
            if !loss.is_finite() {
                return Err(HarnessError::Divergence { epoch, loss });
            }
            epoch_loss += loss * chunk.len() as f64;

            let grad =
                changeable_rate_loss_grad(&inputs, &out.output, &kept, &config.overhead_policy);
            model.zero_grads();
            model.backward(&grad)?;
            let mut params = model.params_to_vec();
            let mut grads = model.grads_to_vec();
            if freeze_encoder {
                grads[..encoder_len].fill(0.0);
            }
            opt.step(&mut params, &grads);
            if freeze_encoder {
                // Keep the encoder slice bitwise untouched even against
                // numerical noise in the optimizer update.
                let orig = model.params_to_vec();
                params[..encoder_len].copy_from_slice(&orig[..encoder_len]);
            }
            model.set_params_from_vec(&params);
        }
        let mean_loss = epoch_loss / n as f64;
        losses.push(mean_loss);
        if mean_loss < best_loss {
            best_loss = mean_loss;
            best_epoch = epoch;
            best_state = Some((model.params_to_vec(), model.running_stats_to_vec()));
        }
    }
    if let Some((params, stats)) = best_state {
        model.set_params_from_vec(&params);
        model.set_running_stats_from_vec(&stats);
    }
    Ok(TrainHistory { losses, best_epoch, best_loss: if best_loss.is_finite() { best_loss } else { 0.0 } })
}

/// End-to-end training with the configured overhead policy and
/// quantizer. Deterministic given the seed; retains the best-loss
/// checkpoint.
pub fn train(
    model: &mut FeedbackModel,
    data: &PreparedData,
    config: &TrainConfig,
) -> Result<TrainHistory, HarnessError> {
    *model = model.clone().with_quantizer(config.quantizer)?;
    if config.quantizer.kind == QuantizerKind::MuLaw {
        calibrate_mu_law(model, data)?;
    }
    train_inner(model, data, config, false)
}

/// Decoder-only retraining: the encoder is frozen bitwise. Used by the
/// two-phase mu-law protocol after unquantized pretraining; the
/// quantizer range is calibrated from the trained encoder's codewords
/// over the training split before retraining starts.
pub fn retrain_decoder(
    model: &mut FeedbackModel,
    data: &PreparedData,
    config: &TrainConfig,
) -> Result<TrainHistory, HarnessError> {
    *model = model.clone().with_quantizer(config.quantizer)?;
    if config.quantizer.kind == QuantizerKind::MuLaw {
        calibrate_mu_law(model, data)?;
    }
    train_inner(model, data, config, true)
}

/// Min/max codeword statistics over a split, applied to the model's
/// quantizer range.
pub fn calibrate_mu_law(
    model: &mut FeedbackModel,
    data: &PreparedData,
) -> Result<(), HarnessError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(32) {
        let (inputs, _aux, _) = data.gather(chunk);
        let codeword = model.encoder.forward(&inputs, false)?;
        for &v in &codeword.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Err(HarnessError::EmptyData);
    }
    model.quantizer.calibrate(lo, hi);
    Ok(())
}

/// NMSE in dB between de-normalized reconstructions and ground truth:
/// mean over samples of the per-sample squared-error-to-energy ratio,
/// floored at [`NMSE_FLOOR_DB`].
pub fn nmse_db_from_outputs(truth: &Tensor<f64>, output_norm: &Tensor<f64>, norm: NormParams) -> f64 {
    let batch = truth.batch();
    let per = truth.numel() / batch;
    let mut mean_ratio = 0.0;
    for bi in 0..batch {
        let mut err = 0.0;
        let mut energy = 0.0;
        for i in bi * per..(bi + 1) * per {
            let recon = norm.invert(output_norm.data[i]);
            let d = truth.data[i] - recon;
            err += d * d;
            energy += truth.data[i] * truth.data[i];
        }
        mean_ratio += if energy > 0.0 { err / energy } else { 0.0 };
    }
    mean_ratio /= batch as f64;
    if mean_ratio <= 0.0 {
        NMSE_FLOOR_DB
    } else {
        (10.0 * mean_ratio.log10()).max(NMSE_FLOOR_DB)
    }
}

/// Evaluate reconstruction NMSE (dB) at a fixed kept length `n`.
pub fn evaluate_nmse(
    model: &mut FeedbackModel,
    data: &PreparedData,
    n: usize,
) -> Result<f64, HarnessError> {
    if data.is_empty() {
        return Err(HarnessError::EmptyData);
    }
    let batch = data.len();
    let mut ratio_sum = 0.0;
    for chunk in (0..batch).collect::<Vec<_>>().chunks(32) {
        let (inputs, aux, truth) = data.gather(chunk);
        let kept = vec![n; chunk.len()];
        let out = model.forward(&inputs, aux.as_ref(), Some(&kept), false)?;
        let db_free = nmse_db_from_outputs(&truth, &out.output, data.norm);
        // Re-accumulate linearly for a correct overall mean.
        let lin = if db_free <= NMSE_FLOOR_DB { 0.0 } else { 10f64.powf(db_free / 10.0) };
        ratio_sum += lin * chunk.len() as f64;
    }
    let mean = ratio_sum / batch as f64;
    Ok(if mean <= 0.0 { NMSE_FLOOR_DB } else { (10.0 * mean.log10()).max(NMSE_FLOOR_DB) })
}

/// Mean empirical symbol entropy (bits per codeword element) at kept
/// length `n`, over the split. `None` when no quantizer is active.
pub fn evaluate_entropy(
    model: &mut FeedbackModel,
    data: &PreparedData,
    n: usize,
) -> Result<Option<f64>, HarnessError> {
    if data.is_empty() {
        return Err(HarnessError::EmptyData);
    }
    let mut symbols = Vec::new();
    let mut bits = None;
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(32) {
        let (inputs, aux, _) = data.gather(chunk);
        let kept = vec![n; chunk.len()];
        let out = model.forward(&inputs, aux.as_ref(), Some(&kept), false)?;
        if let Some(payloads) = out.payloads {
            for p in payloads {
                bits = Some(p.bits);
                symbols.extend(p.symbols);
            }
        }
    }
    match (bits, symbols.is_empty()) {
        (Some(b), false) => Ok(Some(empirical_entropy(&symbols, b)?)),
        _ => Ok(None),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodewordStats {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Per-index mean and standard deviation of the (pre-quantization)
/// codeword over a split.
pub fn codeword_statistics(
    model: &mut FeedbackModel,
    data: &PreparedData,
) -> Result<CodewordStats, HarnessError> {
    if data.is_empty() {
        return Err(HarnessError::EmptyData);
    }
    let m = model.variant.m;
    let n = data.len();
    let mut sum = vec![0.0f64; m];
    let mut sumsq = vec![0.0f64; m];
    for chunk in (0..n).collect::<Vec<_>>().chunks(32) {
        let (inputs, _aux, _) = data.gather(chunk);
        let codeword = model.encoder.forward(&inputs, false)?;
        for bi in 0..chunk.len() {
            for j in 0..m {
                let v = codeword.data[bi * m + j];
                sum[j] += v;
                sumsq[j] += v * v;
            }
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let sd = sumsq
        .iter()
        .zip(&mean)
        .map(|(sq, mu)| (sq / n as f64 - mu * mu).max(0.0).sqrt())
        .collect();
    Ok(CodewordStats { mean, sd })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Binary checkpoint: magic, format version, JSON model variant, then
/// the flattened parameters and batch-norm running statistics as
/// little-endian f64.
pub fn save_checkpoint(path: &Path, model: &FeedbackModel) -> Result<(), HarnessError> {
    let mut w = Vec::new();
    w.extend_from_slice(CHECKPOINT_MAGIC);
    w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&model.variant)?;
    w.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    w.extend_from_slice(&meta);
    for vec in [model.params_to_vec(), model.running_stats_to_vec()] {
        w.extend_from_slice(&(vec.len() as u64).to_le_bytes());
        for v in vec {
            w.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, w)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<FeedbackModel, HarnessError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], HarnessError> {
        if *pos + n > bytes.len() {
            return Err(HarnessError::MalformedCheckpoint);
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(HarnessError::MalformedCheckpoint);
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(HarnessError::MalformedCheckpoint);
    }
    let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let variant: ModelVariant = serde_json::from_slice(take(&mut pos, meta_len)?)?;
    let read_vec = |pos: &mut usize| -> Result<Vec<f64>, HarnessError> {
        let n = u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()) as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(f64::from_le_bytes(take(pos, 8)?.try_into().unwrap()));
        }
        Ok(out)
    };
    let params = read_vec(&mut pos)?;
    let stats = read_vec(&mut pos)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = FeedbackModel::build(variant, &mut rng)?;
    if params.len() != model.params_to_vec().len()
        || stats.len() != model.running_stats_to_vec().len()
    {
        return Err(HarnessError::MalformedCheckpoint);
    }
    model.set_params_from_vec(&params);
    model.set_running_stats_from_vec(&stats);
    Ok(model)
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub family: ModelFamily,
    pub scale: ModelScale,
    pub m: usize,
    pub changeable_rate: bool,
    pub quantizer: QuantizerSpec,
    pub dataset: DatasetConfig,
    pub train_count: usize,
    pub train: TrainConfig,
    /// Extra decoder-only epochs (two-phase protocol); the pretraining
    /// phase then runs without quantization.
    #[serde(default)]
    pub retrain_epochs: usize,
    /// Kept lengths to evaluate.
    pub eval_n: Vec<usize>,
    /// Bit widths to evaluate; empty means the trained quantizer as-is.
    #[serde(default)]
    pub eval_bits: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridEntry {
    pub n: usize,
    pub b: Option<u8>,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlopsEntry {
    pub active_len: usize,
    pub encoder_fc_flops: u64,
    pub decoder_fc_flops: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    pub toolkit_version: String,
    pub config: ExperimentConfig,
    pub nmse_db: Vec<GridEntry>,
    pub entropy_bits: Vec<GridEntry>,
    pub param_breakdown: ParamBreakdown,
    pub fc_flops: Vec<FlopsEntry>,
    pub codeword_stats: CodewordStats,
    pub history_final_loss: f64,
    pub history_best_loss: f64,
}

/// Effective seed: `VARIRATE_SEED` overrides the config seed when set.
pub fn effective_seed(config_seed: u64) -> u64 {
    std::env::var("VARIRATE_SEED")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(config_seed)
}

/// Train per the config and evaluate the requested grid, persisting
/// `result.json`, `history.csv` and `checkpoint.bin` under `out_dir`.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<ExperimentResult, HarnessError> {
    let mut train_config = config.train.clone();
    train_config.seed = effective_seed(train_config.seed);
    let dataset = crate::channel::generate_dataset(&config.dataset)?;
    let split = prepare(&dataset, config.family, config.train_count)?;

    let mut variant = ModelVariant::new(config.family, config.scale, config.m);
    variant.changeable_rate = config.changeable_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut model = FeedbackModel::build(variant, &mut rng)?;

    let two_phase = config.retrain_epochs > 0;
    let history = if two_phase {
        let mut pretrain = train_config.clone();
        pretrain.quantizer = QuantizerSpec::none();
        let mut h = train(&mut model, &split.train, &pretrain)?;
        let mut phase2 = train_config.clone();
        phase2.epochs = config.retrain_epochs;
        phase2.quantizer = config.quantizer;
        let h2 = retrain_decoder(&mut model, &split.train, &phase2)?;
        h.losses.extend(h2.losses);
        h.best_loss = h2.best_loss.min(h.best_loss);
        h
    } else {
        let mut cfg = train_config.clone();
        cfg.quantizer = config.quantizer;
        train(&mut model, &split.train, &cfg)?
    };

    let mut nmse = Vec::new();
    let mut entropy = Vec::new();
    let bits_grid: Vec<Option<u8>> = if config.eval_bits.is_empty() {
        vec![None]
    } else {
        config.eval_bits.iter().copied().map(Some).collect()
    };
    for &b in &bits_grid {
        if let Some(b) = b {
            let mut spec = model.variant.quantizer;
            spec.bits = b;
            model = model.with_quantizer(spec)?;
            if spec.kind == QuantizerKind::MuLaw {
                calibrate_mu_law(&mut model, &split.train)?;
            }
        }
        for &n in &config.eval_n {
            let v = evaluate_nmse(&mut model, &split.test, n)?;
            nmse.push(GridEntry { n, b, value: v });
            if let Some(e) = evaluate_entropy(&mut model, &split.test, n)? {
                entropy.push(GridEntry { n, b, value: e });
            }
        }
    }

    let net_config = model.config.clone();
    let fc_flops = config
        .eval_n
        .iter()
        .map(|&l| {
            let (e, d) = fc_flops_at_length(&net_config, l);
            FlopsEntry { active_len: l, encoder_fc_flops: e, decoder_fc_flops: d }
        })
        .collect();
    let codeword_stats = codeword_statistics(&mut model, &split.test)?;

    let result = ExperimentResult {
        schema_version: RESULT_SCHEMA_VERSION,
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        nmse_db: nmse,
        entropy_bits: entropy,
        param_breakdown: count_params(&net_config),
        fc_flops,
        codeword_stats,
        history_final_loss: history.losses.last().copied().unwrap_or(0.0),
        history_best_loss: history.best_loss,
    };

    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("result.json"), serde_json::to_vec_pretty(&result)?)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in history.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    fs::write(out_dir.join("history.csv"), csv)?;
    save_checkpoint(&out_dir.join("checkpoint.bin"), &model)?;
    Ok(result)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Render the parameter-accounting table for both families at full
/// scale (exact integers).
pub fn render_param_table() -> String {
    let mut out = String::new();
    out.push_str("Trainable parameters by codeword length M\n");
    for (name, ms, build) in [
        (
            "CsiNetPro",
            vec![32usize, 64, 128, 256, 512],
            crate::models::build_csinetpro as fn(usize, ModelScale) -> Result<_, ModelError>,
        ),
        ("DualNetSph", vec![16, 32, 64, 128, 256], crate::models::build_dualnetsph),
    ] {
        out.push_str(&format!("{name}\n  M:       "));
        let breakdowns: Vec<ParamBreakdown> =
            ms.iter().map(|&m| count_params(&build(m, ModelScale::Full).unwrap())).collect();
        for m in &ms {
            out.push_str(&format!("{m:>10}"));
        }
        out.push_str("\n  Encoder: ");
        for b in &breakdowns {
            out.push_str(&format!("{:>10}", b.encoder_total));
        }
        out.push_str("\n  Decoder: ");
        for b in &breakdowns {
            out.push_str(&format!("{:>10}", b.decoder_total));
        }
        out.push_str("\n  Total:   ");
        for b in &breakdowns {
            out.push_str(&format!("{:>10}", b.total));
        }
        out.push('\n');
    }
    out
}

/// Render the storage comparison between a bank of fixed-rate networks
/// and one changeable-rate network, with reduction percentages to three
/// decimals.
pub fn render_storage_table() -> String {
    let mut out = String::new();
    out.push_str("Storage: fixed-rate bank vs changeable-rate network\n");
    out.push_str(&format!("{:<18}{:>12}{:>12}{:>12}\n", "Network", "UE", "BS", "Total"));
    for (name, ms, build) in [
        (
            "CsiNetPro",
            vec![32usize, 64, 128, 256, 512],
            crate::models::build_csinetpro as fn(usize, ModelScale) -> Result<_, ModelError>,
        ),
        ("DualNetSph", vec![16, 32, 64, 128, 256], crate::models::build_dualnetsph),
    ] {
        let (mut ue, mut bs) = (0u64, 0u64);
        for &m in &ms {
            let b = count_params(&build(m, ModelScale::Full).unwrap());
            ue += b.encoder_total;
            bs += b.decoder_total;
        }
        let ch = count_params(&build(*ms.last().unwrap(), ModelScale::Full).unwrap());
        out.push_str(&format!("{:<18}{:>12}{:>12}{:>12}\n", name, ue, bs, ue + bs));
        out.push_str(&format!(
            "{:<18}{:>12}{:>12}{:>12}\n",
            format!("CH-{name}"),
            ch.encoder_total,
            ch.decoder_total,
            ch.total
        ));
        let pct = |fixed: u64, chv: u64| (1.0 - chv as f64 / fixed as f64) * 100.0;
        out.push_str(&format!(
            "{:<18}{:>11.3}%{:>11.3}%{:>11.3}%\n",
            "Reduce by",
            pct(ue, ch.encoder_total),
            pct(bs, ch.decoder_total),
            pct(ue + bs, ch.total)
        ));
    }
    out
}

/// NMSE grid sorted by (family, n, b), as human-readable text.
pub fn render_nmse_report(results: &[ExperimentResult]) -> String {
    let mut rows: Vec<(String, usize, i16, f64)> = Vec::new();
    for r in results {
        let family = format!("{:?}", r.config.family);
        for e in &r.nmse_db {
            rows.push((family.clone(), e.n, e.b.map(i16::from).unwrap_or(-1), e.value));
        }
    }
    rows.sort_by(|a, b| (&a.0, a.1, a.2).cmp(&(&b.0, b.1, b.2)));
    let mut out = String::from("family,n,b,nmse_db\n");
    for (f, n, b, v) in rows {
        let b = if b < 0 { "-".to_string() } else { b.to_string() };
        out.push_str(&format!("{f},{n},{b},{v}\n"));
    }
    out
}

/// Machine-readable CSV of every grid entry across results.
pub fn results_to_csv(results: &[ExperimentResult]) -> String {
    let mut out = String::from("family,metric,n,b,value\n");
    for r in results {
        let family = format!("{:?}", r.config.family);
        for (metric, entries) in [("nmse_db", &r.nmse_db), ("entropy_bits", &r.entropy_bits)] {
            for e in entries {
                let b = e.b.map(|b| b.to_string()).unwrap_or_else(|| "-".into());
                out.push_str(&format!("{family},{metric},{},{b},{}\n", e.n, e.value));
            }
        }
    }
    out
}

pub fn emit_report(results: &[ExperimentResult], out: &mut impl Write) -> Result<(), HarnessError> {
    write!(out, "{}", render_param_table())?;
    writeln!(out)?;
    write!(out, "{}", render_storage_table())?;
    writeln!(out)?;
    write!(out, "{}", render_nmse_report(results))?;
    Ok(())
}
