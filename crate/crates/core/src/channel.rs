//! Synthetic bidirectional channel generation, spatial-frequency to
//! angular-delay transforms, normalization and dataset persistence.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const DATASET_MAGIC: &[u8; 4] = b"VRCD";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("normalization error: {0}")]
    Normalization(String),
    #[error("dataset format error: {0}")]
    Format(String),
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Indoor,
    Outdoor,
}

impl Scenario {
    /// Delay spread as a fraction of the retained delay window. The
    /// scenario only selects a path-count/delay-spread preset.
    fn delay_spread_fraction(self) -> f64 {
        match self {
            Scenario::Indoor => 0.12,
            Scenario::Outdoor => 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Transmit antennas (ULA, half-wavelength spacing).
    pub n_t: usize,
    /// Subcarriers.
    pub n_s: usize,
    /// Retained delay rows after truncation.
    pub n_s_kept: usize,
    pub num_paths: usize,
    pub sample_count: usize,
    pub scenario: Scenario,
    pub master_seed: u64,
}

impl DatasetConfig {
    /// Full-scale dimensions used for complexity accounting.
    pub fn full_scale(scenario: Scenario, sample_count: usize, master_seed: u64) -> Self {
        Self { n_t: 32, n_s: 1024, n_s_kept: 32, num_paths: 20, sample_count, scenario, master_seed }
    }

    /// Toy dimensions used by the fast test paths.
    pub fn toy(scenario: Scenario, sample_count: usize, master_seed: u64) -> Self {
        Self { n_t: 16, n_s: 64, n_s_kept: 16, num_paths: 8, sample_count, scenario, master_seed }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.n_t < 1 {
            return Err(ChannelError::Config("n_t must be >= 1".into()));
        }
        if self.n_s_kept > self.n_s {
            return Err(ChannelError::Config(format!(
                "n_s_kept ({}) must not exceed n_s ({})",
                self.n_s_kept, self.n_s
            )));
        }
        if self.num_paths < 1 {
            return Err(ChannelError::Config("num_paths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Paired downlink/uplink spatial-frequency channel matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub downlink: Array2<Complex64>,
    pub uplink: Array2<Complex64>,
    pub scenario: Scenario,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub samples: Vec<ChannelSample>,
}

/// Generate a deterministic multipath dataset. Each sample sums
/// `num_paths` specular paths with exponentially decaying delay power,
/// delays confined to the first `n_s_kept` delay bins and ULA steering
/// over `n_t` antennas. The uplink shares path geometry with the
/// downlink but redraws phases and perturbs gain magnitudes.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset, ChannelError> {
    config.validate()?;
    let samples = (0..config.sample_count)
        .map(|idx| generate_sample(config, idx as u64))
        .collect();
    Ok(Dataset { config: *config, samples })
}

fn generate_sample(config: &DatasetConfig, index: u64) -> ChannelSample {
    let mut rng = ChaCha8Rng::seed_from_u64(config.master_seed);
    rng.set_stream(index.wrapping_add(1));
    let seed = rng.gen::<u64>();

    let spread = config.scenario.delay_spread_fraction() * config.n_s_kept as f64;
    let delay_cap = (0.6 * config.n_s_kept as f64).floor();

    let mut downlink = Array2::<Complex64>::zeros((config.n_s, config.n_t));
    let mut uplink = Array2::<Complex64>::zeros((config.n_s, config.n_t));

    for _ in 0..config.num_paths {
        // Path geometry shared by both link directions. Delays sit near
        // integer delay bins (small sub-bin jitter) so that DFT leakage
        // outside the retained rows stays negligible.
        let sin_theta: f64 = rng.gen_range(-1.0..1.0);
        let raw = spread * rng.sample::<f64, _>(Exp1);
        let bin = raw.floor().min(delay_cap - 2.0) + 2.0;
        let delay_bins = bin + rng.gen_range(-0.1..0.1);
        let power = (-(bin - 2.0) / spread.max(1e-9)).exp() / config.num_paths as f64;
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        let gain_d = Complex64::new(re, im) * (power / 2.0).sqrt();
        // Uplink: correlated magnitude, independent phase.
        let mag_jitter: f64 = StandardNormal.sample(&mut rng);
        let phase_u: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let gain_u = Complex64::from_polar(gain_d.norm() * (1.0 + 0.1 * mag_jitter).abs(), phase_u);

        let tau = delay_bins / config.n_s as f64;
        for s in 0..config.n_s {
            let delay_phase = Complex64::from_polar(1.0, std::f64::consts::TAU * s as f64 * tau);
            for t in 0..config.n_t {
                let steer =
                    Complex64::from_polar(1.0, -std::f64::consts::PI * t as f64 * sin_theta);
                let atom = delay_phase * steer;
                downlink[(s, t)] += gain_d * atom;
                uplink[(s, t)] += gain_u * atom;
            }
        }
    }

    ChannelSample { downlink, uplink, scenario: config.scenario, seed }
}

fn fft_columns(h: &Array2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let (rows, cols) = h.dim();
    let mut planner = FftPlanner::new();
    let fft = if inverse { planner.plan_fft_inverse(rows) } else { planner.plan_fft_forward(rows) };
    let scale = 1.0 / (rows as f64).sqrt();
    let mut out = h.clone();
    let mut buf = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            buf[r] = out[(r, c)];
        }
        fft.process(&mut buf);
        for r in 0..rows {
            out[(r, c)] = buf[r] * scale;
        }
    }
    out
}

fn fft_rows(h: &Array2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let (rows, cols) = h.dim();
    let mut planner = FftPlanner::new();
    let fft = if inverse { planner.plan_fft_inverse(cols) } else { planner.plan_fft_forward(cols) };
    let scale = 1.0 / (cols as f64).sqrt();
    let mut out = h.clone();
    for r in 0..rows {
        let mut row: Vec<Complex64> = (0..cols).map(|c| out[(r, c)]).collect();
        fft.process(&mut row);
        for c in 0..cols {
            out[(r, c)] = row[c] * scale;
        }
    }
    out
}

/// 2-D DFT to the angular-delay domain with delay truncation:
/// `H = F_d H~ F_a^H` keeping the first `n_s_kept` rows. Both DFT
/// matrices are unitary-normalized.
pub fn to_angular_delay(
    h_sf: &Array2<Complex64>,
    n_s_kept: usize,
) -> Result<Array2<Complex64>, ChannelError> {
    let (n_s, _) = h_sf.dim();
    if n_s_kept > n_s {
        return Err(ChannelError::Dimension(format!("n_s_kept {n_s_kept} exceeds n_s {n_s}")));
    }
    let full = fft_rows(&fft_columns(h_sf, false), true);
    Ok(full.slice(ndarray::s![..n_s_kept, ..]).to_owned())
}

/// Inverse of [`to_angular_delay`]: zero-pad the truncated delay rows
/// back to `n_s` and apply the inverse transforms.
pub fn from_angular_delay(
    h_ad: &Array2<Complex64>,
    n_s: usize,
) -> Result<Array2<Complex64>, ChannelError> {
    let (rows, cols) = h_ad.dim();
    if rows > n_s {
        return Err(ChannelError::Dimension(format!("matrix has {rows} rows, target n_s is {n_s}")));
    }
    let mut padded = Array2::<Complex64>::zeros((n_s, cols));
    padded.slice_mut(ndarray::s![..rows, ..]).assign(h_ad);
    Ok(fft_rows(&fft_columns(&padded, true), false))
}

/// Per-dataset affine normalization parameters mapping real and
/// imaginary parts jointly into [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub offset: f64,
    pub scale: f64,
}

impl NormParams {
    pub fn apply(&self, v: f64) -> f64 {
        (v + self.offset) / self.scale
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.scale - self.offset
    }
}

/// Compute normalization statistics over the real and imaginary parts of
/// a set of matrices (the training split).
pub fn compute_norm_params(matrices: &[Array2<Complex64>]) -> Result<NormParams, ChannelError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for m in matrices {
        for v in m.iter() {
            lo = lo.min(v.re).min(v.im);
            hi = hi.max(v.re).max(v.im);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Err(ChannelError::Normalization("no finite values in dataset".into()));
    }
    if hi - lo <= 0.0 {
        return Err(ChannelError::Normalization("zero dynamic range".into()));
    }
    Ok(NormParams { offset: -lo, scale: hi - lo })
}

/// Real-valued variant of [`compute_norm_params`], used for magnitude
/// matrices.
pub fn compute_norm_params_real(matrices: &[Array2<f64>]) -> Result<NormParams, ChannelError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for m in matrices {
        for &v in m.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Err(ChannelError::Normalization("no finite values in dataset".into()));
    }
    if hi - lo <= 0.0 {
        return Err(ChannelError::Normalization("zero dynamic range".into()));
    }
    Ok(NormParams { offset: -lo, scale: hi - lo })
}

/// Truncated angular-delay matrix in normalized form together with the
/// de-normalization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularDelayChannel {
    pub matrix: Array2<Complex64>,
    pub norm_offset: f64,
    pub norm_scale: f64,
}

pub fn normalize(h: &Array2<Complex64>, params: &NormParams) -> AngularDelayChannel {
    let matrix = h.mapv(|v| Complex64::new(params.apply(v.re), params.apply(v.im)));
    AngularDelayChannel { matrix, norm_offset: params.offset, norm_scale: params.scale }
}

pub fn denormalize(h: &AngularDelayChannel) -> Array2<Complex64> {
    let params = NormParams { offset: h.norm_offset, scale: h.norm_scale };
    h.matrix.mapv(|v| Complex64::new(params.invert(v.re), params.invert(v.im)))
}

/// Elementwise polar decomposition. Zero elements map to (0, 0).
pub fn to_polar(h: &Array2<Complex64>) -> (Array2<f64>, Array2<f64>) {
    let mag = h.mapv(|v| v.norm());
    let phase = h.mapv(|v| if v.norm() == 0.0 { 0.0 } else { v.arg() });
    (mag, phase)
}

fn write_matrix(w: &mut impl Write, m: &Array2<Complex64>) -> io::Result<()> {
    for v in m.iter() {
        w.write_all(&(v.re as f32).to_le_bytes())?;
        w.write_all(&(v.im as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_matrix(r: &mut impl Read, rows: usize, cols: usize) -> Result<Array2<Complex64>, ChannelError> {
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf)?;
    let mut m = Array2::<Complex64>::zeros((rows, cols));
    for (i, v) in m.iter_mut().enumerate() {
        let re = f32::from_le_bytes(buf[i * 8..i * 8 + 4].try_into().unwrap());
        let im = f32::from_le_bytes(buf[i * 8 + 4..i * 8 + 8].try_into().unwrap());
        *v = Complex64::new(f64::from(re), f64::from(im));
    }
    Ok(m)
}

/// Persist a dataset: magic, format version, JSON-serialized config,
/// then per sample the seed and the downlink/uplink matrices as
/// little-endian f32 interleaved real/imag values in row-major order.
pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<(), ChannelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    let config_json = serde_json::to_vec(&dataset.config)
        .map_err(|e| ChannelError::Format(e.to_string()))?;
    w.write_all(&(config_json.len() as u32).to_le_bytes())?;
    w.write_all(&config_json)?;
    for s in &dataset.samples {
        w.write_all(&s.seed.to_le_bytes())?;
        write_matrix(&mut w, &s.downlink)?;
        write_matrix(&mut w, &s.uplink)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, ChannelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(ChannelError::Format("bad magic bytes".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != DATASET_VERSION {
        return Err(ChannelError::Version(version));
    }
    r.read_exact(&mut word)?;
    let config_len = u32::from_le_bytes(word) as usize;
    let mut config_json = vec![0u8; config_len];
    r.read_exact(&mut config_json)?;
    let config: DatasetConfig = serde_json::from_slice(&config_json)
        .map_err(|e| ChannelError::Format(e.to_string()))?;
    config.validate()?;
    let mut samples = Vec::with_capacity(config.sample_count);
    for _ in 0..config.sample_count {
        let mut seed_buf = [0u8; 8];
        r.read_exact(&mut seed_buf)?;
        let seed = u64::from_le_bytes(seed_buf);
        let downlink = read_matrix(&mut r, config.n_s, config.n_t)?;
        let uplink = read_matrix(&mut r, config.n_s, config.n_t)?;
        samples.push(ChannelSample { downlink, uplink, scenario: config.scenario, seed });
    }
    Ok(Dataset { config, samples })
}

/// Fraction of angular-delay energy retained in the first `n_s_kept`
/// delay rows of a spatial-frequency matrix.
pub fn retained_energy_fraction(h_sf: &Array2<Complex64>, n_s_kept: usize) -> Result<f64, ChannelError> {
    let (n_s, _) = h_sf.dim();
    let full = to_angular_delay(h_sf, n_s)?;
    let total: f64 = full.iter().map(|v| v.norm_sqr()).sum();
    let kept: f64 = full.slice(ndarray::s![..n_s_kept, ..]).iter().map(|v| v.norm_sqr()).sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok(kept / total)
}
