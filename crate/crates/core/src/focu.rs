//! Feedback overhead control: truncating the encoder codeword to the
//! current overhead budget, zero-padding it back at the receiver,
//! sampling kept lengths during training, and the changeable-rate loss.

use crate::netcore::{Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FocuError {
    #[error("kept length {n} out of range 0..={m}")]
    LengthOutOfRange { n: usize, m: usize },
    #[error("invalid overhead policy: {0}")]
    InvalidPolicy(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("payload too short or malformed")]
    MalformedPayload,
}

/// A codeword of capacity `m` with the first `active_length` entries
/// meaningful; entries past the active length are exactly zero once the
/// codeword has been zero-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct Codeword {
    pub values: Vec<f64>,
    pub active_length: usize,
    pub quantized: bool,
}

impl Codeword {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len();
        Self { values, active_length: n, quantized: false }
    }

    pub fn capacity(&self) -> usize {
        self.values.len()
    }

    /// The first `active_length` entries.
    pub fn prefix(&self) -> &[f64] {
        &self.values[..self.active_length]
    }
}

/// Keep the first `n` codeword entries and drop the rest from the
/// feedback payload.
pub fn truncate(codeword: &Codeword, n: usize) -> Result<Codeword, FocuError> {
    let m = codeword.capacity();
    if n > m {
        return Err(FocuError::LengthOutOfRange { n, m });
    }
    Ok(Codeword {
        values: codeword.values[..n].to_vec(),
        active_length: n,
        quantized: codeword.quantized,
    })
}

/// Append `m - prefix.len()` exact zeros to restore a full-length
/// codeword at the receiver.
pub fn zero_pad(prefix: &[f64], m: usize) -> Result<Codeword, FocuError> {
    if prefix.len() > m {
        return Err(FocuError::LengthOutOfRange { n: prefix.len(), m });
    }
    let mut values = prefix.to_vec();
    values.resize(m, 0.0);
    Ok(Codeword { values, active_length: prefix.len(), quantized: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "n")]
pub enum OverheadDistribution {
    /// Kept length uniform over `{0, 1, ..., M}`.
    UniformOverM,
    /// Always the same kept length (fixed-rate feedback).
    Fixed(usize),
}

/// How kept lengths are drawn during training, plus per-length loss
/// weights (all ones unless configured otherwise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadPolicy {
    pub m: usize,
    pub distribution: OverheadDistribution,
    /// Loss weight per kept length; length `m + 1`. An empty vector
    /// (the serde default) means all ones.
    #[serde(default)]
    pub weights: Vec<f64>,
}

impl OverheadPolicy {
    pub fn uniform(m: usize) -> Self {
        Self { m, distribution: OverheadDistribution::UniformOverM, weights: vec![1.0; m + 1] }
    }

    pub fn fixed(n: usize, m: usize) -> Self {
        Self { m, distribution: OverheadDistribution::Fixed(n), weights: vec![1.0; m + 1] }
    }

    /// Loss weight for kept length `k`.
    pub fn weight(&self, k: usize) -> f64 {
        if self.weights.is_empty() {
            1.0
        } else {
            self.weights[k]
        }
    }

    pub fn validate(&self) -> Result<(), FocuError> {
        if !self.weights.is_empty() && self.weights.len() != self.m + 1 {
            return Err(FocuError::InvalidPolicy(format!(
                "weights length {} != m + 1 = {}",
                self.weights.len(),
                self.m + 1
            )));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(FocuError::InvalidPolicy("weights must be non-negative".into()));
        }
        if !self.weights.is_empty() && self.weights.iter().all(|&w| w == 0.0) {
            return Err(FocuError::InvalidPolicy("weights must not all be zero".into()));
        }
        if let OverheadDistribution::Fixed(n) = self.distribution {
            if n > self.m {
                return Err(FocuError::LengthOutOfRange { n, m: self.m });
            }
        }
        Ok(())
    }
}

/// Draw one kept length from the policy.
pub fn sample_overhead(policy: &OverheadPolicy, rng: &mut impl Rng) -> usize {
    match policy.distribution {
        OverheadDistribution::Fixed(n) => n,
        OverheadDistribution::UniformOverM => rng.gen_range(0..=policy.m),
    }
}

/// Changeable-rate training loss: one kept length is drawn per sample,
/// the caller reconstructs the batch at those lengths, and the loss is
/// the weighted mean over samples of the per-sample mean squared error.
/// With a `fixed(M)` policy and all-one weights this is exactly the
/// plain fixed-rate MSE (same reduction order).
///
/// Returns the loss and the sampled kept lengths (the caller needs them
/// to run the matching backward pass).
pub fn changeable_rate_loss<R: Real, E>(
    targets: &Tensor<R>,
    policy: &OverheadPolicy,
    rng: &mut impl Rng,
    reconstruct: impl FnOnce(&[usize]) -> Result<Tensor<R>, E>,
) -> Result<(R, Vec<usize>, Tensor<R>), FocuError>
where
    FocuError: From<E>,
{
    policy.validate()?;
    let batch = targets.batch();
    if batch == 0 {
        return Err(FocuError::EmptyBatch);
    }
    let kept: Vec<usize> = (0..batch).map(|_| sample_overhead(policy, rng)).collect();
    let recon = reconstruct(&kept)?;
    assert_eq!(recon.shape, targets.shape, "reconstruction shape mismatch");
    let per_sample = targets.numel() / batch;
    let mut loss = R::zero();
    for bi in 0..batch {
        let lo = bi * per_sample;
        let hi = lo + per_sample;
        let mut acc = R::zero();
        for (t, r) in targets.data[lo..hi].iter().zip(&recon.data[lo..hi]) {
            let d = *t - *r;
            acc += d * d;
        }
        let weight = R::from_f64(policy.weight(kept[bi]));
        loss += weight * acc / R::from_f64(per_sample as f64);
    }
    Ok((loss / R::from_f64(batch as f64), kept, recon))
}

/// Gradient of [`changeable_rate_loss`] with respect to the
/// reconstruction: `2 w_k (recon - target) / (elements * batch)`.
pub fn changeable_rate_loss_grad<R: Real>(
    targets: &Tensor<R>,
    recon: &Tensor<R>,
    kept: &[usize],
    policy: &OverheadPolicy,
) -> Tensor<R> {
    let batch = targets.batch();
    let per_sample = targets.numel() / batch;
    let mut grad = Tensor::zeros(&targets.shape);
    let scale = R::from_f64(2.0 / (per_sample as f64 * batch as f64));
    for bi in 0..batch {
        let weight = R::from_f64(policy.weight(kept[bi]));
        for i in bi * per_sample..(bi + 1) * per_sample {
            grad.data[i] = weight * scale * (recon.data[i] - targets.data[i]);
        }
    }
    grad
}

/// Unquantized debug payload: `n` as a little-endian `u16` followed by
/// `n` little-endian `f32` values.
pub fn encode_debug_payload(codeword: &Codeword) -> Vec<u8> {
    let n = codeword.active_length as u16;
    let mut out = Vec::with_capacity(2 + 4 * codeword.active_length);
    out.extend_from_slice(&n.to_le_bytes());
    for &v in codeword.prefix() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_debug_payload(bytes: &[u8], m: usize) -> Result<Codeword, FocuError> {
    if bytes.len() < 2 {
        return Err(FocuError::MalformedPayload);
    }
    let n = u16::from_le_bytes([bytes[0], bytes[1]]) as usize;
    if n > m || bytes.len() != 2 + 4 * n {
        return Err(FocuError::MalformedPayload);
    }
    let mut prefix = Vec::with_capacity(n);
    for i in 0..n {
        let b = &bytes[2 + 4 * i..2 + 4 * (i + 1)];
        prefix.push(f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])));
    }
    zero_pad(&prefix, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::convert::Infallible;

    impl From<Infallible> for FocuError {
        fn from(e: Infallible) -> Self {
            match e {}
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn truncate_examples() {
        let c = Codeword::new((1..=8).map(f64::from).collect());
        let t = truncate(&c, 3).unwrap();
        assert_eq!(t.prefix(), &[1.0, 2.0, 3.0]);
        assert_eq!(t.active_length, 3);
        let full = truncate(&c, 8).unwrap();
        assert_eq!(full.values, c.values);
        let empty = truncate(&c, 0).unwrap();
        assert!(empty.prefix().is_empty());
        assert!(truncate(&c, 9).is_err());
    }

    #[test]
    fn zero_pad_examples() {
        let c = zero_pad(&[1.0, 2.0, 3.0], 8).unwrap();
        assert_eq!(c.values, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(c.active_length, 3);
        assert_eq!(zero_pad(&[], 4).unwrap().values, vec![0.0; 4]);
        let id = zero_pad(&[5.0, 6.0], 2).unwrap();
        assert_eq!(id.values, vec![5.0, 6.0]);
        assert!(zero_pad(&[1.0; 3], 2).is_err());
    }

    #[test]
    fn truncate_zero_pad_round_trip_exhaustive() {
        let m = 6;
        let c = Codeword::new((0..m).map(|i| 0.5 + i as f64).collect());
        for n in 0..=m {
            let rt = zero_pad(truncate(&c, n).unwrap().prefix(), m).unwrap();
            for i in 0..m {
                let expected = if i < n { c.values[i] } else { 0.0 };
                assert_eq!(rt.values[i], expected, "n={n} i={i}");
            }
        }
    }

    #[test]
    fn fixed_policy_always_returns_n() {
        let policy = OverheadPolicy::fixed(17, 32);
        let mut r = rng(0);
        for _ in 0..100 {
            assert_eq!(sample_overhead(&policy, &mut r), 17);
        }
    }

    #[test]
    fn uniform_policy_frequencies_within_three_sigma() {
        let m = 7usize;
        let policy = OverheadPolicy::uniform(m);
        let draws = 1_000_000usize;
        let mut counts = vec![0usize; m + 1];
        let mut r = rng(42);
        for _ in 0..draws {
            counts[sample_overhead(&policy, &mut r)] += 1;
        }
        let p = 1.0 / (m + 1) as f64;
        let sigma = (p * (1.0 - p) * draws as f64).sqrt();
        for (n, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - p * draws as f64).abs();
            assert!(dev <= 3.0 * sigma, "n={n}: count {c} deviates {dev} > 3 sigma {sigma}");
        }
    }

    #[test]
    fn uniform_policy_degenerate_m_zero() {
        let policy = OverheadPolicy::uniform(0);
        let mut r = rng(1);
        for _ in 0..10 {
            assert_eq!(sample_overhead(&policy, &mut r), 0);
        }
    }

    #[test]
    fn policy_validation() {
        assert!(OverheadPolicy::uniform(4).validate().is_ok());
        assert!(OverheadPolicy::fixed(5, 4).validate().is_err());
        let mut p = OverheadPolicy::uniform(2);
        p.weights = vec![0.0; 3];
        assert!(p.validate().is_err());
        p.weights = vec![1.0, -1.0, 1.0];
        assert!(p.validate().is_err());
        p.weights = vec![1.0, 1.0];
        assert!(p.validate().is_err());
    }

    #[test]
    fn loss_zero_for_identity_model() {
        let targets = Tensor::from_vec(&[2, 3], vec![0.1f64, 0.4, -0.2, 0.9, 0.0, 0.3]);
        let policy = OverheadPolicy::uniform(8);
        let (loss, kept, _) = changeable_rate_loss(&targets, &policy, &mut rng(3), |_| {
            Ok::<_, Infallible>(targets.clone())
        })
        .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn loss_closed_form_for_zero_model() {
        let targets = Tensor::from_vec(&[2, 2], vec![0.2f64, 0.6, 1.0, 0.0]);
        let policy = OverheadPolicy::uniform(4);
        let (loss, _, _) = changeable_rate_loss(&targets, &policy, &mut rng(4), |_| {
            Ok::<_, Infallible>(Tensor::zeros(&targets.shape))
        })
        .unwrap();
        let expected = ((0.2f64.powi(2) + 0.6f64.powi(2)) / 2.0 + (1.0f64 + 0.0) / 2.0) / 2.0;
        assert!((loss - expected).abs() < 1e-15);
    }

    #[test]
    fn fixed_full_length_policy_is_plain_mse_bitwise() {
        let mut r = rng(5);
        let n = 24;
        let targets =
            Tensor::from_vec(&[4, 6], (0..n).map(|_| r.gen_range(-1.0..1.0f64)).collect());
        let recon = Tensor::from_vec(&[4, 6], (0..n).map(|_| r.gen_range(-1.0..1.0f64)).collect());
        let policy = OverheadPolicy::fixed(16, 16);
        let (loss, kept, _) = changeable_rate_loss(&targets, &policy, &mut rng(6), |_| {
            Ok::<_, Infallible>(recon.clone())
        })
        .unwrap();
        assert!(kept.iter().all(|&k| k == 16));
        // Plain MSE with identical reduction order: per-sample mean, then
        // batch mean.
        let mut plain = 0.0f64;
        for bi in 0..4 {
            let mut acc = 0.0;
            for i in bi * 6..(bi + 1) * 6 {
                let d = targets.data[i] - recon.data[i];
                acc += d * d;
            }
            plain += 1.0 * acc / 6.0;
        }
        plain /= 4.0;
        assert_eq!(loss, plain);
    }

    #[test]
    fn loss_rejects_empty_batch() {
        let targets = Tensor::<f64>::zeros(&[0, 4]);
        let policy = OverheadPolicy::uniform(4);
        let err = changeable_rate_loss(&targets, &policy, &mut rng(7), |_| {
            Ok::<_, Infallible>(Tensor::zeros(&[0, 4]))
        });
        assert!(matches!(err, Err(FocuError::EmptyBatch)));
    }

    #[test]
    fn loss_gradient_matches_finite_difference() {
        let targets = Tensor::from_vec(&[2, 3], vec![0.3f64, -0.1, 0.7, 0.2, 0.9, -0.4]);
        let mut recon = Tensor::from_vec(&[2, 3], vec![0.1f64, 0.2, 0.5, -0.3, 0.8, 0.1]);
        let policy = OverheadPolicy::uniform(8);
        let kept = vec![3usize, 8];
        let loss_of = |r: &Tensor<f64>| {
            let mut loss = 0.0;
            for bi in 0..2 {
                let mut acc = 0.0;
                for i in bi * 3..(bi + 1) * 3 {
                    let d = targets.data[i] - r.data[i];
                    acc += d * d;
                }
                loss += policy.weights[kept[bi]] * acc / 3.0;
            }
            loss / 2.0
        };
        let grad = changeable_rate_loss_grad(&targets, &recon, &kept, &policy);
        let eps = 1e-6;
        for i in 0..recon.numel() {
            let orig = recon.data[i];
            recon.data[i] = orig + eps;
            let lp = loss_of(&recon);
            recon.data[i] = orig - eps;
            let lm = loss_of(&recon);
            recon.data[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((grad.data[i] - fd).abs() < 1e-8, "i={i}: {} vs {fd}", grad.data[i]);
        }
    }

    #[test]
    fn debug_payload_round_trip_and_layout() {
        let c = zero_pad(&[1.5, -2.25], 5).unwrap();
        let bytes = encode_debug_payload(&c);
        assert_eq!(bytes.len(), 2 + 8);
        assert_eq!(&bytes[..2], &2u16.to_le_bytes());
        assert_eq!(&bytes[2..6], &1.5f32.to_le_bytes());
        assert_eq!(&bytes[6..10], &(-2.25f32).to_le_bytes());
        let decoded = decode_debug_payload(&bytes, 5).unwrap();
        assert_eq!(decoded.values, vec![1.5, -2.25, 0.0, 0.0, 0.0]);
        assert!(decode_debug_payload(&bytes[..5], 5).is_err());
        assert!(decode_debug_payload(&bytes, 1).is_err());
    }
}
