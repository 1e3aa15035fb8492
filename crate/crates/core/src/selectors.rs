//! Classical channel scorers: Envelope Variance, Cepstral Distance,
//! posterior entropy, SDR, random and closest-microphone selection.
//!
//! Every scorer returns [`ChannelScores`] where higher means better, and the
//! selected channel is the arg-max with ties going to the lowest index.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dsp::{CepstralFrames, FrameMatrix, SubbandEnvelopes, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::ltr::softmax;
use crate::scene::ScenePlacement;

/// SDR values are clipped to ±60 dB.
pub const SDR_CAP_DB: f64 = 60.0;
/// Alignment search range for SDR, ±100 ms.
pub const MAX_ALIGN_LAG: usize = SAMPLE_RATE as usize / 10;
/// Reference and channel cepstra may differ by this many frames before the
/// mismatch is treated as an error rather than truncated away.
pub const MAX_FRAME_SLACK: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScores {
    scores: Vec<f64>,
    method: String,
}

impl ChannelScores {
    pub fn new(scores: Vec<f64>, method: impl Into<String>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("no channel scores"));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite score for channel {i}")));
        }
        Ok(Self {
            scores,
            method: method.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.scores
    }

    pub fn method(&self) -> &str {
        &self.method
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Selected channel: highest score, lowest index on ties.
    pub fn best(&self) -> usize {
        argmax(&self.scores)
    }
}

pub(crate) fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Envelope Variance sub-band weights, stored as logits; the weights are
/// their softmax, so they stay non-negative and sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvWeights {
    pub theta: Vec<f64>,
}

impl EvWeights {
    pub fn uniform(bands: usize) -> Self {
        Self {
            theta: vec![0.0; bands],
        }
    }

    pub fn alpha(&self) -> Vec<f64> {
        softmax(&self.theta)
    }

    pub fn bands(&self) -> usize {
        self.theta.len()
    }
}

/// Normalized per-band envelope variances, `M × B`: entry `[i][b]` is the
/// variance of channel `i`'s cube-root, mean-normalized envelope in band
/// `b`, divided by the largest such variance over channels.
pub fn ev_band_features(envs: &[SubbandEnvelopes]) -> Result<Vec<Vec<f64>>> {
    if envs.is_empty() {
        return Err(Error::invalid("no channels"));
    }
    let bands = envs[0].0.cols();
    if envs.iter().any(|e| e.0.cols() != bands) {
        return Err(Error::invalid(
            "channels disagree on the number of sub-bands",
        ));
    }
    let frames = envs.iter().map(|e| e.n_frames()).min().unwrap_or(0);
    if frames < 2 {
        return Err(Error::invalid(format!(
            "envelope variance needs at least 2 frames, got {frames}"
        )));
    }
    let mut var = vec![vec![0.0; bands]; envs.len()];
    let mut col = vec![0.0; frames];
    for (i, env) in envs.iter().enumerate() {
        for b in 0..bands {
            for (t, c) in col.iter_mut().enumerate() {
                *c = env.0.get(t, b).max(0.0).cbrt();
            }
            let mean = col.iter().sum::<f64>() / frames as f64;
            if mean <= 0.0 {
                continue;
            }
            let n: Vec<f64> = col.iter().map(|c| c / mean).collect();
            let nm = n.iter().sum::<f64>() / frames as f64;
            var[i][b] = n.iter().map(|v| (v - nm) * (v - nm)).sum::<f64>() / frames as f64;
        }
    }
    for b in 0..bands {
        let max = var.iter().map(|v| v[b]).fold(0.0, f64::max);
        for v in var.iter_mut() {
            v[b] = if max > 0.0 { v[b] / max } else { 0.0 };
        }
    }
    Ok(var)
}

pub fn ev_scores_from_features(
    features: &[Vec<f64>],
    weights: &EvWeights,
) -> Result<ChannelScores> {
    let alpha = weights.alpha();
    if features.iter().any(|f| f.len() != alpha.len()) {
        return Err(Error::invalid(format!(
            "EV weights have {} bands, features have {}",
            alpha.len(),
            features.first().map_or(0, Vec::len)
        )));
    }
    let scores = features
        .iter()
        .map(|f| f.iter().zip(&alpha).map(|(v, a)| v * a).sum())
        .collect();
    ChannelScores::new(scores, "ev")
}

pub fn envelope_variance(envs: &[SubbandEnvelopes], weights: &EvWeights) -> Result<ChannelScores> {
    ev_scores_from_features(&ev_band_features(envs)?, weights)
}

/// One utterance for EV weight tuning.
#[derive(Debug, Clone)]
pub struct EvExample {
    /// Output of [`ev_band_features`].
    pub features: Vec<Vec<f64>>,
    /// Oracle-best channel.
    pub best: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for EvTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            epochs: 50,
            seed: 0,
        }
    }
}

/// Cross-entropy between the softmax over channel scores and the oracle
/// channel, with its gradient with respect to the logits `theta`.
fn ev_example_loss(ex: &EvExample, alpha: &[f64]) -> (f64, Vec<f64>) {
    let scores: Vec<f64> = ex
        .features
        .iter()
        .map(|f| f.iter().zip(alpha).map(|(v, a)| v * a).sum())
        .collect();
    let q = softmax(&scores);
    let loss = -q[ex.best].max(f64::MIN_POSITIVE).ln();
    let mut d_alpha = vec![0.0; alpha.len()];
    for (i, f) in ex.features.iter().enumerate() {
        let ds = q[i] - f64::from(u8::from(i == ex.best));
        for (d, v) in d_alpha.iter_mut().zip(f) {
            *d += ds * v;
        }
    }
    let dot: f64 = alpha.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
    let d_theta = alpha
        .iter()
        .zip(&d_alpha)
        .map(|(a, d)| a * (d - dot))
        .collect();
    (loss, d_theta)
}

pub fn ev_dataset_loss(data: &[EvExample], weights: &EvWeights) -> f64 {
    let alpha = weights.alpha();
    data.iter()
        .map(|ex| ev_example_loss(ex, &alpha).0)
        .sum::<f64>()
        / data.len().max(1) as f64
}

/// Tunes EV weights by per-utterance SGD on the best-channel cross-entropy,
/// starting from uniform weights. Returns the weights and the mean dataset
/// loss before training and after each epoch.
pub fn train_ev_weights(data: &[EvExample], cfg: &EvTrainConfig) -> Result<(EvWeights, Vec<f64>)> {
    let first = data
        .first()
        .ok_or_else(|| Error::invalid("EV training set is empty"))?;
    let bands = first.features.first().map_or(0, Vec::len);
    for (u, ex) in data.iter().enumerate() {
        if ex.features.len() < 2 {
            return Err(Error::invalid(format!(
                "EV training utterance {u} has {} channel(s); need at least 2",
                ex.features.len()
            )));
        }
        if ex.best >= ex.features.len() || ex.features.iter().any(|f| f.len() != bands) {
            return Err(Error::invalid(format!(
                "EV training utterance {u} is malformed"
            )));
        }
    }
    let mut weights = EvWeights::uniform(bands);
    let mut history = vec![ev_dataset_loss(data, &weights)];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &u in &order {
            let (_, g) = ev_example_loss(&data[u], &weights.alpha());
            for (t, d) in weights.theta.iter_mut().zip(&g) {
                *t -= cfg.lr * d;
            }
        }
        history.push(ev_dataset_loss(data, &weights));
    }
    Ok((weights, history))
}

/// Frame-averaged cepstral distance to a reference, negated. Without a
/// reference the frame-wise mean cepstrum over channels is used.
pub fn cepstral_distance(
    ceps: &[CepstralFrames],
    reference: Option<&CepstralFrames>,
) -> Result<ChannelScores> {
    if ceps.is_empty() {
        return Err(Error::invalid("no channels"));
    }
    let k = ceps[0].0.cols();
    if ceps.iter().chain(reference).any(|c| c.0.cols() != k) {
        return Err(Error::invalid("cepstral order differs between inputs"));
    }
    let mut frames = ceps.iter().map(|c| c.n_frames()).min().unwrap_or(0);
    let method = if let Some(r) = reference {
        if r.n_frames().abs_diff(frames) > MAX_FRAME_SLACK {
            return Err(Error::Shape {
                expected: format!("reference with {frames} ± {MAX_FRAME_SLACK} frames"),
                got: format!("{} frames", r.n_frames()),
            });
        }
        frames = frames.min(r.n_frames());
        "cd-informed"
    } else {
        "cd-blind"
    };
    if frames == 0 {
        return Err(Error::invalid("no frames to compare"));
    }
    let blind_ref;
    let reference: &FrameMatrix = match reference {
        Some(r) => &r.0,
        None => {
            let mut mean = FrameMatrix::zeros(frames, k);
            for c in ceps {
                for (m, v) in mean.as_mut_slice().iter_mut().zip(c.0.as_slice()) {
                    *m += v / ceps.len() as f64;
                }
            }
            blind_ref = mean;
            &blind_ref
        }
    };
    let scale = 10.0 / std::f64::consts::LN_10;
    let scores = ceps
        .iter()
        .map(|c| {
            let total: f64 = (0..frames)
                .map(|t| {
                    let sq: f64 =
                        c.0.row(t)
                            .iter()
                            .zip(reference.row(t))
                            .map(|(a, b)| (b - a) * (b - a))
                            .sum();
                    scale * (2.0 * sq).sqrt()
                })
                .sum();
            -total / frames as f64
        })
        .collect();
    ChannelScores::new(scores, method)
}

/// Negated mean frame entropy (nats) of each channel's `T × C` posteriors.
pub fn posterior_entropy(posteriors: &[FrameMatrix]) -> Result<ChannelScores> {
    if posteriors.is_empty() {
        return Err(Error::invalid("no channels"));
    }
    let scores = posteriors
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.cols() < 2 || p.rows() == 0 {
                return Err(Error::invalid(format!(
                    "channel {i}: posteriors must be T x C with T >= 1, C >= 2; got {}x{}",
                    p.rows(),
                    p.cols()
                )));
            }
            let mut total = 0.0;
            for (t, row) in p.iter_rows().enumerate() {
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&v| !(v >= 0.0)) {
                    return Err(Error::invalid(format!(
                        "channel {i}, frame {t}: row is not a probability distribution (sum {sum})"
                    )));
                }
                total -= row
                    .iter()
                    .filter(|&&v| v > 0.0)
                    .map(|&v| v * v.ln())
                    .sum::<f64>();
            }
            Ok(-total / p.rows() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    ChannelScores::new(scores, "entropy")
}

fn fft_plans(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    let mut planner = FftPlanner::new();
    (planner.plan_fft_forward(n), planner.plan_fft_inverse(n))
}

/// `r[l] = Σ_n x[n + l] · s[n]` for `l` in `-max_lag..=max_lag`; index
/// `l + max_lag` of the result.
pub fn cross_correlation(x: &[f64], s: &[f64], max_lag: usize) -> Vec<f64> {
    let n = (x.len() + s.len()).max(1).next_power_of_two();
    let (fwd, inv) = fft_plans(n);
    let spectrum = |v: &[f64]| {
        let mut buf: Vec<Complex<f64>> = v.iter().map(|&r| Complex::new(r, 0.0)).collect();
        buf.resize(n, Complex::new(0.0, 0.0));
        fwd.process(&mut buf);
        buf
    };
    let fx = spectrum(x);
    let fs = spectrum(s);
    let mut prod: Vec<Complex<f64>> = fx.iter().zip(&fs).map(|(a, b)| a * b.conj()).collect();
    inv.process(&mut prod);
    let scale = 1.0 / n as f64;
    (-(max_lag as isize)..=max_lag as isize)
        .map(|l| prod[l.rem_euclid(n as isize) as usize].re * scale)
        .collect()
}

/// Lag `l` maximizing `Σ x[n + l] s[n]` within ±`max_lag`.
pub fn best_lag(x: &[f64], s: &[f64], max_lag: usize) -> isize {
    let r = cross_correlation(x, s, max_lag);
    argmax(&r) as isize - max_lag as isize
}

/// Signal-to-distortion ratio in dB after lag alignment and single-gain
/// least-squares projection of the estimate onto the reference.
pub fn sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    let (x, s) = (estimate.samples(), reference.samples());
    if reference.energy() == 0.0 {
        return Err(Error::invalid("SDR reference is all zeros"));
    }
    if x.is_empty() {
        return Err(Error::invalid("SDR estimate is empty"));
    }
    let lag = best_lag(x, s, MAX_ALIGN_LAG);
    let start = (-lag).max(0) as usize;
    let end = (s.len() as isize)
        .min(x.len() as isize - lag)
        .max(start as isize) as usize;
    let s_al = &s[start..end];
    let x_al: Vec<f64> = (start..end)
        .map(|n| x[(n as isize + lag) as usize])
        .collect();
    Ok(sdr_aligned(&x_al, s_al))
}

/// SDR of already aligned, equal-length signals.
pub fn sdr_aligned(x: &[f64], s: &[f64]) -> f64 {
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if ss == 0.0 {
        return -SDR_CAP_DB;
    }
    let alpha = x.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / ss;
    let target = alpha * alpha * ss;
    let residual: f64 = x
        .iter()
        .zip(s)
        .map(|(a, b)| (a - alpha * b) * (a - alpha * b))
        .sum();
    if target == 0.0 {
        return -SDR_CAP_DB;
    }
    if residual == 0.0 {
        return SDR_CAP_DB;
    }
    (10.0 * (target / residual).log10()).clamp(-SDR_CAP_DB, SDR_CAP_DB)
}

pub fn sdr_scores(channels: &[Waveform], reference: &Waveform) -> Result<ChannelScores> {
    let scores = channels
        .iter()
        .map(|c| sdr(c, reference))
        .collect::<Result<Vec<_>>>()?;
    ChannelScores::new(scores, "sdr")
}

/// Scores form a seeded random permutation of `0..m`.
pub fn random_select(m: usize, seed: u64) -> Result<ChannelScores> {
    let mut perm: Vec<f64> = (0..m).map(|i| i as f64).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ChannelScores::new(perm, "random")
}

/// Negated speaker-to-microphone distance.
pub fn closest_select(scene: &ScenePlacement) -> Result<ChannelScores> {
    let scores = scene
        .mic_pos
        .iter()
        .map(|m| -crate::scene::distance(m, &scene.speaker_pos))
        .collect();
    ChannelScores::new(scores, "closest")
}
