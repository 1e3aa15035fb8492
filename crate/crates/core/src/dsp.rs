//! Deterministic audio front-end.
//!
//! All features share one framing: 25 ms Hann windows (400 samples at
//! 16 kHz) advanced by 10 ms (160 samples), zero-padded to a 512-point FFT.
//! Power spectra are pooled by 40 triangular, area-normalized mel filters
//! spanning 0–8000 Hz. There is no pre-emphasis and no dithering, so every
//! output is a pure function of the input samples.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_MELS: usize = 40;
pub const WIN_LENGTH: usize = 400;
pub const HOP_LENGTH: usize = 160;
pub const N_FFT: usize = 512;
/// Energy floor applied before the logarithm.
pub const ENERGY_FLOOR: f64 = 1e-10;
pub const DEFAULT_CEPSTRA: usize = 13;

/// Mono audio at 16 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            samples: vec![0.0; len],
        }
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|x| x * gain).collect(),
        }
    }
}

/// Row-major `rows × cols` matrix of frame-level values.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FrameMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                expected: format!("{rows}x{cols} = {} values", rows * cols),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Keeps the first `rows` rows.
    pub fn truncated(&self, rows: usize) -> Self {
        let rows = rows.min(self.rows);
        Self {
            rows,
            cols: self.cols,
            data: self.data[..rows * self.cols].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// `T × 40` log mel energies at 100 frames/s.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelFeatures(pub FrameMatrix);

/// `T × K` real cepstra, coefficient 0 excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct CepstralFrames(pub FrameMatrix);

/// `T × 40` linear mel-band energies.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandEnvelopes(pub FrameMatrix);

impl LogMelFeatures {
    pub fn n_frames(&self) -> usize {
        self.0.rows()
    }
    pub fn n_mels(&self) -> usize {
        self.0.cols()
    }
}

impl CepstralFrames {
    pub fn n_frames(&self) -> usize {
        self.0.rows()
    }
}

impl SubbandEnvelopes {
    pub fn n_frames(&self) -> usize {
        self.0.rows()
    }
}

/// Number of analysis frames for a signal of `n_samples` samples.
pub fn frame_count(n_samples: usize) -> Option<usize> {
    (n_samples >= WIN_LENGTH).then(|| 1 + (n_samples - WIN_LENGTH) / HOP_LENGTH)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Edge frequencies (Hz) of `n_mels` triangular filters: `n_mels + 2` points
/// equally spaced on the mel scale between `f_min` and `f_max`.
pub fn mel_edges(n_mels: usize, f_min: f64, f_max: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// STFT + mel filterbank with precomputed window, FFT plan and filter weights.
pub struct MelFrontend {
    n_mels: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    /// `n_mels` rows of `(first_bin, weights)`.
    filters: Vec<(usize, Vec<f64>)>,
}

impl MelFrontend {
    pub fn new(n_mels: usize) -> Result<Self> {
        if n_mels == 0 {
            return Err(Error::Config("n_mels must be positive".into()));
        }
        // Periodic Hann.
        let window = (0..WIN_LENGTH)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / WIN_LENGTH as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        let edges = mel_edges(n_mels, 0.0, SAMPLE_RATE as f64 / 2.0);
        let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
        let n_bins = N_FFT / 2 + 1;
        let filters = (0..n_mels)
            .map(|m| {
                let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let norm = 2.0 / (hi - lo);
                let weights: Vec<(usize, f64)> = (0..n_bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = ((f - lo) / (c - lo)).min((hi - f) / (hi - c));
                        (w > 0.0).then_some((k, w * norm))
                    })
                    .collect();
                let first = weights.first().map_or(0, |&(k, _)| k);
                (first, weights.into_iter().map(|(_, w)| w).collect())
            })
            .collect();
        Ok(Self {
            n_mels,
            window,
            fft,
            filters,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    /// Linear mel energies, `T × n_mels`.
    pub fn mel_energies(&self, w: &Waveform) -> Result<FrameMatrix> {
        let x = w.samples();
        let n_frames = frame_count(x.len()).ok_or(Error::TooShort {
            needed: WIN_LENGTH,
            got: x.len(),
        })?;
        let mut out = FrameMatrix::zeros(n_frames, self.n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; N_FFT / 2 + 1];
        for t in 0..n_frames {
            let frame = &x[t * HOP_LENGTH..t * HOP_LENGTH + WIN_LENGTH];
            for (b, (&s, &win)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *b = Complex::new(s * win, 0.0);
            }
            buf[WIN_LENGTH..].fill(Complex::new(0.0, 0.0));
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, z) in power.iter_mut().zip(&buf) {
                *p = z.norm_sqr();
            }
            for (e, (first, weights)) in out.row_mut(t).iter_mut().zip(&self.filters) {
                *e = weights
                    .iter()
                    .zip(&power[*first..])
                    .map(|(w, p)| w * p)
                    .sum();
            }
        }
        Ok(out)
    }

    pub fn logmel(&self, w: &Waveform) -> Result<LogMelFeatures> {
        let energies = self.mel_energies(w)?;
        Ok(LogMelFeatures(energies.map(|e| e.max(ENERGY_FLOOR).ln())))
    }
}

fn default_frontend() -> &'static MelFrontend {
    static FRONTEND: OnceLock<MelFrontend> = OnceLock::new();
    FRONTEND.get_or_init(|| MelFrontend::new(N_MELS).expect("default mel front-end"))
}

/// 40-band log mel features: `ln(max(energy, 1e-10))` per band and frame.
pub fn logmel_features(w: &Waveform) -> Result<LogMelFeatures> {
    default_frontend().logmel(w)
}

/// Pre-log mel-band energies, framed identically to [`logmel_features`].
pub fn subband_envelopes(w: &Waveform) -> Result<SubbandEnvelopes> {
    default_frontend().mel_energies(w).map(SubbandEnvelopes)
}

/// Orthonormal DCT-II.
pub fn dct_ii(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    (0..x.len())
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n).sqrt()
            } else {
                (2.0 / n).sqrt()
            };
            scale
                * x.iter()
                    .enumerate()
                    .map(|(i, &v)| v * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// Inverse of [`dct_ii`] (orthonormal DCT-III).
pub fn dct_iii(c: &[f64]) -> Vec<f64> {
    let n = c.len() as f64;
    (0..c.len())
        .map(|i| {
            c.iter()
                .enumerate()
                .map(|(k, &v)| {
                    let scale = if k == 0 {
                        (1.0 / n).sqrt()
                    } else {
                        (2.0 / n).sqrt()
                    };
                    scale * v * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos()
                })
                .sum()
        })
        .collect()
}

/// Cepstral coefficients `1..=k` of each log-mel frame.
pub fn cepstra_from_logmel(feats: &LogMelFeatures, k: usize) -> Result<CepstralFrames> {
    let n_mels = feats.n_mels();
    if k == 0 || k >= n_mels {
        return Err(Error::Config(format!(
            "cepstral order must be in 1..{n_mels}, got {k}"
        )));
    }
    let mut out = FrameMatrix::zeros(feats.n_frames(), k);
    for (t, frame) in feats.0.iter_rows().enumerate() {
        let c = dct_ii(frame);
        out.row_mut(t).copy_from_slice(&c[1..=k]);
    }
    Ok(CepstralFrames(out))
}

pub fn cepstral_frames(w: &Waveform, k: usize) -> Result<CepstralFrames> {
    cepstra_from_logmel(&logmel_features(w)?, k)
}
