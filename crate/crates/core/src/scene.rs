//! Synthetic rooms with one talker, one point noise source and a set of
//! cardioid microphones, rendered with a CPU image-source model.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::selectors;

pub const SPEED_OF_SOUND: f64 = 343.0;
pub const ROOM_HEIGHT: f64 = 2.7;
/// Rejection sampling gives up after this many placements.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

pub type Vec3 = [f64; 3];

pub fn distance(a: &Vec3, b: &Vec3) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub t60: f64,
}

impl RoomSpec {
    pub fn dims(&self) -> Vec3 {
        [self.length, self.width, self.height]
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        p.iter().zip(self.dims()).all(|(&x, d)| x > 0.0 && x < d)
    }

    pub fn wall_distance(&self, p: &Vec3) -> f64 {
        p.iter()
            .zip(self.dims())
            .map(|(&x, d)| x.min(d - x))
            .fold(f64::INFINITY, f64::min)
    }

    /// Uniform wall absorption coefficient from Sabine's formula, clamped to 1.
    pub fn sabine_absorption(&self) -> f64 {
        let (l, w, h) = (self.length, self.width, self.height);
        let volume = l * w * h;
        let surface = 2.0 * (l * w + l * h + w * h);
        (0.161 * volume / (surface * self.t60)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePlacement {
    pub speaker_pos: Vec3,
    pub noise_pos: Vec3,
    pub mic_pos: Vec<Vec3>,
    pub mic_orient: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub room: RoomSpec,
    pub placement: ScenePlacement,
}

/// Sampling ranges and rendering options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub n_mics: usize,
    pub area_range: (f64, f64),
    pub t60_range: (f64, f64),
    pub height: f64,
    /// Minimum distance from the talker to any microphone or wall, and
    /// between microphones.
    pub min_distance: f64,
    /// Longest-to-shortest side ratio of the floor.
    pub max_aspect: f64,
    pub speaker_height: (f64, f64),
    pub mic_height: (f64, f64),
    pub max_order: usize,
    pub snr_db: (f64, f64),
    /// When false the point noise source is muted.
    pub noise: bool,
    pub duration_s: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_mics: 8,
            area_range: (10.0, 60.0),
            t60_range: (0.2, 0.6),
            height: ROOM_HEIGHT,
            min_distance: 0.5,
            max_aspect: 2.0,
            speaker_height: (1.2, 1.9),
            mic_height: (0.6, 2.2),
            max_order: 20,
            snr_db: (5.0, 20.0),
            noise: true,
            duration_s: 2.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        let checks = [
            (self.n_mics >= 1, "n_mics must be at least 1"),
            (
                range_ok(self.area_range) && self.area_range.0 > 0.0,
                "bad area_range",
            ),
            (
                range_ok(self.t60_range) && self.t60_range.0 > 0.0,
                "bad t60_range",
            ),
            (self.height > 0.0, "height must be positive"),
            (
                self.min_distance >= 0.0,
                "min_distance must be non-negative",
            ),
            (self.max_aspect >= 1.0, "max_aspect must be at least 1"),
            (range_ok(self.speaker_height), "bad speaker_height"),
            (range_ok(self.mic_height), "bad mic_height"),
            (range_ok(self.snr_db), "bad snr_db"),
            (self.duration_s > 0.0, "duration_s must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config(format!("scene: {msg}"))),
            None => Ok(()),
        }
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * SAMPLE_RATE as f64).round() as usize
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v: Vec3 = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = dot(&v, &v).sqrt();
        if n > 1e-9 {
            return v.map(|x| x / n);
        }
    }
}

fn placement_ok(room: &RoomSpec, p: &ScenePlacement, min_d: f64) -> bool {
    let all = std::iter::once(&p.speaker_pos)
        .chain(std::iter::once(&p.noise_pos))
        .chain(&p.mic_pos);
    if !all.clone().all(|q| room.contains(q)) {
        return false;
    }
    if room.wall_distance(&p.speaker_pos) < min_d {
        return false;
    }
    for (i, m) in p.mic_pos.iter().enumerate() {
        if distance(m, &p.speaker_pos) < min_d || distance(m, &p.noise_pos) < min_d {
            return false;
        }
        if p.mic_pos[..i].iter().any(|o| distance(o, m) < min_d) {
            return false;
        }
    }
    true
}

fn sample_room(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> RoomSpec {
    let area = uniform(rng, cfg.area_range);
    let aspect = uniform(rng, (1.0, cfg.max_aspect));
    let length = (area * aspect).sqrt();
    RoomSpec {
        length,
        width: area / length,
        height: cfg.height,
        t60: uniform(rng, cfg.t60_range),
    }
}

fn sample_point(rng: &mut ChaCha8Rng, room: &RoomSpec, margin: f64, z: (f64, f64)) -> Vec3 {
    let x = uniform(rng, (margin, room.length - margin));
    let y = uniform(rng, (margin, room.width - margin));
    [x, y, uniform(rng, z)]
}

pub fn sample_scene_with(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = sample_room(&mut rng, cfg);
    // Small inset so nothing lands exactly on a wall.
    let inset = 0.05;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let speaker_pos = sample_point(&mut rng, &room, cfg.min_distance, cfg.speaker_height);
        let noise_pos = sample_point(&mut rng, &room, inset, (inset, room.height - inset));
        let mic_pos = (0..cfg.n_mics)
            .map(|_| sample_point(&mut rng, &room, inset, cfg.mic_height))
            .collect();
        let mic_orient = (0..cfg.n_mics).map(|_| unit_vector(&mut rng)).collect();
        let placement = ScenePlacement {
            speaker_pos,
            noise_pos,
            mic_pos,
            mic_orient,
        };
        if placement_ok(&room, &placement, cfg.min_distance) {
            return Ok(Scene { room, placement });
        }
    }
    Err(Error::SceneSampling {
        attempts: MAX_PLACEMENT_ATTEMPTS,
    })
}

pub fn sample_scene(seed: u64) -> Result<Scene> {
    sample_scene_with(seed, &SceneConfig::default())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
}

/// Cardioid gain for a wave arriving from `from` at a microphone at `mic`
/// facing `orient`.
pub fn cardioid_gain(mic: &Vec3, orient: &Vec3, from: &Vec3) -> f64 {
    let d = distance(mic, from);
    if d == 0.0 {
        return 1.0;
    }
    let dir = [from[0] - mic[0], from[1] - mic[1], from[2] - mic[2]].map(|x| x / d);
    0.5 * (1.0 + dot(orient, &dir))
}

/// Image-source room impulse response with absorption `absorption` on every
/// wall. `absorption = None` derives it from the room's T60.
pub fn image_source_rir_with(
    room: &RoomSpec,
    src: &Vec3,
    mic: &Vec3,
    orient: &Vec3,
    max_order: usize,
    absorption: Option<f64>,
) -> Result<Rir> {
    if !room.contains(src) || !room.contains(mic) {
        return Err(Error::invalid(
            "source and microphone must lie inside the room",
        ));
    }
    let alpha = absorption.unwrap_or_else(|| room.sabine_absorption());
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("absorption {alpha} outside [0, 1]")));
    }
    let beta = (1.0 - alpha).sqrt();
    let dims = room.dims();
    let order = max_order as i64;
    // Image coordinate along one axis for image index i (|i| reflections).
    let image = |axis: usize, i: i64| {
        let l = dims[axis];
        if i % 2 == 0 {
            i as f64 * l + src[axis]
        } else {
            (i + 1) as f64 * l - src[axis]
        }
    };
    let fs = SAMPLE_RATE as f64;
    let mut arrivals = Vec::new();
    for ix in -order..=order {
        let rx = ix.abs();
        for iy in -(order - rx)..=(order - rx) {
            let ry = rx + iy.abs();
            for iz in -(order - ry)..=(order - ry) {
                let reflections = ry + iz.abs();
                let amp = beta.powi(reflections as i32);
                if amp == 0.0 {
                    continue;
                }
                let p = [image(0, ix), image(1, iy), image(2, iz)];
                let d = distance(&p, mic);
                let g = cardioid_gain(mic, orient, &p);
                let delay = (d / SPEED_OF_SOUND * fs).round() as usize;
                arrivals.push((delay, amp * g / d));
            }
        }
    }
    let len = arrivals.iter().map(|a| a.0).max().unwrap_or(0) + 1;
    let mut taps = vec![0.0; len];
    for (delay, a) in arrivals {
        taps[delay] += a;
    }
    Ok(Rir {
        taps,
        sample_rate: SAMPLE_RATE,
    })
}

pub fn image_source_rir(
    room: &RoomSpec,
    src: &Vec3,
    mic: &Vec3,
    orient: &Vec3,
    max_order: usize,
) -> Result<Rir> {
    image_source_rir_with(room, src, mic, orient, max_order, None)
}

/// Linear convolution truncated to `x.len()` samples.
pub fn convolve_truncated(x: &[f64], h: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len()];
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let spectrum = |v: &[f64]| {
        let mut buf: Vec<Complex<f64>> = v.iter().map(|&r| Complex::new(r, 0.0)).collect();
        buf.resize(n, Complex::new(0.0, 0.0));
        fwd.process(&mut buf);
        buf
    };
    let mut y: Vec<Complex<f64>> = spectrum(x)
        .iter()
        .zip(&spectrum(h))
        .map(|(a, b)| a * b)
        .collect();
    inv.process(&mut y);
    y[..x.len()].iter().map(|c| c.re / n as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedUtterance {
    pub channels: Vec<Waveform>,
    pub clean_ref: Waveform,
    pub relevance: Vec<f64>,
    pub scene: Scene,
    pub seed: u64,
    /// Noise-to-channel gain; 0 when the noise source is muted.
    pub noise_gain: f64,
    pub snr_db: Option<f64>,
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `logistic(SDR / 10)` per channel; an all-zero channel gets 0.
pub fn proxy_relevance(channels: &[Waveform], clean_ref: &Waveform) -> Result<Vec<f64>> {
    if clean_ref.energy() == 0.0 {
        return Err(Error::invalid("clean reference is silent"));
    }
    if channels.windows(2).any(|w| w[0].len() != w[1].len()) {
        return Err(Error::invalid("channels differ in length"));
    }
    channels
        .iter()
        .map(|c| {
            if c.energy() == 0.0 {
                Ok(0.0)
            } else {
                Ok(logistic(selectors::sdr(c, clean_ref)? / 10.0))
            }
        })
        .collect()
}

fn closest_mic(p: &ScenePlacement) -> usize {
    let neg: Vec<f64> = p
        .mic_pos
        .iter()
        .map(|m| -distance(m, &p.speaker_pos))
        .collect();
    selectors::argmax(&neg)
}

/// Reverberant talker and (unscaled) noise images at every microphone,
/// each truncated to the clean length.
pub(crate) fn render_components(
    clean: &Waveform,
    noise: Option<&Waveform>,
    scene: &Scene,
    max_order: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let p = &scene.placement;
    let mut planner = FftPlanner::new();
    let mut speech = Vec::with_capacity(p.mic_pos.len());
    let mut noisy = vec![vec![0.0; clean.len()]; p.mic_pos.len()];
    for (i, (m, o)) in p.mic_pos.iter().zip(&p.mic_orient).enumerate() {
        let rir = image_source_rir(&scene.room, &p.speaker_pos, m, o, max_order)?;
        speech.push(convolve_truncated(clean.samples(), &rir.taps, &mut planner));
        if let Some(n) = noise {
            if n.len() < clean.len() {
                return Err(Error::invalid("noise source shorter than clean source"));
            }
            let rir = image_source_rir(&scene.room, &p.noise_pos, m, o, max_order)?;
            noisy[i] = convolve_truncated(&n.samples()[..clean.len()], &rir.taps, &mut planner);
        }
    }
    Ok((speech, noisy))
}

/// Renders every microphone signal for `scene`. `noise` must be at least as
/// long as `clean`; `snr_db` is the talker-to-noise ratio at the microphone
/// closest to the talker, ignored when `noise` is `None`.
pub fn render_scene(
    clean: &Waveform,
    noise: Option<(&Waveform, f64)>,
    scene: &Scene,
    max_order: usize,
    seed: u64,
) -> Result<SimulatedUtterance> {
    if clean.energy() == 0.0 {
        return Err(Error::invalid("clean source is silent"));
    }
    let (speech, noisy) = render_components(clean, noise.map(|n| n.0), scene, max_order)?;
    let p = &scene.placement;
    let mut noise_gain = 0.0;
    let mut snr = None;
    if let Some((_, snr_db)) = noise {
        let closest = closest_mic(p);
        let es: f64 = speech[closest].iter().map(|v| v * v).sum();
        let en: f64 = noisy[closest].iter().map(|v| v * v).sum();
        if en > 0.0 && es > 0.0 {
            noise_gain = (es / (en * 10f64.powf(snr_db / 10.0))).sqrt();
            snr = Some(snr_db);
        }
    }
    let mut channels: Vec<Vec<f64>> = speech
        .iter()
        .zip(&noisy)
        .map(|(s, n)| s.iter().zip(n).map(|(a, b)| a + noise_gain * b).collect())
        .collect();
    let peak = channels
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = 0.9 / peak;
        channels.iter_mut().flatten().for_each(|v| *v *= g);
    }
    let channels = channels
        .into_iter()
        .map(Waveform::new)
        .collect::<Result<Vec<_>>>()?;
    let relevance = proxy_relevance(&channels, clean)?;
    Ok(SimulatedUtterance {
        channels,
        clean_ref: clean.clone(),
        relevance,
        scene: scene.clone(),
        seed,
        noise_gain,
        snr_db: snr,
    })
}

/// Two-pole resonator applied in place.
fn resonate(x: &mut [f64], freq: f64, bandwidth: f64) {
    let fs = SAMPLE_RATE as f64;
    let r = (-std::f64::consts::PI * bandwidth / fs).exp();
    let c1 = 2.0 * r * (2.0 * std::f64::consts::PI * freq / fs).cos();
    let c2 = -r * r;
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = *v * (1.0 - r) + c1 * y1 + c2 * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

/// Speech-shaped test signal: syllable-rate bursts of voiced and noisy
/// excitation through random formant filters, separated by short pauses.
pub fn synth_speech(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let mut out = vec![0.0; n];
    let mut pos = (rng.random_range(0.0..0.1) * fs) as usize;
    let f0_base = rng.random_range(90.0..220.0);
    while pos < n {
        let len = (rng.random_range(0.15..0.3) * fs) as usize;
        let f0 = f0_base * rng.random_range(0.85..1.15);
        let voicing = rng.random_range(0.3..1.0);
        let mut phase = 0.0;
        let mut syl: Vec<f64> = (0..len)
            .map(|_| {
                phase += f0 / fs;
                let pulse = if phase >= 1.0 {
                    phase -= 1.0;
                    1.0
                } else {
                    0.0
                };
                let hiss: f64 = StandardNormal.sample(rng);
                voicing * pulse * 8.0 + (1.0 - voicing) * hiss
            })
            .collect();
        let formants = [
            (rng.random_range(300.0..900.0), 90.0),
            (rng.random_range(900.0..2500.0), 140.0),
            (rng.random_range(2400.0..3600.0), 220.0),
        ];
        let src = syl.clone();
        syl.iter_mut().for_each(|v| *v = 0.0);
        for (k, (f, bw)) in formants.into_iter().enumerate() {
            let mut band = src.clone();
            resonate(&mut band, f, bw);
            let gain = 0.5f64.powi(k as i32);
            syl.iter_mut().zip(&band).for_each(|(s, b)| *s += gain * b);
        }
        let amp = rng.random_range(0.3..1.0);
        for (i, v) in syl.iter().enumerate() {
            if pos + i >= n {
                break;
            }
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos();
            out[pos + i] += amp * w * v;
        }
        pos += len + (rng.random_range(0.03..0.15) * fs) as usize;
    }
    normalize_peak(&mut out, 0.5);
    out
}

/// Stationary colored noise with a random low-pass tilt.
pub fn synth_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a = rng.random_range(0.0..0.95);
    let mut prev = 0.0;
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            prev = a * prev + (1.0 - a) * w;
            prev
        })
        .collect();
    normalize_peak(&mut out, 0.5);
    out
}

fn normalize_peak(x: &mut [f64], target: f64) {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / peak);
    }
}

/// Where talker and noise signals come from.
#[derive(Debug, Clone, Default)]
pub enum SourceMaterial {
    #[default]
    Synthetic,
    /// Clips drawn from user recordings, looped or cropped to length.
    Corpus {
        speech: Vec<Waveform>,
        noise: Vec<Waveform>,
    },
}

impl SourceMaterial {
    /// Loads every `.wav` under each directory (sorted by file name).
    /// A missing noise directory falls back to synthetic noise.
    pub fn from_dirs(speech_dir: &Path, noise_dir: Option<&Path>) -> Result<Self> {
        let load = |dir: &Path| -> Result<Vec<Waveform>> {
            let mut paths: Vec<_> = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(Error::invalid(format!(
                    "no .wav files in {}",
                    dir.display()
                )));
            }
            paths.iter().map(crate::wav::read_wav).collect()
        };
        Ok(SourceMaterial::Corpus {
            speech: load(speech_dir)?,
            noise: match noise_dir {
                Some(d) => load(d)?,
                None => Vec::new(),
            },
        })
    }

    fn draw(pool: &[Waveform], n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let clip = pool[rng.random_range(0..pool.len())].samples();
        if clip.is_empty() {
            return vec![0.0; n];
        }
        let offset = if clip.len() > n {
            rng.random_range(0..=clip.len() - n)
        } else {
            0
        };
        (0..n).map(|i| clip[(offset + i) % clip.len()]).collect()
    }

    fn speech(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            SourceMaterial::Synthetic => synth_speech(n, rng),
            SourceMaterial::Corpus { speech, .. } => Self::draw(speech, n, rng),
        }
    }

    fn noise(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            SourceMaterial::Corpus { noise, .. } if !noise.is_empty() => Self::draw(noise, n, rng),
            _ => synth_noise(n, rng),
        }
    }
}

/// Samples a scene and renders one utterance; a pure function of `seed`,
/// `cfg` and `material`.
pub fn simulate_utterance(
    seed: u64,
    cfg: &SceneConfig,
    material: &SourceMaterial,
) -> Result<SimulatedUtterance> {
    let scene = sample_scene_with(seed, cfg)?;
    // Separate stream for audio so scene geometry does not depend on source length.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let n = cfg.n_samples();
    let clean = Waveform::new(material.speech(n, &mut rng))?;
    let noise = Waveform::new(material.noise(n, &mut rng))?;
    let snr = uniform(&mut rng, cfg.snr_db);
    let noise = cfg.noise.then_some((&noise, snr));
    render_scene(&clean, noise, &scene, cfg.max_order, seed)
}
