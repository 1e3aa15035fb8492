//! C ABI for micrank: log-mel extraction, checkpoint loading, channel
//! scoring and SDR.
//!
//! Every fallible function returns a [`MicrankStatus`]. On failure a
//! message is kept per thread and can be read with
//! [`micrank_last_error`]. Panics never cross the boundary; they surface
//! as `MICRANK_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use micrank::dsp::{logmel_features, FrameMatrix, LogMelFeatures, Waveform, N_MELS};
use micrank::ranker::{read_checkpoint, score_utterance, RankerModel};
use micrank::selectors::sdr;
use micrank::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MicrankStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Opaque handle to a loaded ranker.
pub struct MicrankRanker {
    model: RankerModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> MicrankStatus {
    match err {
        Error::Io { .. } | Error::Wav { .. } => MicrankStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => MicrankStatus::Checkpoint,
        _ => MicrankStatus::InvalidArgument,
    }
}

/// Runs `f`, recording errors and panics for `micrank_last_error`.
fn guard(f: impl FnOnce() -> Result<(), (MicrankStatus, String)>) -> MicrankStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MicrankStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MicrankStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (MicrankStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MicrankStatus, String) {
    (MicrankStatus::NullPointer, format!("{what} is null"))
}

unsafe fn waveform(
    samples: *const f32,
    len: usize,
    what: &str,
) -> Result<Waveform, (MicrankStatus, String)> {
    if samples.is_null() {
        return Err(null(what));
    }
    let s = std::slice::from_raw_parts(samples, len);
    Waveform::new(s.iter().map(|&v| f64::from(v)).collect()).map_err(lib_err)
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into the library from this thread.
#[no_mangle]
pub extern "C" fn micrank_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Number of mel bands produced by `micrank_logmel`.
#[no_mangle]
pub extern "C" fn micrank_n_mels() -> usize {
    N_MELS
}

/// Log-mel features of 16 kHz mono audio, row-major `frames x 40`.
///
/// `*n_frames` receives the frame count. With `out` null only the count
/// is computed; otherwise `out_len` must be at least `frames * 40`.
///
/// # Safety
/// `samples` must point to `n_samples` floats and `out`, when non-null,
/// to `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn micrank_logmel(
    samples: *const f32,
    n_samples: usize,
    out: *mut f32,
    out_len: usize,
    n_frames: *mut usize,
) -> MicrankStatus {
    guard(|| {
        if n_frames.is_null() {
            return Err(null("n_frames"));
        }
        let feats = logmel_features(&waveform(samples, n_samples, "samples")?).map_err(lib_err)?;
        *n_frames = feats.n_frames();
        if out.is_null() {
            return Ok(());
        }
        let data = feats.0.as_slice();
        if out_len < data.len() {
            return Err((
                MicrankStatus::BufferTooSmall,
                format!("output holds {out_len} values, need {}", data.len()),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(out, data.len());
        dst.iter_mut().zip(data).for_each(|(d, &v)| *d = v as f32);
        Ok(())
    })
}

/// Loads a ranker checkpoint. Free the handle with `micrank_ranker_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn micrank_ranker_load(
    path: *const c_char,
    out: *mut *mut MicrankRanker,
) -> MicrankStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path).to_str().map_err(|_| {
            (
                MicrankStatus::InvalidArgument,
                "path is not UTF-8".to_string(),
            )
        })?;
        let model: RankerModel<f32> = read_checkpoint(path).map_err(lib_err)?;
        if model.config().n_mels != N_MELS {
            return Err((
                MicrankStatus::Checkpoint,
                format!(
                    "checkpoint expects {} mel bands, features have {N_MELS}",
                    model.config().n_mels
                ),
            ));
        }
        *out = Box::into_raw(Box::new(MicrankRanker { model }));
        Ok(())
    })
}

/// Releases a handle from `micrank_ranker_load`. Null is ignored.
///
/// # Safety
/// `ranker` must come from `micrank_ranker_load` and not be used again.
#[no_mangle]
pub unsafe extern "C" fn micrank_ranker_free(ranker: *mut MicrankRanker) {
    if !ranker.is_null() {
        drop(Box::from_raw(ranker));
    }
}

/// Parameter count of a loaded ranker, or 0 for null.
///
/// # Safety
/// `ranker` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn micrank_ranker_param_count(ranker: *const MicrankRanker) -> usize {
    ranker.as_ref().map_or(0, |r| r.model.params().len())
}

/// Scores `n_channels` channels given as log-mel matrices. Channel `i`
/// occupies `frames[i] * 40` consecutive floats of `features`, channels
/// back to back. Writes one score per channel; higher is better.
///
/// # Safety
/// `features` must hold `sum(frames) * 40` floats, `frames` and `scores`
/// `n_channels` elements each.
#[no_mangle]
pub unsafe extern "C" fn micrank_ranker_score_features(
    ranker: *const MicrankRanker,
    features: *const f32,
    frames: *const usize,
    n_channels: usize,
    scores: *mut f64,
) -> MicrankStatus {
    guard(|| {
        let ranker = ranker.as_ref().ok_or_else(|| null("ranker"))?;
        if features.is_null() {
            return Err(null("features"));
        }
        if frames.is_null() {
            return Err(null("frames"));
        }
        if scores.is_null() {
            return Err(null("scores"));
        }
        if n_channels == 0 {
            return Err((MicrankStatus::InvalidArgument, "no channels".into()));
        }
        let frames = std::slice::from_raw_parts(frames, n_channels);
        let total: usize = frames.iter().sum();
        let data = std::slice::from_raw_parts(features, total * N_MELS);
        let mut offset = 0;
        let channels = frames
            .iter()
            .map(|&t| {
                let vals = data[offset..offset + t * N_MELS]
                    .iter()
                    .map(|&v| f64::from(v))
                    .collect();
                offset += t * N_MELS;
                FrameMatrix::new(t, N_MELS, vals).map(LogMelFeatures)
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(lib_err)?;
        let s = score_utterance(&ranker.model, &channels).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(scores, n_channels).copy_from_slice(s.values());
        Ok(())
    })
}

/// Scores channels given as raw 16 kHz audio: `channels[i]` points to
/// `lengths[i]` samples.
///
/// # Safety
/// `channels` and `lengths` must have `n_channels` elements, each channel
/// pointer its stated number of floats; `scores` `n_channels` slots.
#[no_mangle]
pub unsafe extern "C" fn micrank_ranker_score_audio(
    ranker: *const MicrankRanker,
    channels: *const *const f32,
    lengths: *const usize,
    n_channels: usize,
    scores: *mut f64,
) -> MicrankStatus {
    guard(|| {
        let ranker = ranker.as_ref().ok_or_else(|| null("ranker"))?;
        if channels.is_null() {
            return Err(null("channels"));
        }
        if lengths.is_null() {
            return Err(null("lengths"));
        }
        if scores.is_null() {
            return Err(null("scores"));
        }
        if n_channels == 0 {
            return Err((MicrankStatus::InvalidArgument, "no channels".into()));
        }
        let ptrs = std::slice::from_raw_parts(channels, n_channels);
        let lens = std::slice::from_raw_parts(lengths, n_channels);
        let feats = ptrs
            .iter()
            .zip(lens)
            .enumerate()
            .map(|(i, (&p, &n))| {
                let w = waveform(p, n, &format!("channel {i}"))?;
                logmel_features(&w).map_err(lib_err)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let s = score_utterance(&ranker.model, &feats).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(scores, n_channels).copy_from_slice(s.values());
        Ok(())
    })
}

/// Signal-to-distortion ratio in dB of `estimate` against `reference`
/// (single-gain projection, clipped to +-60 dB).
///
/// # Safety
/// Both buffers must hold their stated lengths; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn micrank_sdr(
    estimate: *const f32,
    estimate_len: usize,
    reference: *const f32,
    reference_len: usize,
    out: *mut f64,
) -> MicrankStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let est = waveform(estimate, estimate_len, "estimate")?;
        let reference = waveform(reference, reference_len, "reference")?;
        *out = sdr(&est, &reference).map_err(lib_err)?;
        Ok(())
    })
}
