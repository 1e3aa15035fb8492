use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use micrank::dsp::{logmel_features, Waveform};
use micrank::ranker::{score_utterance, write_checkpoint, RankerConfig, RankerModel};
use micrank_ffi::*;

fn tone(n: usize, f: f64, amp: f64) -> Vec<f32> {
    (0..n)
        .map(|i| (amp * (2.0 * std::f64::consts::PI * f * i as f64 / 16_000.0).sin()) as f32)
        .collect()
}

fn last_error() -> String {
    let p = micrank_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_ranker(dir: &Path) -> (CString, RankerModel<f32>) {
    let cfg = RankerConfig::default().with_depth(1, 2);
    let model = RankerModel::<f32>::build(cfg, 5).unwrap();
    let path = dir.join("ck.bin");
    write_checkpoint(&model, &path).unwrap();
    (CString::new(path.to_str().unwrap()).unwrap(), model)
}

#[test]
fn logmel_matches_library() {
    let x = tone(8000, 440.0, 0.3);
    let mut frames = 0usize;
    let st = unsafe { micrank_logmel(x.as_ptr(), x.len(), ptr::null_mut(), 0, &mut frames) };
    assert_eq!(st, MicrankStatus::Ok);
    assert_eq!(frames, 1 + (8000 - 400) / 160);
    assert!(micrank_last_error().is_null());

    let mut out = vec![0f32; frames * micrank_n_mels()];
    let st = unsafe {
        micrank_logmel(
            x.as_ptr(),
            x.len(),
            out.as_mut_ptr(),
            out.len(),
            &mut frames,
        )
    };
    assert_eq!(st, MicrankStatus::Ok);
    let lib = logmel_features(&Waveform::new(x.iter().map(|&v| f64::from(v)).collect()).unwrap())
        .unwrap();
    for (a, b) in out.iter().zip(lib.0.as_slice()) {
        assert_eq!(*a, *b as f32);
    }

    let st = unsafe { micrank_logmel(x.as_ptr(), x.len(), out.as_mut_ptr(), 10, &mut frames) };
    assert_eq!(st, MicrankStatus::BufferTooSmall);
    assert!(last_error().contains("need"));
}

#[test]
fn short_and_null_inputs_are_errors() {
    let x = tone(100, 440.0, 0.3);
    let mut frames = 0usize;
    let st = unsafe { micrank_logmel(x.as_ptr(), x.len(), ptr::null_mut(), 0, &mut frames) };
    assert_eq!(st, MicrankStatus::InvalidArgument);
    assert!(!last_error().is_empty());
    let st = unsafe { micrank_logmel(ptr::null(), 10, ptr::null_mut(), 0, &mut frames) };
    assert_eq!(st, MicrankStatus::NullPointer);
    let mut out = 0.0;
    let st = unsafe { micrank_sdr(ptr::null(), 0, x.as_ptr(), x.len(), &mut out) };
    assert_eq!(st, MicrankStatus::NullPointer);
}

#[test]
fn ranker_roundtrip_and_scoring() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model) = small_ranker(dir.path());
    let mut handle = ptr::null_mut();
    assert_eq!(
        unsafe { micrank_ranker_load(path.as_ptr(), &mut handle) },
        MicrankStatus::Ok
    );
    assert!(!handle.is_null());
    assert_eq!(
        unsafe { micrank_ranker_param_count(handle) },
        model.params().len()
    );

    let chans = [tone(12_000, 300.0, 0.5), tone(9_000, 900.0, 0.05)];
    let ptrs: Vec<*const f32> = chans.iter().map(|c| c.as_ptr()).collect();
    let lens: Vec<usize> = chans.iter().map(Vec::len).collect();
    let mut scores = [0f64; 2];
    let st = unsafe {
        micrank_ranker_score_audio(handle, ptrs.as_ptr(), lens.as_ptr(), 2, scores.as_mut_ptr())
    };
    assert_eq!(st, MicrankStatus::Ok);

    let feats: Vec<_> = chans
        .iter()
        .map(|c| {
            logmel_features(&Waveform::new(c.iter().map(|&v| f64::from(v)).collect()).unwrap())
                .unwrap()
        })
        .collect();
    let expect = score_utterance(&model, &feats).unwrap();
    assert_eq!(&scores[..], expect.values());

    // Same result through the feature entry point.
    let flat: Vec<f32> = feats
        .iter()
        .flat_map(|f| f.0.as_slice().iter().map(|&v| v as f32))
        .collect();
    let frames: Vec<usize> = feats.iter().map(|f| f.n_frames()).collect();
    let mut via_feats = [0f64; 2];
    let st = unsafe {
        micrank_ranker_score_features(
            handle,
            flat.as_ptr(),
            frames.as_ptr(),
            2,
            via_feats.as_mut_ptr(),
        )
    };
    assert_eq!(st, MicrankStatus::Ok);
    for (a, b) in via_feats.iter().zip(&scores) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }

    let st = unsafe {
        micrank_ranker_score_audio(handle, ptrs.as_ptr(), lens.as_ptr(), 0, scores.as_mut_ptr())
    };
    assert_eq!(st, MicrankStatus::InvalidArgument);
    unsafe { micrank_ranker_free(handle) };
    unsafe { micrank_ranker_free(ptr::null_mut()) };
}

#[test]
fn bad_checkpoints_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("nope.bin").to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(
        unsafe { micrank_ranker_load(missing.as_ptr(), &mut handle) },
        MicrankStatus::Io
    );
    assert!(handle.is_null());

    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { micrank_ranker_load(junk.as_ptr(), &mut handle) },
        MicrankStatus::Checkpoint
    );

    let cfg = RankerConfig {
        n_mels: 24,
        ..RankerConfig::default()
    }
    .with_depth(1, 1);
    let path = dir.path().join("m24.bin");
    write_checkpoint(&RankerModel::<f32>::build(cfg, 1).unwrap(), &path).unwrap();
    let path = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { micrank_ranker_load(path.as_ptr(), &mut handle) },
        MicrankStatus::Checkpoint
    );
    assert!(last_error().contains("mel bands"));
}

#[test]
fn sdr_identity_and_noise() {
    let x = tone(16_000, 440.0, 0.5);
    let mut out = 0.0;
    assert_eq!(
        unsafe { micrank_sdr(x.as_ptr(), x.len(), x.as_ptr(), x.len(), &mut out) },
        MicrankStatus::Ok
    );
    assert_eq!(out, 60.0);
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/micrank.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "micrank_last_error",
        "micrank_logmel",
        "micrank_ranker_load",
        "micrank_ranker_free",
        "micrank_ranker_score_features",
        "micrank_ranker_score_audio",
        "micrank_sdr",
        "MICRANK_STATUS_PANIC",
        "typedef struct MicrankRanker MicrankRanker",
    ] {
        assert!(text.contains(sym), "missing {sym}");
    }
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler available; skipped syntax check");
        return;
    };
    assert!(status.success());
}
