use crate::dsp::LogMelFeatures;
use crate::error::{Error, Result};

use super::RankerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkMode {
    /// Consecutive non-overlapping chunks, last one zero-padded.
    Train,
    /// Chunks every `chunk_frames / overlap` frames; the last chunk is
    /// shifted to end exactly at the final frame.
    Infer,
}

/// One fixed-length chunk. Valid frames form the prefix `0..n_valid`; the
/// remainder is zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub start: usize,
    pub n_valid: usize,
    pub n_frames: usize,
    pub n_mels: usize,
    /// `n_frames × n_mels`, row-major.
    pub data: Vec<f64>,
}

impl Chunk {
    pub fn zeros(n_frames: usize, n_mels: usize) -> Self {
        Self {
            start: 0,
            n_valid: n_frames,
            n_frames,
            n_mels,
            data: vec![0.0; n_frames * n_mels],
        }
    }

    pub fn from_frames(feats: &LogMelFeatures, start: usize, n_frames: usize) -> Result<Self> {
        let total = feats.n_frames();
        if start >= total {
            return Err(Error::invalid(format!(
                "chunk start {start} beyond {total} frames"
            )));
        }
        let n_mels = feats.n_mels();
        let n_valid = (total - start).min(n_frames);
        let mut data = vec![0.0; n_frames * n_mels];
        data[..n_valid * n_mels]
            .copy_from_slice(&feats.0.as_slice()[start * n_mels..(start + n_valid) * n_mels]);
        Ok(Self {
            start,
            n_valid,
            n_frames,
            n_mels,
            data,
        })
    }

    /// 1 for real frames, 0 for padding.
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.n_frames).map(|t| t < self.n_valid).collect()
    }
}

/// Chunks of one or more channel feature matrices, with their origin.
#[derive(Debug, Clone, Default)]
pub struct ChunkBatch {
    pub chunks: Vec<Chunk>,
    /// `(utterance, channel)` for each chunk.
    pub utterance_map: Vec<(usize, usize)>,
}

impl ChunkBatch {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn extend(&mut self, other: ChunkBatch, utterance: usize, channel: usize) {
        self.utterance_map.extend(std::iter::repeat_n(
            (utterance, channel),
            other.chunks.len(),
        ));
        self.chunks.extend(other.chunks);
    }
}

/// Start frames of inference chunks for an utterance of `t` frames.
pub fn infer_chunk_starts(t: usize, chunk: usize, stride: usize) -> Vec<usize> {
    if t <= chunk {
        return vec![0];
    }
    let n = (t - chunk) / stride + 1;
    let mut starts: Vec<usize> = (0..n).map(|i| i * stride).collect();
    // Tail coverage: the final chunk ends at the last frame.
    *starts.last_mut().expect("n >= 1") = t - chunk;
    starts
}

pub fn chunk_utterance(
    feats: &LogMelFeatures,
    cfg: &RankerConfig,
    mode: ChunkMode,
) -> Result<ChunkBatch> {
    let t = feats.n_frames();
    if t == 0 {
        return Err(Error::invalid("cannot chunk an empty feature matrix"));
    }
    if feats.n_mels() != cfg.n_mels {
        return Err(Error::Shape {
            expected: format!("{} mel bands", cfg.n_mels),
            got: format!("{} mel bands", feats.n_mels()),
        });
    }
    let len = cfg.chunk_frames;
    let starts: Vec<usize> = match mode {
        ChunkMode::Train => (0..t.div_ceil(len)).map(|i| i * len).collect(),
        ChunkMode::Infer => infer_chunk_starts(t, len, cfg.infer_stride()),
    };
    let chunks = starts
        .into_iter()
        .map(|s| Chunk::from_frames(feats, s, len))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChunkBatch {
        utterance_map: vec![(0, 0); chunks.len()],
        chunks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::FrameMatrix;
    use proptest::prelude::*;

    fn feats(t: usize) -> LogMelFeatures {
        let data = (0..t * 40).map(|i| i as f64).collect();
        LogMelFeatures(FrameMatrix::new(t, 40, data).unwrap())
    }

    #[test]
    fn train_mode_450_frames() {
        let b = chunk_utterance(&feats(450), &RankerConfig::default(), ChunkMode::Train).unwrap();
        let valid: Vec<usize> = b.chunks.iter().map(|c| c.n_valid).collect();
        assert_eq!(valid, [200, 200, 50]);
        let last = &b.chunks[2];
        assert_eq!(last.start, 400);
        assert_eq!(last.data[0], (400 * 40) as f64);
        assert!(last.data[50 * 40..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn infer_mode_450_frames() {
        let b = chunk_utterance(&feats(450), &RankerConfig::default(), ChunkMode::Infer).unwrap();
        let starts: Vec<usize> = b.chunks.iter().map(|c| c.start).collect();
        assert_eq!(starts, [0, 50, 100, 150, 200, 250]);
        assert!(b.chunks.iter().all(|c| c.n_valid == 200));
    }

    #[test]
    fn short_utterance_single_padded_chunk() {
        for mode in [ChunkMode::Train, ChunkMode::Infer] {
            let b = chunk_utterance(&feats(120), &RankerConfig::default(), mode).unwrap();
            assert_eq!(b.len(), 1);
            let mask = b.chunks[0].pad_mask();
            assert_eq!(mask.iter().filter(|&&m| m).count(), 120);
            assert_eq!(mask.iter().filter(|&&m| !m).count(), 80);
        }
    }

    #[test]
    fn tail_chunk_is_shifted_not_added() {
        assert_eq!(
            infer_chunk_starts(460, 200, 50),
            [0, 50, 100, 150, 200, 260]
        );
        assert_eq!(infer_chunk_starts(200, 200, 50), [0]);
        assert_eq!(infer_chunk_starts(249, 200, 50), [49]);
    }

    #[test]
    fn wrong_band_count_rejected() {
        let f = LogMelFeatures(FrameMatrix::zeros(10, 13));
        assert!(chunk_utterance(&f, &RankerConfig::default(), ChunkMode::Train).is_err());
    }

    proptest! {
        #[test]
        fn chunk_count_formulas(t in 1usize..5000) {
            let cfg = RankerConfig::default();
            let f = feats(t);
            let train = chunk_utterance(&f, &cfg, ChunkMode::Train).unwrap();
            prop_assert_eq!(train.len(), t.div_ceil(200));
            let infer = chunk_utterance(&f, &cfg, ChunkMode::Infer).unwrap();
            prop_assert_eq!(infer.len(), (t.max(200) - 200) / 50 + 1);
            let last = infer.chunks.last().unwrap();
            prop_assert_eq!(last.start + last.n_valid, t);
            let covered: usize = train.chunks.iter().map(|c| c.n_valid).sum();
            prop_assert_eq!(covered, t);
        }
    }
}
