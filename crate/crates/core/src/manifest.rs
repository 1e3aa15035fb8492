//! JSON-lines dataset manifests: one record per utterance with one WAV per
//! channel. Relative paths are resolved against the manifest's directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{
    cepstral_frames, logmel_features, subband_envelopes, LogMelFeatures, Waveform, DEFAULT_CEPSTRA,
};
use crate::error::{Error, Result};
use crate::scene::Scene;
use crate::wav::read_wav;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub channel_paths: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

/// Metadata attached to simulated records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetadata {
    pub seed: u64,
    pub scene: Scene,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
}

impl ManifestRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.channel_paths.is_empty() {
            return Err(format!("record {}: no channel paths", self.id));
        }
        if let Some(w) = &self.relevance {
            if w.len() != self.channel_paths.len() {
                return Err(format!(
                    "record {}: {} relevance values for {} channels",
                    self.id,
                    w.len(),
                    self.channel_paths.len()
                ));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(format!("record {}: non-finite relevance", self.id));
            }
        }
        Ok(())
    }

    pub fn sim_metadata(&self) -> Result<SimMetadata> {
        let meta = self
            .metadata
            .clone()
            .ok_or_else(|| Error::invalid(format!("record {}: no scene metadata", self.id)))?;
        serde_json::from_value(meta)
            .map_err(|e| Error::invalid(format!("record {}: scene metadata: {e}", self.id)))
    }

    pub fn relevance(&self) -> Result<&[f64]> {
        self.relevance
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("record {} has no relevance labels", self.id)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            records: Vec::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |line: usize, detail: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let mut records = Vec::new();
        let mut ids = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord =
                serde_json::from_str(line).map_err(|e| err(i + 1, e.to_string()))?;
            rec.validate().map_err(|d| err(i + 1, d))?;
            if !ids.insert(rec.id.clone()) {
                return Err(err(i + 1, format!("duplicate id {}", rec.id)));
            }
            records.push(rec);
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { records, base_dir })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_channels(&self, rec: &ManifestRecord) -> Result<Vec<Waveform>> {
        rec.channel_paths
            .iter()
            .map(|p| read_wav(self.resolve(p)))
            .collect()
    }

    pub fn load_clean(&self, rec: &ManifestRecord) -> Result<Waveform> {
        let p = rec
            .clean_path
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("record {} has no clean_path", rec.id)))?;
        read_wav(self.resolve(p))
    }

    /// Log-mel features of every channel of every record, in manifest order.
    pub fn load_features(&self) -> Result<Vec<Vec<LogMelFeatures>>> {
        self.records
            .par_iter()
            .map(|rec| {
                self.load_channels(rec)?
                    .iter()
                    .map(logmel_features)
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| Error::invalid(format!("record {}: {e}", rec.id)))
            })
            .collect()
    }
}

/// Convenience for scorers needing other feature views of the same audio.
pub fn channel_envelopes(channels: &[Waveform]) -> Result<Vec<crate::dsp::SubbandEnvelopes>> {
    channels.iter().map(subband_envelopes).collect()
}

pub fn channel_cepstra(channels: &[Waveform]) -> Result<Vec<crate::dsp::CepstralFrames>> {
    channels
        .iter()
        .map(|w| cepstral_frames(w, DEFAULT_CEPSTRA))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut m = Manifest::new(dir.path());
        m.records.push(ManifestRecord {
            id: "a".into(),
            channel_paths: vec!["a/0.wav".into(), "/abs/1.wav".into()],
            relevance: Some(vec![0.5, 0.25]),
            clean_path: None,
            metadata: None,
        });
        m.write(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.resolve("a/0.wav"), dir.path().join("a/0.wav"));
        assert_eq!(back.resolve("/abs/1.wav"), PathBuf::from("/abs/1.wav"));

        for bad in [
            r#"{"id":"x","channel_paths":[]}"#,
            r#"{"id":"x","channel_paths":["a"],"relevance":[0.1,0.2]}"#,
            r#"{"id":"x","channel_paths":["a"],"extra":1}"#,
            "{\"id\":\"x\",\"channel_paths\":[\"a\"]}\n{\"id\":\"x\",\"channel_paths\":[\"b\"]}",
        ] {
            std::fs::write(&path, bad).unwrap();
            assert!(
                matches!(Manifest::load(&path), Err(Error::Manifest { .. })),
                "{bad}"
            );
        }
        std::fs::write(&path, "").unwrap();
        assert!(Manifest::load(&path).unwrap().records.is_empty());
    }
}
