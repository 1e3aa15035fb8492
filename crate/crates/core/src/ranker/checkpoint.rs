//! Checkpoint container.
//!
//! ```text
//! magic    8 bytes   "MICRANK\0"
//! version  u32 LE
//! hlen     u32 LE    length of the JSON header
//! header   hlen bytes {"config": RankerConfig, "seed": u64,
//!                      "tensors": [{"name", "shape"}, ...]}
//! data     f32 LE    every tensor in header order, row-major
//! ```
//!
//! The header is serialized with a fixed field order, so identical models
//! produce identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{RankerConfig, RankerModel, Real, TensorSpec};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MICRANK\0";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RankerConfig,
    seed: u64,
    tensors: Vec<TensorSpec>,
}

pub(crate) fn encode<T: Real>(model: &RankerModel<T>, out: &mut Vec<u8>) -> Result<()> {
    let header = Header {
        config: model.config().clone(),
        seed: model.seed(),
        tensors: model.layout().tensors().to_vec(),
    };
    let json = serde_json::to_vec(&header)?;
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        out.extend_from_slice(&(p.to_f64_lossy() as f32).to_le_bytes());
    }
    Ok(())
}

/// Decodes a checkpoint from the front of `bytes`; returns the model and the
/// number of bytes consumed.
pub(crate) fn decode<T: Real>(bytes: &[u8]) -> Result<(RankerModel<T>, usize)> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    let mut cur = bytes;
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic)
        .map_err(|_| bad("truncated magic"))?;
    if &magic != MAGIC {
        return Err(bad("not a micrank checkpoint"));
    }
    let mut word = [0u8; 4];
    cur.read_exact(&mut word)
        .map_err(|_| bad("truncated version"))?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    cur.read_exact(&mut word)
        .map_err(|_| bad("truncated header length"))?;
    let hlen = u32::from_le_bytes(word) as usize;
    if cur.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&cur[..hlen])
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    cur = &cur[hlen..];

    let expected = super::ParamLayout::new(&header.config)?;
    let names_match = expected.tensors().len() == header.tensors.len()
        && expected
            .tensors()
            .iter()
            .zip(&header.tensors)
            .all(|(a, b)| a.name == b.name && a.shape == b.shape);
    if !names_match {
        return Err(bad("tensor table does not match the stored config"));
    }
    let n = expected.total();
    if cur.len() < n * 4 {
        return Err(Error::Checkpoint(format!(
            "truncated data: need {} bytes, have {}",
            n * 4,
            cur.len()
        )));
    }
    let params = cur[..n * 4]
        .chunks_exact(4)
        .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    let consumed = bytes.len() - cur.len() + n * 4;
    Ok((
        RankerModel::from_parts(header.config, header.seed, params)?,
        consumed,
    ))
}

pub fn write_checkpoint<T: Real>(model: &RankerModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    encode(model, &mut buf)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<RankerModel<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (model, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after parameter data",
            bytes.len() - used
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_and_byte_stable() {
        let model = RankerModel::<f32>::build(RankerConfig::default(), 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        write_checkpoint(&model, &a).unwrap();
        let back: RankerModel<f32> = read_checkpoint(&a).unwrap();
        assert_eq!(back, model);
        write_checkpoint(&back, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn corrupt_files_rejected() {
        let model = RankerModel::<f32>::build(RankerConfig::default().with_depth(1, 1), 0).unwrap();
        let mut buf = Vec::new();
        encode(&model, &mut buf).unwrap();
        assert!(decode::<f32>(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(decode::<f32>(&bad).is_err());
    }
}
