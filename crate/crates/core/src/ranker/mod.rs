//! Compact temporal-convolutional channel scorer.
//!
//! A 200 × 40 log-mel chunk is layer-normalized per frame, projected to a
//! 64-wide residual stream, passed through `blocks × sub_blocks` dilated
//! depthwise-separable residual blocks, projected to one value per frame and
//! mean-pooled over the valid frames. Utterance scores average the chunk
//! scores of an overlapping chunking.

mod checkpoint;
mod chunk;
mod net;
mod real;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use checkpoint::{decode as decode_checkpoint, encode as encode_checkpoint};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use chunk::{chunk_utterance, infer_chunk_starts, Chunk, ChunkBatch, ChunkMode};
pub use net::{score_utterance, ChunkCache};
pub use real::Real;

/// Output projection init relative to the He bound.
const OUTPUT_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankerConfig {
    pub n_mels: usize,
    pub input_proj: usize,
    pub bottleneck: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub blocks: usize,
    pub sub_blocks: usize,
    pub dilations: Vec<usize>,
    pub chunk_frames: usize,
    pub inference_overlap_factor: usize,
}

impl Default for RankerConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            input_proj: 64,
            bottleneck: 64,
            hidden: 128,
            kernel: 3,
            blocks: 3,
            sub_blocks: 5,
            dilations: vec![1, 2, 4, 8, 16],
            chunk_frames: 200,
            inference_overlap_factor: 4,
        }
    }
}

impl RankerConfig {
    /// A config with `sub_blocks` residual blocks per group and the matching
    /// doubling dilations.
    pub fn with_depth(mut self, blocks: usize, sub_blocks: usize) -> Self {
        self.blocks = blocks;
        self.sub_blocks = sub_blocks;
        self.dilations = (0..sub_blocks).map(|i| 1usize << i).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_mels", self.n_mels),
            ("input_proj", self.input_proj),
            ("bottleneck", self.bottleneck),
            ("hidden", self.hidden),
            ("blocks", self.blocks),
            ("sub_blocks", self.sub_blocks),
            ("chunk_frames", self.chunk_frames),
            ("inference_overlap_factor", self.inference_overlap_factor),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("ranker.{name} must be positive")));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "ranker.kernel must be odd for length-preserving padding, got {}",
                self.kernel
            )));
        }
        if self.input_proj != self.bottleneck {
            return Err(Error::Config(format!(
                "ranker.input_proj ({}) must equal ranker.bottleneck ({}): both set the residual width",
                self.input_proj, self.bottleneck
            )));
        }
        let expected: Vec<usize> = (0..self.sub_blocks).map(|i| 1usize << i).collect();
        if self.dilations != expected {
            return Err(Error::Config(format!(
                "ranker.dilations must be {expected:?} for {} sub-blocks, got {:?}",
                self.sub_blocks, self.dilations
            )));
        }
        if self.chunk_frames % self.inference_overlap_factor != 0 {
            return Err(Error::Config(format!(
                "ranker.chunk_frames ({}) must be divisible by inference_overlap_factor ({})",
                self.chunk_frames, self.inference_overlap_factor
            )));
        }
        Ok(())
    }

    pub fn infer_stride(&self) -> usize {
        self.chunk_frames / self.inference_overlap_factor
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    fn fan_in(&self) -> Option<usize> {
        // Only weight matrices / kernels get He init; last dim is fan-in.
        self.name
            .ends_with(".weight")
            .then(|| *self.shape.last().unwrap_or(&1))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockIndex {
    pub dilation: usize,
    pub conv_in_w: Range<usize>,
    pub conv_in_b: Range<usize>,
    pub act1: usize,
    pub norm1_g: Range<usize>,
    pub norm1_b: Range<usize>,
    pub dw_w: Range<usize>,
    pub dw_b: Range<usize>,
    pub act2: usize,
    pub norm2_g: Range<usize>,
    pub norm2_b: Range<usize>,
    pub conv_out_w: Range<usize>,
    pub conv_out_b: Range<usize>,
}

/// Flat parameter layout: every tensor is a named slice of one vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    tensors: Vec<TensorSpec>,
    pub(crate) in_norm_g: Range<usize>,
    pub(crate) in_norm_b: Range<usize>,
    pub(crate) in_proj_w: Range<usize>,
    pub(crate) in_proj_b: Range<usize>,
    pub(crate) blocks: Vec<BlockIndex>,
    pub(crate) out_w: Range<usize>,
    pub(crate) out_b: usize,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &RankerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| {
            let offset = tensors
                .last()
                .map_or(0, |t: &TensorSpec| t.offset + t.len());
            let spec = TensorSpec {
                name,
                shape,
                offset,
            };
            let r = spec.range();
            tensors.push(spec);
            r
        };
        let (f, b, h, k) = (cfg.n_mels, cfg.bottleneck, cfg.hidden, cfg.kernel);
        let in_norm_g = push("input_norm.gain".into(), vec![f]);
        let in_norm_b = push("input_norm.bias".into(), vec![f]);
        let in_proj_w = push("input_proj.weight".into(), vec![b, f]);
        let in_proj_b = push("input_proj.bias".into(), vec![b]);
        let mut blocks = Vec::new();
        for g in 0..cfg.blocks {
            for (s, &dilation) in cfg.dilations.iter().enumerate() {
                let p = format!("tcn.{g}.{s}");
                blocks.push(BlockIndex {
                    dilation,
                    conv_in_w: push(format!("{p}.conv_in.weight"), vec![h, b]),
                    conv_in_b: push(format!("{p}.conv_in.bias"), vec![h]),
                    act1: push(format!("{p}.act1.alpha"), vec![1]).start,
                    norm1_g: push(format!("{p}.norm1.gain"), vec![h]),
                    norm1_b: push(format!("{p}.norm1.bias"), vec![h]),
                    dw_w: push(format!("{p}.depthwise.weight"), vec![h, k]),
                    dw_b: push(format!("{p}.depthwise.bias"), vec![h]),
                    act2: push(format!("{p}.act2.alpha"), vec![1]).start,
                    norm2_g: push(format!("{p}.norm2.gain"), vec![h]),
                    norm2_b: push(format!("{p}.norm2.bias"), vec![h]),
                    conv_out_w: push(format!("{p}.conv_out.weight"), vec![b, h]),
                    conv_out_b: push(format!("{p}.conv_out.bias"), vec![b]),
                });
            }
        }
        let out_w = push("output.weight".into(), vec![1, b]);
        let out_b = push("output.bias".into(), vec![1]).start;
        let total = out_b + 1;
        Ok(Self {
            tensors,
            in_norm_g,
            in_norm_b,
            in_proj_w,
            in_proj_b,
            blocks,
            out_w,
            out_b,
            total,
        })
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Tensor owning flat parameter index `i`.
    pub fn tensor_of(&self, i: usize) -> Option<&TensorSpec> {
        let pos = self.tensors.partition_point(|t| t.offset + t.len() <= i);
        self.tensors.get(pos)
    }
}

/// Parameter counts grouped by layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCensus {
    pub entries: Vec<(String, usize)>,
    pub total: usize,
}

impl std::fmt::Display for ParamCensus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, n) in &self.entries {
            writeln!(f, "{name:<24} {n:>9}")?;
        }
        write!(f, "{:<24} {:>9}", "total", self.total)
    }
}

/// Ranker parameters plus the config and seed they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct RankerModel<T: Real = f32> {
    config: RankerConfig,
    seed: u64,
    layout: ParamLayout,
    params: Vec<T>,
}

impl PartialEq for ParamLayout {
    fn eq(&self, other: &Self) -> bool {
        self.tensors == other.tensors
    }
}

impl<T: Real> RankerModel<T> {
    /// He-uniform weights, zero biases, unit norm gains, PReLU slopes 0.25.
    pub fn build(config: RankerConfig, seed: u64) -> Result<Self> {
        let layout = ParamLayout::new(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); layout.total()];
        // Residual branches are scaled down so the stream variance stays
        // O(1) through the stack, and scores start out nearly tied.
        let branch_scale = 1.0 / ((config.blocks * config.sub_blocks) as f64).sqrt();
        for t in layout.tensors() {
            let dst = &mut params[t.range()];
            if let Some(fan_in) = t.fan_in() {
                let scale = if t.name.ends_with(".conv_out.weight") {
                    branch_scale
                } else if t.name == "output.weight" {
                    OUTPUT_INIT_SCALE
                } else {
                    1.0
                };
                let bound = scale * (6.0 / fan_in as f64).sqrt();
                for p in dst.iter_mut() {
                    *p = T::of(rng.random_range(-bound..bound));
                }
            } else if t.name.ends_with(".gain") {
                dst.fill(T::one());
            } else if t.name.ends_with(".alpha") {
                dst.fill(T::of(0.25));
            }
        }
        Ok(Self {
            config,
            seed,
            layout,
            params,
        })
    }

    pub fn from_parts(config: RankerConfig, seed: u64, params: Vec<T>) -> Result<Self> {
        let layout = ParamLayout::new(&config)?;
        if params.len() != layout.total() {
            return Err(Error::Shape {
                expected: format!("{} parameters", layout.total()),
                got: format!("{} parameters", params.len()),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("non-finite ranker parameter"));
        }
        Ok(Self {
            config,
            seed,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &RankerConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.find(name).map(|t| &self.params[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let r = self.layout.find(name)?.range();
        Some(&mut self.params[r])
    }

    pub fn cast<U: Real>(&self) -> RankerModel<U> {
        RankerModel {
            config: self.config.clone(),
            seed: self.seed,
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|p| U::of(p.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn census(&self) -> ParamCensus {
        census(&self.layout)
    }
}

pub fn build_ranker(config: RankerConfig, seed: u64) -> Result<RankerModel<f32>> {
    RankerModel::build(config, seed)
}

/// Per-layer parameter counts: input norm, input projection, each residual
/// block, output projection.
pub fn census(layout: &ParamLayout) -> ParamCensus {
    let mut entries: Vec<(String, usize)> = Vec::new();
    for t in layout.tensors() {
        let group = match t.name.split('.').collect::<Vec<_>>().as_slice() {
            ["tcn", g, s, ..] => format!("tcn.{g}.{s}"),
            [head, ..] => head.to_string(),
            [] => unreachable!(),
        };
        match entries.last_mut() {
            Some((name, n)) if *name == group => *n += t.len(),
            _ => entries.push((group, t.len())),
        }
    }
    let total = entries.iter().map(|(_, n)| n).sum();
    ParamCensus { entries, total }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_census_breakdown() {
        let model = build_ranker(RankerConfig::default(), 0).unwrap();
        let c = model.census();
        assert_eq!(c.entries.len(), 1 + 1 + 15 + 1);
        assert_eq!(c.entries[0], ("input_norm".to_string(), 80));
        assert_eq!(c.entries[1], ("input_proj".to_string(), 40 * 64 + 64));
        let block = 128 * 64 + 128 + 1 + 256 + 128 * 3 + 128 + 1 + 256 + 64 * 128 + 64;
        assert_eq!(block, 17_602);
        for (name, n) in &c.entries[2..17] {
            assert!(name.starts_with("tcn."));
            assert_eq!(*n, block);
        }
        assert_eq!(c.entries[17], ("output".to_string(), 65));
        assert_eq!(c.total, 266_799);
        assert_eq!(c.total, model.params().len());
    }

    #[test]
    fn dilations_double_per_sub_block() {
        let cfg = RankerConfig::default();
        assert_eq!(cfg.dilations, vec![1, 2, 4, 8, 16]);
        let layout = ParamLayout::new(&cfg).unwrap();
        let d: Vec<usize> = layout.blocks.iter().map(|b| b.dilation).collect();
        assert_eq!(d, [1, 2, 4, 8, 16].repeat(3));
    }

    #[test]
    fn build_is_seed_deterministic() {
        let a = build_ranker(RankerConfig::default(), 7).unwrap();
        let b = build_ranker(RankerConfig::default(), 7).unwrap();
        let c = build_ranker(RankerConfig::default(), 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn init_values() {
        let m = build_ranker(RankerConfig::default(), 1).unwrap();
        assert!(m
            .tensor("input_norm.gain")
            .unwrap()
            .iter()
            .all(|&g| g == 1.0));
        assert!(m
            .tensor("tcn.2.4.norm2.bias")
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
        assert_eq!(m.tensor("tcn.0.0.act1.alpha").unwrap(), &[0.25]);
        let bound = (6.0f32 / 64.0).sqrt();
        let w = m.tensor("tcn.1.3.conv_in.weight").unwrap();
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!(w.iter().any(|&v| v != 0.0));
        let w = m.tensor("tcn.1.3.conv_out.weight").unwrap();
        let branch = (6.0f32 / 128.0).sqrt() / 15f32.sqrt();
        assert!(w.iter().all(|v| v.abs() <= branch));
        assert!(w.iter().any(|v| v.abs() > 0.5 * branch));
        let out = m.tensor("output.weight").unwrap();
        assert!(out.iter().all(|v| v.abs() <= 0.01 * bound));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = RankerConfig::default();
        c.dilations = vec![1, 2, 3, 8, 16];
        assert!(c.validate().is_err());
        let mut c = RankerConfig::default();
        c.kernel = 4;
        assert!(c.validate().is_err());
        let mut c = RankerConfig::default();
        c.input_proj = 32;
        assert!(c.validate().is_err());
        let mut c = RankerConfig::default();
        c.hidden = 0;
        assert!(build_ranker(c, 0).is_err());
    }

    #[test]
    fn tensor_lookup_by_flat_index() {
        let layout = ParamLayout::new(&RankerConfig::default()).unwrap();
        assert_eq!(layout.tensor_of(0).unwrap().name, "input_norm.gain");
        assert_eq!(layout.tensor_of(40).unwrap().name, "input_norm.bias");
        assert_eq!(
            layout.tensor_of(layout.total() - 1).unwrap().name,
            "output.bias"
        );
        assert!(layout.tensor_of(layout.total()).is_none());
    }
}
