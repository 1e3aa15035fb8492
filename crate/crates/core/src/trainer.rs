//! SGD training of the ranker under the point-wise, pair-wise and list-wise
//! objectives.
//!
//! Every chunk of an utterance inherits that utterance's per-channel
//! relevance. Samples are organized in groups of time-aligned chunks (same
//! utterance, same chunk index, one chunk per channel); the loss of a batch
//! is the mean over its samples, where a sample is one chunk (point-wise),
//! one channel pair (RankNet) or one list (ListNet).
//!
//! All randomness of epoch `e` comes from a generator derived from
//! `(seed, e)`, so a run resumed from a saved [`TrainState`] follows the
//! same trajectory as an uninterrupted one.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{LogMelFeatures, ENERGY_FLOOR, N_MELS};
use crate::error::{Error, Result};
use crate::ltr::{build_pair_set, Strategy};
use crate::ranker::{
    self, chunk_utterance, score_utterance, Chunk, ChunkMode, RankerConfig, RankerModel,
};

/// How a manifest's relevance values map to training labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceMetric {
    /// Word accuracy or any bounded higher-is-better score.
    #[default]
    Wa,
    /// Word error rate; converted to accuracy.
    Wer,
    /// Unbounded score used as-is (RankNet only).
    Raw,
}

impl std::str::FromStr for RelevanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wa" => Ok(Self::Wa),
            "wer" => Ok(Self::Wer),
            "raw" => Ok(Self::Raw),
            _ => Err(Error::Config(format!(
                "unknown relevance metric '{s}' (expected wa, wer or raw)"
            ))),
        }
    }
}

pub fn normalize_relevance(metric: RelevanceMetric, value: f64, strategy: Strategy) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::invalid(format!("relevance {value} is not finite")));
    }
    match metric {
        RelevanceMetric::Wa => Ok(value.clamp(0.0, 1.0)),
        RelevanceMetric::Wer => Ok((1.0 - value).clamp(0.0, 1.0)),
        RelevanceMetric::Raw => {
            if strategy != Strategy::Ranknet && !(0.0..=1.0).contains(&value) {
                return Err(Error::invalid(format!(
                    "raw relevance {value} outside [0, 1] requires the ranknet strategy"
                )));
            }
            Ok(value)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugmentConfig {
    pub num_masks: usize,
    pub max_width: usize,
    pub prob: f64,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            num_masks: 2,
            max_width: 8,
            prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_utterances: usize,
    pub epochs: usize,
    pub delta: f64,
    pub specaugment: SpecAugmentConfig,
    pub seed: u64,
    /// Halve the learning rate after this many epochs without validation
    /// improvement; 0 disables.
    pub plateau_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Listnet,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_utterances: 8,
            epochs: 20,
            delta: 0.0,
            specaugment: SpecAugmentConfig::default(),
            seed: 0,
            plateau_patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("trainer: {m}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and non-negative");
        }
        if self.batch_utterances == 0 {
            return bad("batch_utterances must be at least 1");
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad("delta must be finite and non-negative");
        }
        let sa = &self.specaugment;
        if !(0.0..=1.0).contains(&sa.prob) {
            return bad("specaugment.prob must lie in [0, 1]");
        }
        if sa.max_width > N_MELS {
            return bad("specaugment.max_width cannot exceed 40 bands");
        }
        if sa.num_masks > 0 && sa.max_width == 0 && sa.prob > 0.0 {
            return bad("specaugment.max_width must be at least 1");
        }
        Ok(())
    }
}

/// Masks `num_masks` random contiguous mel-band ranges (all frames) with
/// probability `prob`. Masked values are set to the log-mel floor.
pub fn specaugment_mask(
    feats: &LogMelFeatures,
    cfg: &SpecAugmentConfig,
    rng: &mut impl Rng,
) -> Result<LogMelFeatures> {
    let bands = feats.n_mels();
    if cfg.max_width > N_MELS {
        return Err(Error::Config(format!(
            "specaugment max_width {} exceeds {N_MELS} bands",
            cfg.max_width
        )));
    }
    let mut out = feats.clone();
    if cfg.num_masks == 0 || cfg.max_width == 0 || !rng.random_bool(cfg.prob) {
        return Ok(out);
    }
    let floor = ENERGY_FLOOR.ln();
    for _ in 0..cfg.num_masks {
        let width = rng.random_range(1..=cfg.max_width.min(bands));
        let start = rng.random_range(0..=bands - width);
        for t in 0..out.n_frames() {
            out.0.row_mut(t)[start..start + width].fill(floor);
        }
    }
    Ok(out)
}

/// One utterance ready for training or validation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainUtterance {
    pub id: String,
    pub channels: Vec<LogMelFeatures>,
    /// Normalized relevance, one per channel.
    pub relevance: Vec<f64>,
}

impl TrainUtterance {
    pub fn new(
        id: impl Into<String>,
        channels: Vec<LogMelFeatures>,
        relevance: Vec<f64>,
    ) -> Result<Self> {
        let id = id.into();
        if channels.is_empty() || channels.len() != relevance.len() {
            return Err(Error::invalid(format!(
                "utterance {id}: {} channels but {} relevance values",
                channels.len(),
                relevance.len()
            )));
        }
        if channels.iter().any(|c| c.n_frames() == 0) {
            return Err(Error::invalid(format!("utterance {id}: empty channel")));
        }
        Ok(Self {
            id,
            channels,
            relevance,
        })
    }
}

/// Time-aligned chunks of one utterance: one per listed channel.
#[derive(Debug, Clone)]
pub struct SampleGroup {
    pub utterance: usize,
    pub chunk_index: usize,
    pub channels: Vec<usize>,
    pub chunks: Vec<Chunk>,
    pub targets: Vec<f64>,
    /// Samples this group contributes: chunks, pairs or 1 list.
    pub samples: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingBatch {
    pub groups: Vec<SampleGroup>,
}

impl TrainingBatch {
    pub fn samples(&self) -> usize {
        self.groups.iter().map(|g| g.samples).sum()
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn group_samples(strategy: Strategy, targets: &[f64], delta: f64) -> Result<usize> {
    Ok(match strategy {
        Strategy::PointwiseXce | Strategy::PointwiseMse => targets.len(),
        Strategy::Ranknet => build_pair_set(targets, delta)?.len(),
        Strategy::Listnet => 1,
    })
}

/// Groups for one utterance. Point-wise training uses every chunk of every
/// channel; the other strategies use chunk indices present in all channels.
fn utterance_groups(
    data: &[TrainUtterance],
    u: usize,
    cfg: &TrainConfig,
    ranker_cfg: &RankerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SampleGroup>> {
    let utt = &data[u];
    let strategy = cfg.strategy;
    let per_channel = utt
        .channels
        .iter()
        .map(|feats| {
            let masked = specaugment_mask(feats, &cfg.specaugment, rng)?;
            chunk_utterance(&masked, ranker_cfg, ChunkMode::Train)
        })
        .collect::<Result<Vec<_>>>()?;
    let counts: Vec<usize> = per_channel.iter().map(|b| b.len()).collect();
    let n_index = if strategy.is_pointwise() {
        counts.iter().copied().max().unwrap_or(0)
    } else {
        counts.iter().copied().min().unwrap_or(0)
    };
    let mut per_channel: Vec<std::vec::IntoIter<Chunk>> = per_channel
        .into_iter()
        .map(|b| b.chunks.into_iter())
        .collect();
    let mut groups = Vec::with_capacity(n_index);
    for j in 0..n_index {
        let mut channels = Vec::new();
        let mut chunks = Vec::new();
        for (i, it) in per_channel.iter_mut().enumerate() {
            if j < counts[i] {
                channels.push(i);
                chunks.push(it.next().expect("chunk count checked"));
            }
        }
        let targets: Vec<f64> = channels.iter().map(|&i| utt.relevance[i]).collect();
        let samples = group_samples(strategy, &targets, cfg.delta)?;
        groups.push(SampleGroup {
            utterance: u,
            chunk_index: j,
            channels,
            chunks,
            targets,
            samples,
        });
    }
    Ok(groups)
}

/// Shuffled utterance order of one epoch split into batches.
pub fn epoch_batches(
    n_utterances: usize,
    batch_utterances: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_utterances).collect();
    order.shuffle(rng);
    order
        .chunks(batch_utterances.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Utterances usable under `strategy`: list and pair objectives need at
/// least two channels.
fn usable(data: &[TrainUtterance], strategy: Strategy) -> Vec<usize> {
    (0..data.len())
        .filter(|&u| {
            let ok = strategy.is_pointwise() || data[u].channels.len() >= 2;
            if !ok {
                warn!(
                    "skipping utterance {}: {} needs at least 2 channels",
                    data[u].id, strategy
                );
            }
            ok
        })
        .collect()
}

/// Batches of epoch `epoch`, built lazily in shuffled order.
pub fn make_training_batches<'a>(
    data: &'a [TrainUtterance],
    cfg: &'a TrainConfig,
    ranker_cfg: &'a RankerConfig,
    epoch: usize,
) -> impl Iterator<Item = Result<TrainingBatch>> + 'a {
    let mut rng = epoch_rng(cfg.seed, epoch);
    let pool = usable(data, cfg.strategy);
    let plan = epoch_batches(pool.len(), cfg.batch_utterances, &mut rng);
    plan.into_iter().map(move |batch| {
        let mut groups = Vec::new();
        for k in batch {
            groups.extend(utterance_groups(data, pool[k], cfg, ranker_cfg, &mut rng)?);
        }
        Ok(TrainingBatch { groups })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
    pub lr: f64,
    /// Seconds spent on the epoch; the only non-reproducible field.
    pub wall_time: f64,
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: RankerModel<f32>,
    pub velocity: Vec<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub best_metric: f64,
    pub best_epoch: usize,
    pub best_model: RankerModel<f32>,
    pub epochs_since_best: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(config: TrainConfig, ranker_cfg: RankerConfig) -> Result<Self> {
        config.validate()?;
        let model = RankerModel::<f32>::build(ranker_cfg, config.seed)?;
        Ok(Self {
            velocity: vec![0.0; model.params().len()],
            lr: config.lr,
            best_model: model.clone(),
            model,
            config,
            epoch: 0,
            best_metric: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_since_best: 0,
            history: Vec::new(),
        })
    }
}

const STATE_MAGIC: &[u8; 8] = b"MRSTATE\0";
const STATE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateHeader {
    config: TrainConfig,
    epoch: usize,
    lr: f64,
    best_metric: Option<f64>,
    best_epoch: usize,
    epochs_since_best: usize,
    history: Vec<EpochRecord>,
}

pub fn write_state(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = StateHeader {
        config: state.config.clone(),
        epoch: state.epoch,
        lr: state.lr,
        best_metric: state.best_metric.is_finite().then_some(state.best_metric),
        best_epoch: state.best_epoch,
        epochs_since_best: state.epochs_since_best,
        history: state.history.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(STATE_MAGIC);
    buf.extend_from_slice(&STATE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    ranker::encode_checkpoint(&state.model, &mut buf)?;
    ranker::encode_checkpoint(&state.best_model, &mut buf)?;
    for v in &state.velocity {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_state(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut cur = &bytes[..];
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != STATE_MAGIC {
        return Err(bad("not a training state file"));
    }
    let mut word = [0u8; 4];
    cur.read_exact(&mut word).map_err(|_| bad("truncated"))?;
    if u32::from_le_bytes(word) != STATE_VERSION {
        return Err(bad("unsupported state version"));
    }
    cur.read_exact(&mut word).map_err(|_| bad("truncated"))?;
    let hlen = u32::from_le_bytes(word) as usize;
    if cur.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: StateHeader = serde_json::from_slice(&cur[..hlen])?;
    cur = &cur[hlen..];
    let (model, used) = ranker::decode_checkpoint::<f32>(cur)?;
    cur = &cur[used..];
    let (best_model, used) = ranker::decode_checkpoint::<f32>(cur)?;
    cur = &cur[used..];
    let n = model.params().len();
    if cur.len() != n * 4 {
        return Err(bad("velocity size does not match the model"));
    }
    let velocity = cur
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(TrainState {
        config: header.config,
        model,
        velocity,
        epoch: header.epoch,
        lr: header.lr,
        best_metric: header.best_metric.unwrap_or(f64::NEG_INFINITY),
        best_epoch: header.best_epoch,
        best_model,
        epochs_since_best: header.epochs_since_best,
        history: header.history,
    })
}

/// Mean relevance of the channel each utterance's ranker scores select.
pub fn validation_metric(model: &RankerModel<f32>, data: &[TrainUtterance]) -> Result<f64> {
    use rayon::prelude::*;
    if data.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let picked = data
        .par_iter()
        .map(|u| {
            let scores = score_utterance(model, &u.channels)?;
            Ok(u.relevance[scores.best()])
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(picked.iter().sum::<f64>() / picked.len() as f64)
}

/// Forward and backward passes of one batch. Returns the mean sample loss
/// and leaves the gradient of that mean in `grad`.
fn batch_gradient(
    model: &RankerModel<f32>,
    batch: &TrainingBatch,
    cfg: &TrainConfig,
    grad: &mut [f32],
) -> Result<f64> {
    grad.fill(0.0);
    let total = batch.samples();
    if total == 0 {
        return Ok(0.0);
    }
    let norm = 1.0 / total as f64;
    let mut loss = 0.0;
    for g in batch.groups.iter().filter(|g| g.samples > 0) {
        let caches = g
            .chunks
            .iter()
            .map(|c| model.forward(c))
            .collect::<Result<Vec<_>>>()?;
        let scores: Vec<f64> = caches.iter().map(|c| f64::from(c.score())).collect();
        let lg = cfg.strategy.group_loss(&g.targets, &scores, cfg.delta)?;
        let weight = g.samples as f64 * norm;
        loss += lg.loss * weight;
        for (cache, d) in caches.iter().zip(&lg.grad) {
            model.backward(cache, (d * weight) as f32, grad);
        }
    }
    Ok(loss)
}

fn sgd_step(state: &mut TrainState, grad: &[f32]) {
    let (lr, mu, wd) = (
        state.lr as f32,
        state.config.momentum as f32,
        state.config.weight_decay as f32,
    );
    for ((p, v), &g) in state
        .model
        .params_mut()
        .iter_mut()
        .zip(state.velocity.iter_mut())
        .zip(grad)
    {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

/// Runs one epoch in place and appends its record.
pub fn train_epoch(
    state: &mut TrainState,
    train: &[TrainUtterance],
    valid: &[TrainUtterance],
) -> Result<EpochRecord> {
    let start = Instant::now();
    let epoch = state.epoch;
    let cfg = state.config.clone();
    let ranker_cfg = state.model.config().clone();
    let mut grad = vec![0.0f32; state.model.params().len()];
    let (mut loss_sum, mut samples) = (0.0, 0usize);
    for batch in make_training_batches(train, &cfg, &ranker_cfg, epoch) {
        let batch = batch?;
        let loss = batch_gradient(&state.model, &batch, &cfg, &mut grad)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                detail: format!("non-finite loss or gradient (loss = {loss})"),
            });
        }
        sgd_step(state, &grad);
        loss_sum += loss * batch.samples() as f64;
        samples += batch.samples();
    }
    if state.model.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Divergence {
            epoch: epoch + 1,
            detail: "non-finite parameters after update".into(),
        });
    }
    let valid_metric = validation_metric(&state.model, valid)?;
    state.epoch += 1;
    if valid_metric > state.best_metric {
        state.best_metric = valid_metric;
        state.best_epoch = state.epoch;
        state.best_model = state.model.clone();
        state.epochs_since_best = 0;
    } else {
        state.epochs_since_best += 1;
        if cfg.plateau_patience > 0 && state.epochs_since_best >= cfg.plateau_patience {
            state.lr *= 0.5;
            state.epochs_since_best = 0;
            info!("validation plateau: learning rate halved to {}", state.lr);
        }
    }
    let record = EpochRecord {
        epoch: state.epoch,
        train_loss: if samples > 0 {
            loss_sum / samples as f64
        } else {
            0.0
        },
        valid_metric,
        lr: state.lr,
        wall_time: start.elapsed().as_secs_f64(),
    };
    info!(
        "epoch {} {}: loss {:.5} valid {:.4} ({:.1}s)",
        record.epoch, cfg.strategy, record.train_loss, record.valid_metric, record.wall_time
    );
    state.history.push(record.clone());
    Ok(record)
}

/// Trains until `state.config.epochs` epochs are complete, calling
/// `on_epoch` after each one (for checkpointing).
pub fn train(
    mut state: TrainState,
    train: &[TrainUtterance],
    valid: &[TrainUtterance],
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if valid.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    for u in train.iter().chain(valid) {
        for (i, &w) in u.relevance.iter().enumerate() {
            if !w.is_finite() {
                return Err(Error::invalid(format!(
                    "utterance {} channel {i}: relevance is not finite",
                    u.id
                )));
            }
            if state.config.strategy != Strategy::Ranknet && !(0.0..=1.0).contains(&w) {
                return Err(Error::invalid(format!(
                    "utterance {} channel {i}: relevance {w} outside [0, 1]",
                    u.id
                )));
            }
        }
    }
    while state.epoch < state.config.epochs {
        train_epoch(&mut state, train, valid)?;
        on_epoch(&state)?;
    }
    Ok(state)
}
