//! Library side of the `micrank` command-line tool. Each command reads its
//! inputs, does its work in parallel per utterance and writes outputs in
//! manifest order.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{error, info, warn};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::dsp::{FrameMatrix, N_MELS};
use crate::error::{Error, Result};
use crate::eval::{evaluate, rank_channels, EvalReport, RankingResult, RelevanceTable};
use crate::manifest::{channel_cepstra, channel_envelopes, Manifest, ManifestRecord, SimMetadata};
use crate::ranker::{read_checkpoint, score_utterance, write_checkpoint, RankerModel};
use crate::scene::{simulate_utterance, SourceMaterial};
use crate::selectors::{
    cepstral_distance, closest_select, envelope_variance, ev_band_features, posterior_entropy,
    random_select, sdr_scores, train_ev_weights, ChannelScores, EvExample, EvWeights,
};
use crate::trainer::{
    self, normalize_relevance, read_state, write_state, RelevanceMetric, TrainState, TrainUtterance,
};
use crate::wav::write_wav;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const STATE_FILE: &str = "state.bin";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const DETAILS_FILE: &str = "details.csv";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Renders `cfg.simulate.n` utterances with seeds `seed..seed + n` into
/// `out_dir` and writes the manifest.
pub fn simulate(cfg: &RunConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.scene.validate()?;
    create_dir(out_dir)?;
    cfg.write_resolved(out_dir)?;
    let material = match &cfg.simulate.speech_dir {
        Some(dir) => SourceMaterial::from_dirs(dir, cfg.simulate.noise_dir.as_deref())?,
        None => SourceMaterial::Synthetic,
    };
    let seed0 = cfg.simulate.seed;
    let records = (0..cfg.simulate.n as u64)
        .into_par_iter()
        .map(|k| {
            let seed = seed0 + k;
            let utt = simulate_utterance(seed, &cfg.scene, &material)?;
            let id = format!("sim{seed:06}");
            let rel_dir = PathBuf::from("wav").join(&id);
            create_dir(&out_dir.join(&rel_dir))?;
            let mut channel_paths = Vec::with_capacity(utt.channels.len());
            for (i, ch) in utt.channels.iter().enumerate() {
                let rel = rel_dir.join(format!("ch{i}.wav"));
                write_wav(out_dir.join(&rel), ch)?;
                channel_paths.push(rel.to_string_lossy().into_owned());
            }
            let clean = rel_dir.join("clean.wav");
            write_wav(out_dir.join(&clean), &utt.clean_ref)?;
            let meta = SimMetadata {
                seed,
                scene: utt.scene,
                snr_db: utt.snr_db,
            };
            Ok(ManifestRecord {
                id,
                channel_paths,
                relevance: Some(utt.relevance),
                clean_path: Some(clean.to_string_lossy().into_owned()),
                metadata: Some(serde_json::to_value(meta)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        records,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    info!(
        "simulated {} utterances into {}",
        manifest.records.len(),
        out_dir.display()
    );
    Ok(manifest)
}

/// Features and normalized labels of every record.
pub fn load_training_set(manifest: &Manifest, cfg: &RunConfig) -> Result<Vec<TrainUtterance>> {
    let strategy = cfg.trainer.strategy;
    let labels = manifest
        .records
        .iter()
        .map(|rec| {
            rec.relevance()?
                .iter()
                .map(|&v| normalize_relevance(cfg.relevance_metric, v, strategy))
                .collect::<Result<Vec<f64>>>()
                .map_err(|e| Error::invalid(format!("record {}: {e}", rec.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let feats = manifest.load_features()?;
    manifest
        .records
        .iter()
        .zip(feats)
        .zip(labels)
        .map(|((rec, f), w)| TrainUtterance::new(rec.id.clone(), f, w))
        .collect()
}

/// First line: the trainer and ranker configuration; then one record per
/// epoch.
fn write_history(state: &TrainState, path: &Path) -> Result<()> {
    let header = serde_json::json!({
        "trainer": state.config,
        "ranker": state.model.config(),
    });
    let mut out = serde_json::to_string(&serde_json::json!({ "config": header }))?;
    out.push('\n');
    for r in &state.history {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Trains a ranker; writes the best checkpoint, the resumable state and
/// the epoch history into `out_dir` after every epoch.
pub fn train(
    cfg: &RunConfig,
    train_manifest: &Path,
    valid_manifest: &Path,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainState> {
    cfg.validate()?;
    create_dir(out_dir)?;
    cfg.write_resolved(out_dir)?;
    let train_set = load_training_set(&Manifest::load(train_manifest)?, cfg)?;
    let valid_set = load_training_set(&Manifest::load(valid_manifest)?, cfg)?;
    let state_path = out_dir.join(STATE_FILE);
    let state = if resume {
        let mut state = read_state(&state_path)?;
        let mut saved = state.config.clone();
        saved.epochs = cfg.trainer.epochs;
        if saved != cfg.trainer || *state.model.config() != cfg.ranker {
            return Err(Error::Config(format!(
                "{} was written with a different trainer or ranker configuration",
                state_path.display()
            )));
        }
        state.config.epochs = cfg.trainer.epochs;
        info!("resuming after epoch {}", state.epoch);
        state
    } else {
        TrainState::new(cfg.trainer.clone(), cfg.ranker.clone())?
    };
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let history = out_dir.join(HISTORY_FILE);
    let state = trainer::train(state, &train_set, &valid_set, |s| {
        write_checkpoint(&s.best_model, &ckpt)?;
        write_state(s, &state_path)?;
        write_history(s, &history)
    })?;
    // Covers epochs = 0 and resuming an already finished run.
    write_checkpoint(&state.best_model, &ckpt)?;
    write_state(&state, &state_path)?;
    write_history(&state, &history)?;
    Ok(state)
}

/// Channel scoring method for `micrank rank`.
#[derive(Debug, Clone, PartialEq)]
pub enum RankMethod {
    Micrank(PathBuf),
    Ev(Option<PathBuf>),
    CdBlind,
    CdInformed,
    Entropy(PathBuf),
    Sdr,
    Closest,
    Random(u64),
}

impl FromStr for RankMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        fn need<'a>(name: &str, a: Option<&'a str>) -> Result<&'a str> {
            a.filter(|a| !a.is_empty()).ok_or_else(|| {
                Error::Config(format!("method '{name}' needs an argument: {name}:<value>"))
            })
        }
        Ok(match (name, arg) {
            ("micrank", a) => RankMethod::Micrank(need(name, a)?.into()),
            ("ev", a) => RankMethod::Ev(a.filter(|a| !a.is_empty()).map(PathBuf::from)),
            ("cd-blind", None) => RankMethod::CdBlind,
            ("cd-informed", None) => RankMethod::CdInformed,
            ("entropy", a) => RankMethod::Entropy(need(name, a)?.into()),
            ("sdr", None) => RankMethod::Sdr,
            ("closest", None) => RankMethod::Closest,
            ("random", a) => RankMethod::Random(
                need(name, a)?
                    .parse()
                    .map_err(|_| Error::Config(format!("random seed '{}' is not an integer", a.unwrap_or(""))))?,
            ),
            _ => {
                return Err(Error::Config(format!(
                    "unknown method '{s}' (expected micrank:<ckpt>, ev[:weights], cd-blind, cd-informed, \
                     entropy:<dir>, sdr, closest or random:<seed>)"
                )))
            }
        })
    }
}

enum Scorer {
    Micrank(RankerModel<f32>),
    Ev(EvWeights),
    CdBlind,
    CdInformed,
    Entropy(PathBuf),
    Sdr,
    Closest,
    Random(u64),
}

impl Scorer {
    fn new(method: &RankMethod) -> Result<Self> {
        Ok(match method {
            RankMethod::Micrank(p) => {
                let model: RankerModel<f32> = read_checkpoint(p)?;
                if model.config().n_mels != N_MELS {
                    return Err(Error::Config(format!(
                        "{}: checkpoint expects {} mel bands but features have {N_MELS}",
                        p.display(),
                        model.config().n_mels
                    )));
                }
                Scorer::Micrank(model)
            }
            RankMethod::Ev(None) => Scorer::Ev(EvWeights::uniform(N_MELS)),
            RankMethod::Ev(Some(p)) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let w: EvWeights = serde_json::from_str(&text)?;
                if w.bands() != N_MELS {
                    return Err(Error::Config(format!(
                        "{}: expected {N_MELS} EV weights",
                        p.display()
                    )));
                }
                Scorer::Ev(w)
            }
            RankMethod::CdBlind => Scorer::CdBlind,
            RankMethod::CdInformed => Scorer::CdInformed,
            RankMethod::Entropy(d) => Scorer::Entropy(d.clone()),
            RankMethod::Sdr => Scorer::Sdr,
            RankMethod::Closest => Scorer::Closest,
            RankMethod::Random(s) => Scorer::Random(*s),
        })
    }

    fn score(&self, manifest: &Manifest, index: usize) -> Result<ChannelScores> {
        let rec = &manifest.records[index];
        let m = rec.channel_paths.len();
        match self {
            Scorer::Micrank(model) => {
                let feats = manifest
                    .load_channels(rec)?
                    .iter()
                    .map(crate::dsp::logmel_features)
                    .collect::<Result<Vec<_>>>()?;
                score_utterance(model, &feats)
            }
            Scorer::Ev(w) => {
                envelope_variance(&channel_envelopes(&manifest.load_channels(rec)?)?, w)
            }
            Scorer::CdBlind => {
                cepstral_distance(&channel_cepstra(&manifest.load_channels(rec)?)?, None)
            }
            Scorer::CdInformed => {
                let clean = manifest.load_clean(rec)?;
                let reference = channel_cepstra(std::slice::from_ref(&clean))?.remove(0);
                cepstral_distance(
                    &channel_cepstra(&manifest.load_channels(rec)?)?,
                    Some(&reference),
                )
            }
            Scorer::Entropy(dir) => posterior_entropy(&load_posteriors(dir, &rec.id, m)?),
            Scorer::Sdr => sdr_scores(&manifest.load_channels(rec)?, &manifest.load_clean(rec)?),
            Scorer::Closest => closest_select(&rec.sim_metadata()?.scene.placement),
            Scorer::Random(seed) => random_select(m, record_seed(*seed, index)),
        }
    }
}

/// Per-record seed for random selection.
fn record_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
}

/// Posteriors of one utterance: `<dir>/<id>.ch<i>.csv` per channel, each
/// with one row per frame and one column per class, no header.
pub fn load_posteriors(dir: &Path, id: &str, channels: usize) -> Result<Vec<FrameMatrix>> {
    (0..channels)
        .map(|i| {
            let path = dir.join(format!("{id}.ch{i}.csv"));
            let csv_err = |e: csv::Error| Error::invalid(format!("{}: {e}", path.display()));
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .trim(csv::Trim::All)
                .from_path(&path)
                .map_err(csv_err)?;
            let mut data = Vec::new();
            let mut rows = 0;
            for rec in reader.records() {
                for field in rec.map_err(csv_err)?.iter() {
                    data.push(field.parse::<f64>().map_err(|e| {
                        Error::invalid(format!("{}: row {}: {e}", path.display(), rows + 1))
                    })?);
                }
                rows += 1;
            }
            if rows == 0 {
                return Err(Error::invalid(format!("{}: no frames", path.display())));
            }
            // The csv reader already rejects rows of unequal length.
            FrameMatrix::new(rows, data.len() / rows, data)
        })
        .collect()
}

/// Scores every record; failures are logged per record and reported as
/// one error after all records were attempted.
pub fn rank(manifest: &Manifest, method: &RankMethod) -> Result<Vec<RankingResult>> {
    let scorer = Scorer::new(method)?;
    let results: Vec<Result<RankingResult>> = (0..manifest.records.len())
        .into_par_iter()
        .map(|i| {
            let rec = &manifest.records[i];
            scorer
                .score(manifest, i)
                .map(|s| rank_channels(rec.id.clone(), &s))
                .map_err(|e| Error::invalid(format!("record {}: {e}", rec.id)))
        })
        .collect();
    let mut ok = Vec::with_capacity(results.len());
    let mut failed = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                error!("{e}");
                failed.push(e.to_string());
            }
        }
    }
    if !failed.is_empty() {
        return Err(Error::invalid(format!(
            "{} record(s) failed: {}",
            failed.len(),
            failed.join("; ")
        )));
    }
    Ok(ok)
}

pub fn write_rankings(rankings: &[RankingResult], out: &mut impl Write) -> Result<()> {
    for r in rankings {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

pub fn read_rankings(path: &Path) -> Result<Vec<RankingResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

/// Relevance table of a manifest in relevance units (higher is better).
pub fn relevance_table(manifest: &Manifest, metric: RelevanceMetric) -> Result<RelevanceTable> {
    let mut table = RelevanceTable::new();
    for rec in &manifest.records {
        let w = rec
            .relevance()?
            .iter()
            .map(|&v| match metric {
                RelevanceMetric::Wer => Ok(1.0 - v),
                RelevanceMetric::Wa | RelevanceMetric::Raw => Ok(v),
            })
            .collect::<Result<Vec<f64>>>()?;
        table.insert(rec.id.clone(), w)?;
    }
    Ok(table)
}

/// Evaluates ranking files against the manifest's relevance. Each file
/// holds one method; its name is taken from the records.
pub fn evaluate_files(
    manifest: &Manifest,
    ranking_files: &[PathBuf],
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let rel = relevance_table(manifest, cfg.relevance_metric)?;
    let mut methods = Vec::new();
    for path in ranking_files {
        let rankings = read_rankings(path)?;
        let name = rankings
            .first()
            .map(|r| r.method.clone())
            .unwrap_or_else(|| path.display().to_string());
        if rankings.iter().any(|r| r.method != name) {
            warn!("{}: mixed method tags, reporting as {name}", path.display());
        }
        methods.push((name, rankings));
    }
    evaluate(
        &methods,
        &rel,
        cfg.eval.k,
        cfg.relevance_metric == RelevanceMetric::Wer,
    )
}

/// Writes `report.json`, the resolved config and optionally per-utterance
/// CSV into `out_dir`.
pub fn write_report(report: &EvalReport, cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    create_dir(out_dir)?;
    cfg.write_resolved(out_dir)?;
    report.write_json(out_dir.join(REPORT_FILE))?;
    if cfg.eval.csv {
        report.write_csv(out_dir.join(DETAILS_FILE))?;
    }
    Ok(())
}

/// Tunes EV band weights on a labelled manifest.
pub fn fit_ev(manifest: &Manifest, cfg: &RunConfig) -> Result<(EvWeights, Vec<f64>)> {
    let examples = manifest
        .records
        .par_iter()
        .map(|rec| {
            let w = rec.relevance()?;
            let w: Vec<f64> = w
                .iter()
                .map(|&v| {
                    if cfg.relevance_metric == RelevanceMetric::Wer {
                        1.0 - v
                    } else {
                        v
                    }
                })
                .collect();
            let features = ev_band_features(&channel_envelopes(&manifest.load_channels(rec)?)?)?;
            Ok(EvExample {
                features,
                best: crate::selectors::argmax(&w),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    train_ev_weights(&examples, &cfg.ev)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_parsing() {
        assert_eq!(
            "random:7".parse::<RankMethod>().unwrap(),
            RankMethod::Random(7)
        );
        assert_eq!("ev".parse::<RankMethod>().unwrap(), RankMethod::Ev(None));
        assert_eq!(
            "ev:w.json".parse::<RankMethod>().unwrap(),
            RankMethod::Ev(Some("w.json".into()))
        );
        assert_eq!(
            "micrank:ck.bin".parse::<RankMethod>().unwrap(),
            RankMethod::Micrank("ck.bin".into())
        );
        for bad in ["micrank", "random:x", "bogus", "sdr:1", "entropy:"] {
            assert!(bad.parse::<RankMethod>().is_err(), "{bad}");
        }
    }
}
