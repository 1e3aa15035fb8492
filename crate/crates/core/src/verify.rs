//! Fast self-checks run by `micrank verify`: finite-difference gradient
//! checks of every loss composed with the full ranker, loss identities,
//! chunking formulas and the parameter census.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{FrameMatrix, LogMelFeatures};
use crate::error::Result;
use crate::ltr::{build_pair_set, listnet_loss, pointwise_xce, ranknet_loss, sigmoid, Strategy};
use crate::ranker::{
    chunk_utterance, Chunk, ChunkCache, ChunkMode, RankerConfig, RankerModel, Real,
};

/// Census target and tolerance for the default configuration.
pub const CENSUS_TARGET: usize = 266_000;
pub const CENSUS_TOLERANCE: f64 = 0.10;
pub const GRADCHECK_PARAMS: usize = 50;
pub const GRADCHECK_TOL_F64: f64 = 1e-5;
pub const GRADCHECK_TOL_F32: f64 = 1e-3;
/// Relative-error denominators are at least this fraction of the RMS
/// gradient of the checked parameters.
const F64_FLOOR: f64 = 1e-2;
const F32_FLOOR: f64 = 1e-1;
const MAX_GROUP_DRAWS: usize = 20;

/// Deliberate faults for exercising the failure path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Scales every analytic gradient by 1.01 before comparison.
    Gradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub strategy: Strategy,
    /// Largest relative error of the double-precision analytic gradient.
    pub max_rel_f64: f64,
    /// Largest relative error of the single-precision analytic gradient.
    pub max_rel_f32: f64,
    pub checked: usize,
    /// Parameters rejected because the perturbation crossed a PReLU kink.
    pub skipped: usize,
}

fn group_gradient<T: Real>(
    model: &RankerModel<T>,
    chunks: &[Chunk],
    targets: &[f64],
    strategy: Strategy,
) -> Result<Vec<f64>> {
    let caches = chunks
        .iter()
        .map(|c| model.forward(c))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = caches.iter().map(|c| c.score().to_f64_lossy()).collect();
    let lg = strategy.group_loss(targets, &scores, 0.0)?;
    let mut grad = vec![T::zero(); model.params().len()];
    for (cache, d) in caches.iter().zip(&lg.grad) {
        model.backward(cache, T::of(*d), &mut grad);
    }
    Ok(grad.iter().map(|g| g.to_f64_lossy()).collect())
}

/// First residual block a parameter feeds: `None` for the input stage,
/// the block count for the output layer.
fn first_block(model: &RankerModel<f64>, i: usize) -> Option<usize> {
    let blocks = &model.layout().blocks;
    if i < blocks[0].conv_in_w.start {
        return None;
    }
    Some(
        blocks
            .iter()
            .position(|b| i < b.conv_out_b.end)
            .unwrap_or(blocks.len()),
    )
}

/// Group loss and the PReLU sign pattern after a change to parameters
/// from block `start` onward, resuming from the cached unperturbed pass.
fn loss_and_signs(
    model: &RankerModel<f64>,
    chunks: &[Chunk],
    base: &[ChunkCache<f64>],
    start: Option<usize>,
    targets: &[f64],
    strategy: Strategy,
) -> Result<(f64, Vec<bool>)> {
    let mut scores = Vec::with_capacity(chunks.len());
    let mut signs = Vec::new();
    for (c, cache) in chunks.iter().zip(base) {
        let (score, s) = match start {
            Some(b) => model.forward_from(cache, b),
            None => {
                let full = model.forward(c)?;
                (full.score(), full.activation_signs())
            }
        };
        scores.push(score);
        signs.extend(s);
    }
    Ok((strategy.group_loss(targets, &scores, 0.0)?.loss, signs))
}

fn random_group(cfg: &RankerConfig, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Chunk>> {
    (0..m)
        .map(|_| {
            let t = rng.random_range(cfg.chunk_frames / 3..=cfg.chunk_frames);
            let data = (0..t * cfg.n_mels)
                .map(|_| rng.random_range(-12.0..2.0))
                .collect();
            let feats = LogMelFeatures(FrameMatrix::new(t, cfg.n_mels, data)?);
            Ok(chunk_utterance(&feats, cfg, ChunkMode::Train)?
                .chunks
                .remove(0))
        })
        .collect()
}

/// Central finite differences of the group loss for `n_params` random
/// parameters of a freshly initialized ranker, compared with the
/// double- and single-precision analytic gradients.
pub fn gradient_check(
    cfg: &RankerConfig,
    strategy: Strategy,
    n_params: usize,
    seed: u64,
    fault: Fault,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = RankerModel::<f64>::build(cfg.clone(), seed)?;
    // Move norm and output biases off their zero initialization.
    for p in model.params_mut() {
        *p += rng.random_range(-0.05..0.05);
    }
    // Training init shrinks residual branches and the output layer; check
    // at a generic point with every weight drawn at the full He bound.
    let weights: Vec<_> = model
        .layout()
        .tensors()
        .iter()
        .filter(|t| t.name.ends_with(".weight"))
        .map(|t| (t.range(), *t.shape.last().unwrap_or(&1)))
        .collect();
    for (range, fan_in) in weights {
        let bound = (6.0 / fan_in as f64).sqrt();
        model.params_mut()[range]
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-bound..bound));
    }
    let m = 3;
    // An activation within rounding distance of a PReLU kink puts the f32
    // pass on a different linear piece than the f64 pass; redraw until
    // both agree on every sign.
    let model32 = model.cast::<f32>();
    let mut chunks = random_group(cfg, m, &mut rng)?;
    for _ in 0..MAX_GROUP_DRAWS {
        let mut agree = true;
        for c in &chunks {
            agree &= model.forward(c)?.activation_signs() == model32.forward(c)?.activation_signs();
        }
        if agree {
            break;
        }
        chunks = random_group(cfg, m, &mut rng)?;
    }
    let targets: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
    let fault_scale = if fault == Fault::Gradient { 1.01 } else { 1.0 };
    let analytic64: Vec<f64> = group_gradient(&model, &chunks, &targets, strategy)?
        .into_iter()
        .map(|g| g * fault_scale)
        .collect();
    let analytic32: Vec<f64> = group_gradient(&model32, &chunks, &targets, strategy)?
        .into_iter()
        .map(|g| g * fault_scale)
        .collect();
    let base = chunks
        .iter()
        .map(|c| model.forward(c))
        .collect::<Result<Vec<_>>>()?;
    // Sign patterns of blocks `b..` for every chunk, indexed by `b`.
    let n_blocks = model.layout().blocks.len();
    let base_signs: Vec<Vec<bool>> = (0..=n_blocks)
        .map(|b| {
            base.iter()
                .flat_map(|c| {
                    c.activation_signs()
                        .split_off(b * 2 * cfg.hidden * cfg.chunk_frames)
                })
                .collect()
        })
        .collect();

    // Fourth-order central differences.
    let h = 1e-5;
    let n = model.params().len();
    let mut tried = std::collections::HashSet::new();
    let mut pairs = Vec::new();
    let mut skipped = 0;
    'draw: while pairs.len() < n_params && tried.len() < n {
        let i = rng.random_range(0..n);
        if !tried.insert(i) {
            continue;
        }
        let orig = model.params()[i];
        let start = first_block(&model, i);
        let expect = &base_signs[start.unwrap_or(0)];
        let mut l = [0.0; 4];
        for (k, step) in [(0, -2.0), (3, 2.0), (1, -1.0), (2, 1.0)] {
            model.params_mut()[i] = orig + step * h;
            let (loss, signs) = loss_and_signs(&model, &chunks, &base, start, &targets, strategy)?;
            model.params_mut()[i] = orig;
            if signs != *expect {
                skipped += 1;
                continue 'draw;
            }
            l[k] = loss;
        }
        let numeric = (l[0] - 8.0 * l[1] + 8.0 * l[2] - l[3]) / (12.0 * h);
        pairs.push((i, numeric));
    }
    // Denominators are floored relative to the gradient scale so that
    // near-zero components measure absolute rather than relative error.
    let scale = (pairs.iter().map(|(_, g)| g * g).sum::<f64>() / pairs.len().max(1) as f64).sqrt();
    let rel = |a: f64, num: f64, floor: f64| (a - num).abs() / a.abs().max(num.abs()).max(floor);
    let (mut max64, mut max32) = (0.0f64, 0.0f64);
    for &(i, num) in &pairs {
        max64 = max64.max(rel(analytic64[i], num, F64_FLOOR * scale));
        max32 = max32.max(rel(analytic32[i], num, F32_FLOOR * scale));
    }
    let checked = pairs.len();
    Ok(GradCheckReport {
        strategy,
        max_rel_f64: max64,
        max_rel_f32: max32,
        checked,
        skipped,
    })
}

/// Loss identities on random inputs; returns the worst violation of each.
pub fn loss_identity_checks(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut shift, mut prob_sum, mut swap, mut xce) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut pairs_ok = true;
    for _ in 0..500 {
        let m = rng.random_range(2..10);
        let w: Vec<f64> = (0..m)
            .map(|_| (rng.random_range(0..5) as f64) / 4.0)
            .collect();
        let f: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
        let c = rng.random_range(-10.0..10.0);
        let shifted: Vec<f64> = f.iter().map(|v| v + c).collect();
        let (a, b) = (
            listnet_loss(&w, &f).unwrap(),
            listnet_loss(&w, &shifted).unwrap(),
        );
        shift = shift.max((a.loss - b.loss).abs());

        let (fi, fj) = (f[0], f[1]);
        let ij = ranknet_loss(fi, fj, 1);
        let ji = ranknet_loss(fj, fi, 0);
        prob_sum = prob_sum.max((ij.prob + ranknet_loss(fj, fi, 1).prob - 1.0).abs());
        swap = swap
            .max((ij.loss - ji.loss).abs())
            .max((ij.d_fi - ji.d_fj).abs());

        let set = build_pair_set(&w, 0.0).unwrap();
        let ties = set.pairs.iter().any(|&(i, j)| w[i] == w[j]);
        let expected = (0..m)
            .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
            .filter(|&(i, j)| w[i] != w[j])
            .count();
        pairs_ok &= !ties && set.len() == expected && set.len() <= m * (m - 1) / 2;

        let (_, g) = pointwise_xce(w[0], f[0]).unwrap();
        xce = xce.max((g - (sigmoid(f[0]) - w[0])).abs());
    }
    vec![
        check(
            "listnet shift invariance",
            shift <= 1e-12,
            format!("max |dL| = {shift:.2e}"),
        ),
        check(
            "ranknet P(i>j)+P(j>i)=1",
            prob_sum <= 1e-12,
            format!("max error {prob_sum:.2e}"),
        ),
        check(
            "ranknet swap symmetry",
            swap <= 1e-12,
            format!("max error {swap:.2e}"),
        ),
        check(
            "pair set size and tie rule",
            pairs_ok,
            "ties excluded, |pairs| <= M(M-1)/2".to_string(),
        ),
        check(
            "pointwise xce gradient",
            xce <= 1e-12,
            format!("max |g - (sigma(f) - w)| = {xce:.2e}"),
        ),
    ]
}

pub fn expected_infer_chunks(t: usize, chunk: usize, stride: usize) -> usize {
    1.max((t.max(chunk) - chunk) / stride + 1)
}

/// Chunk counts and coverage for `trials` random lengths in `[1, 5000]`.
pub fn chunk_formula_check(cfg: &RankerConfig, trials: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cfg.chunk_frames;
    let stride = cfg.infer_stride();
    let mut failures = Vec::new();
    for _ in 0..trials {
        let t = rng.random_range(1..=5000usize);
        let feats = LogMelFeatures(FrameMatrix::zeros(t, cfg.n_mels));
        let train = chunk_utterance(&feats, cfg, ChunkMode::Train)?;
        let infer = chunk_utterance(&feats, cfg, ChunkMode::Infer)?;
        let last = infer.chunks.last().expect("at least one chunk");
        let tail = last.start + last.n_valid == t;
        if train.len() != t.div_ceil(len)
            || infer.len() != expected_infer_chunks(t, len, stride)
            || !tail
        {
            failures.push(t);
        }
    }
    Ok(check(
        "chunk formulas",
        failures.is_empty(),
        if failures.is_empty() {
            format!("{trials} random lengths, train ceil(T/{len}), infer stride {stride} with tail coverage")
        } else {
            format!("mismatch for T = {failures:?}")
        },
    ))
}

pub fn census_check(cfg: &RankerConfig) -> Result<(CheckResult, usize)> {
    let model = RankerModel::<f32>::build(cfg.clone(), 0)?;
    let total = model.census().total;
    let dev = (total as f64 - CENSUS_TARGET as f64).abs() / CENSUS_TARGET as f64;
    let dilations_ok = cfg.dilations == [1, 2, 4, 8, 16];
    Ok((
        check(
            "parameter census",
            dev <= CENSUS_TOLERANCE && dilations_ok,
            format!(
                "{total} parameters ({:+.2}% vs {CENSUS_TARGET}), dilations {:?} x {} groups",
                100.0 * (total as f64 / CENSUS_TARGET as f64 - 1.0),
                cfg.dilations,
                cfg.blocks
            ),
        ),
        total,
    ))
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub census_total: usize,
    pub seconds: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Runs every check on the default ranker configuration.
pub fn run_verify(fault: Fault) -> Result<VerifyReport> {
    let start = Instant::now();
    let cfg = RankerConfig::default();
    let mut checks = Vec::new();
    for (k, strategy) in Strategy::ALL.into_iter().enumerate() {
        let r = gradient_check(&cfg, strategy, GRADCHECK_PARAMS, 100 + k as u64, fault)?;
        checks.push(check(
            format!("gradcheck {strategy}"),
            r.checked >= GRADCHECK_PARAMS
                && r.max_rel_f64 < GRADCHECK_TOL_F64
                && r.max_rel_f32 < GRADCHECK_TOL_F32,
            format!(
                "{} params ({} skipped at kinks), max rel err f64 {:.2e}, f32 {:.2e}",
                r.checked, r.skipped, r.max_rel_f64, r.max_rel_f32
            ),
        ));
    }
    checks.extend(loss_identity_checks(7));
    checks.push(chunk_formula_check(&cfg, 1000, 11)?);
    let (census, census_total) = census_check(&cfg)?;
    checks.push(census);
    Ok(VerifyReport {
        checks,
        census_total,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RankerConfig {
        RankerConfig {
            chunk_frames: 40,
            ..RankerConfig::default()
        }
        .with_depth(1, 2)
    }

    #[test]
    fn gradcheck_passes_and_fault_is_caught() {
        for s in Strategy::ALL {
            let r = gradient_check(&small(), s, 30, 1, Fault::None).unwrap();
            assert_eq!(r.checked, 30);
            assert!(r.max_rel_f64 < GRADCHECK_TOL_F64, "{r:?}");
            assert!(r.max_rel_f32 < GRADCHECK_TOL_F32, "{r:?}");
        }
        let r = gradient_check(&small(), Strategy::Listnet, 30, 1, Fault::Gradient).unwrap();
        assert!(r.max_rel_f64 > GRADCHECK_TOL_F64);
    }

    #[test]
    fn identities_and_formulas() {
        assert!(loss_identity_checks(1).iter().all(|c| c.passed));
        assert!(
            chunk_formula_check(&RankerConfig::default(), 200, 2)
                .unwrap()
                .passed
        );
        let (c, total) = census_check(&RankerConfig::default()).unwrap();
        assert!(c.passed, "{c}");
        assert_eq!(total, 266_799);
    }

    #[test]
    fn infer_formula_examples() {
        assert_eq!(expected_infer_chunks(1, 200, 50), 1);
        assert_eq!(expected_infer_chunks(200, 200, 50), 1);
        assert_eq!(expected_infer_chunks(250, 200, 50), 2);
        assert_eq!(expected_infer_chunks(449, 200, 50), 5);
    }
}
