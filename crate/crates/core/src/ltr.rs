//! Learning-to-rank objectives over per-channel scores.
//!
//! Every loss is a non-negative cross-entropy (or squared error) that is
//! minimized, and each returns its analytic gradient with respect to the
//! network scores. Softmax and log-sigmoid terms are evaluated in their
//! overflow-free forms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|&v| v - lse).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Loss value and its derivative with respect to the score(s).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn check_unit(w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::invalid(format!("relevance {w} outside [0, 1]")));
    }
    Ok(())
}

/// Soft-label binary cross-entropy `-[w ln σ(f) + (1-w) ln(1-σ(f))]`.
pub fn pointwise_xce(w: f64, f: f64) -> Result<(f64, f64)> {
    check_unit(w)?;
    let loss = w * softplus(-f) + (1.0 - w) * softplus(f);
    Ok((loss, sigmoid(f) - w))
}

/// Only the positive term `-w ln σ(f)`. Its minimum is degenerate; kept for
/// comparison runs.
pub fn pointwise_xce_positive_only(w: f64, f: f64) -> Result<(f64, f64)> {
    check_unit(w)?;
    Ok((w * softplus(-f), w * (sigmoid(f) - 1.0)))
}

pub fn pointwise_mse(w: f64, f: f64) -> (f64, f64) {
    ((w - f) * (w - f), 2.0 * (f - w))
}

/// 1 when channel `i` is strictly more relevant than `j`, else 0.
pub fn pairwise_label(w_i: f64, w_j: f64) -> u8 {
    u8::from(w_i > w_j)
}

/// Unordered channel pairs whose relevance differs by more than `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub delta: f64,
    /// `(i, j)` with `i < j`.
    pub pairs: Vec<(usize, usize)>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn build_pair_set(w: &[f64], delta: f64) -> Result<PairSet> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::invalid(format!(
            "pair threshold must be >= 0, got {delta}"
        )));
    }
    let mut pairs = Vec::new();
    for i in 0..w.len() {
        for j in i + 1..w.len() {
            if (w[i] - w[j]).abs() > delta {
                pairs.push((i, j));
            }
        }
    }
    Ok(PairSet { delta, pairs })
}

/// RankNet term for one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLoss {
    /// `P(i > j) = σ(f_i - f_j)`.
    pub prob: f64,
    pub loss: f64,
    pub d_fi: f64,
    pub d_fj: f64,
}

pub fn ranknet_loss(f_i: f64, f_j: f64, y: u8) -> PairLoss {
    let diff = f_i - f_j;
    let y = f64::from(y.min(1));
    let prob = sigmoid(diff);
    let loss = y * softplus(-diff) + (1.0 - y) * softplus(diff);
    PairLoss {
        prob,
        loss,
        d_fi: prob - y,
        d_fj: y - prob,
    }
}

/// Mean RankNet loss over the pair set of one utterance. An empty pair set
/// contributes zero loss and zero gradient.
pub fn ranknet_list_loss(w: &[f64], f: &[f64], delta: f64) -> Result<LossGrad> {
    check_lengths(w, f)?;
    let set = build_pair_set(w, delta)?;
    let mut grad = vec![0.0; f.len()];
    if set.is_empty() {
        return Ok(LossGrad { loss: 0.0, grad });
    }
    let scale = 1.0 / set.len() as f64;
    let mut loss = 0.0;
    for &(i, j) in &set.pairs {
        let term = ranknet_loss(f[i], f[j], pairwise_label(w[i], w[j]));
        loss += term.loss * scale;
        grad[i] += term.d_fi * scale;
        grad[j] += term.d_fj * scale;
    }
    Ok(LossGrad { loss, grad })
}

/// ListNet cross-entropy `-Σ softmax(w)_i ln softmax(f)_i`.
pub fn listnet_loss(w: &[f64], f: &[f64]) -> Result<LossGrad> {
    check_lengths(w, f)?;
    if w.len() < 2 {
        return Err(Error::invalid("list-wise loss needs at least 2 channels"));
    }
    let p = softmax(w);
    let log_q = log_softmax(f);
    let loss = -p.iter().zip(&log_q).map(|(a, b)| a * b).sum::<f64>();
    let grad = log_q.iter().zip(&p).map(|(lq, pi)| lq.exp() - pi).collect();
    Ok(LossGrad { loss, grad })
}

fn check_lengths(w: &[f64], f: &[f64]) -> Result<()> {
    if w.len() != f.len() {
        return Err(Error::Shape {
            expected: format!("{} scores", w.len()),
            got: format!("{} scores", f.len()),
        });
    }
    if w.iter().chain(f).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite relevance or score"));
    }
    Ok(())
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    PointwiseXce,
    PointwiseMse,
    Ranknet,
    Listnet,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::PointwiseXce,
        Strategy::PointwiseMse,
        Strategy::Ranknet,
        Strategy::Listnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::PointwiseXce => "pointwise_xce",
            Strategy::PointwiseMse => "pointwise_mse",
            Strategy::Ranknet => "ranknet",
            Strategy::Listnet => "listnet",
        }
    }

    pub fn is_pointwise(self) -> bool {
        matches!(self, Strategy::PointwiseXce | Strategy::PointwiseMse)
    }

    /// Loss of one group of scores with their labels: the mean per-sample
    /// loss for point-wise objectives, the mean pair loss for RankNet, the
    /// list cross-entropy for ListNet.
    pub fn group_loss(self, w: &[f64], f: &[f64], delta: f64) -> Result<LossGrad> {
        match self {
            Strategy::PointwiseXce | Strategy::PointwiseMse => {
                check_lengths(w, f)?;
                if w.is_empty() {
                    return Err(Error::invalid("empty sample group"));
                }
                let n = w.len() as f64;
                let mut loss = 0.0;
                let mut grad = Vec::with_capacity(w.len());
                for (&wi, &fi) in w.iter().zip(f) {
                    let (l, g) = if self == Strategy::PointwiseXce {
                        pointwise_xce(wi, fi)?
                    } else {
                        pointwise_mse(wi, fi)
                    };
                    loss += l / n;
                    grad.push(g / n);
                }
                Ok(LossGrad { loss, grad })
            }
            Strategy::Ranknet => ranknet_list_loss(w, f, delta),
            Strategy::Listnet => listnet_loss(w, f),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy '{s}' (expected pointwise_xce, pointwise_mse, ranknet or listnet)"
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn central<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], i: usize) -> f64 {
        let h = 1e-5;
        let mut a = x.to_vec();
        a[i] += h;
        let mut b = x.to_vec();
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn xce_examples() {
        let (l, g) = pointwise_xce(1.0, 0.0).unwrap();
        assert_abs_diff_eq!(l, LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(g, -0.5, epsilon = 1e-15);
        let (l, g) = pointwise_xce(0.5, 0.0).unwrap();
        assert_abs_diff_eq!(l, LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(g, 0.0, epsilon = 1e-15);
        // σ(0.2) = 1 / (1 + e^-0.2) = 0.549833997...
        let s = 1.0 / (1.0 + (-0.2f64).exp());
        let (l, g) = pointwise_xce(0.7, 0.2).unwrap();
        assert_abs_diff_eq!(l, -(0.7 * s.ln() + 0.3 * (1.0 - s).ln()), epsilon = 1e-14);
        assert_abs_diff_eq!(g, -0.150166, epsilon = 1e-6);
        assert!(pointwise_xce(1.2, 0.0).is_err());
        assert!(pointwise_xce(-0.1, 0.0).is_err());
    }

    #[test]
    fn positive_only_variant_is_degenerate() {
        // Loss keeps decreasing as f grows, whatever the label.
        let (l1, _) = pointwise_xce_positive_only(0.1, 1.0).unwrap();
        let (l2, _) = pointwise_xce_positive_only(0.1, 5.0).unwrap();
        assert!(l2 < l1);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(pointwise_mse(0.4, 0.4), (0.0, 0.0));
        assert_eq!(pointwise_mse(1.0, 0.0), (1.0, -2.0));
        let (l, g) = pointwise_mse(0.3, 0.8);
        assert_abs_diff_eq!(l, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(g, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn pair_labels_and_sets() {
        assert_eq!(pairwise_label(0.8, 0.3), 1);
        assert_eq!(pairwise_label(0.3, 0.8), 0);
        assert_eq!(pairwise_label(0.5, 0.5), 0);
        let s = build_pair_set(&[0.9, 0.5, 0.5], 0.1).unwrap();
        assert_eq!(s.pairs, vec![(0, 1), (0, 2)]);
        let w: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        assert_eq!(build_pair_set(&w, 0.0).unwrap().len(), 28);
        assert!(build_pair_set(&[0.3; 5], 0.0).unwrap().is_empty());
        assert!(build_pair_set(&w, -1.0).is_err());
    }

    #[test]
    fn ranknet_examples() {
        assert_abs_diff_eq!(ranknet_loss(0.3, 0.3, 1).loss, LN_2, epsilon = 1e-15);
        assert!(ranknet_loss(20.0, 0.0, 1).loss < 1e-8);
        // ln(1 + e) = 1.31326168751...
        assert_abs_diff_eq!(
            ranknet_loss(1.0, 0.0, 0).loss,
            1.313_261_687_518_223,
            epsilon = 1e-12
        );
    }

    #[test]
    fn listnet_examples() {
        let r = listnet_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(r.loss, LN_2, epsilon = 1e-15);
        let p = softmax(&[1.0, 0.0]);
        assert_abs_diff_eq!(p[0], 0.731_058_578_630_005, epsilon = 1e-12);
        let w = [0.2, 0.9, 0.4, 0.1];
        let r = listnet_loss(&w, &w).unwrap();
        let entropy = -softmax(&w).iter().map(|p| p * p.ln()).sum::<f64>();
        assert_abs_diff_eq!(r.loss, entropy, epsilon = 1e-14);
        assert!(r.grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn listnet_exactly_stationary_at_shifted_labels() {
        let w = [0.25, 0.5, 0.75, 1.0];
        let f: Vec<f64> = w.iter().map(|v| v + 3.0).collect();
        let r = listnet_loss(&w, &f).unwrap();
        assert!(r.grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn empty_pair_set_contributes_nothing() {
        let r = ranknet_list_loss(&[0.5, 0.5], &[1.0, -1.0], 0.0).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("lambdarank".parse::<Strategy>().is_err());
    }

    proptest! {
        #[test]
        fn gradients_match_central_differences(
            w in proptest::collection::vec(0.0f64..1.0, 2..9),
            f_seed in proptest::collection::vec(-3.0f64..3.0, 8),
        ) {
            let f = &f_seed[..w.len()];
            for strategy in Strategy::ALL {
                let lg = strategy.group_loss(&w, f, 0.0).unwrap();
                for i in 0..f.len() {
                    let num = central(|x| strategy.group_loss(&w, x, 0.0).unwrap().loss, f, i);
                    prop_assert!(
                        rel_err(lg.grad[i], num) < 1e-6 || (lg.grad[i] - num).abs() < 1e-10,
                        "{strategy} grad[{i}]: {} vs {num}", lg.grad[i]
                    );
                }
            }
        }

        #[test]
        fn ranknet_antisymmetry(fi in -30.0f64..30.0, fj in -30.0f64..30.0, y in 0u8..2) {
            let a = ranknet_loss(fi, fj, y);
            let b = ranknet_loss(fj, fi, 1 - y);
            prop_assert!((a.prob + b.prob - 1.0).abs() <= 1e-15);
            prop_assert!((a.loss - b.loss).abs() <= 1e-12);
        }

        #[test]
        fn listnet_shift_invariance(
            w in proptest::collection::vec(0.0f64..1.0, 2..9),
            f in proptest::collection::vec(-5.0f64..5.0, 8),
            c in -50.0f64..50.0,
        ) {
            let f = &f[..w.len()];
            let shifted: Vec<f64> = f.iter().map(|v| v + c).collect();
            let a = listnet_loss(&w, f).unwrap();
            let b = listnet_loss(&w, &shifted).unwrap();
            prop_assert!((a.loss - b.loss).abs() <= 1e-12);
            for (x, y) in a.grad.iter().zip(&b.grad) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn listnet_bounded_below_by_label_entropy(
            w in proptest::collection::vec(0.0f64..1.0, 2..9),
            f in proptest::collection::vec(-5.0f64..5.0, 8),
        ) {
            let f = &f[..w.len()];
            let entropy = -softmax(&w).iter().map(|p| p * p.ln()).sum::<f64>();
            prop_assert!(listnet_loss(&w, f).unwrap().loss >= entropy - 1e-12);
        }

        #[test]
        fn pair_set_bound(w in proptest::collection::vec(0.0f64..1.0, 0..12), delta in 0.0f64..0.5) {
            let m = w.len();
            let set = build_pair_set(&w, delta).unwrap();
            prop_assert!(set.len() <= m * m.saturating_sub(1) / 2);
            for &(i, j) in &set.pairs {
                prop_assert!(i < j && (w[i] - w[j]).abs() > delta);
            }
        }

        #[test]
        fn xce_gradient_sign(w in 0.0f64..1.0, f in -10.0f64..10.0) {
            let (_, g) = pointwise_xce(w, f).unwrap();
            prop_assert_eq!(g > 0.0, sigmoid(f) > w);
        }
    }
}
