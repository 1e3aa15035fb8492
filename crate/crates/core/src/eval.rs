//! Evaluation: rankings from channel scores, selection quality (Best and
//! Top-k mean relevance), selection accuracy and score/relevance
//! correlation.
//!
//! Everything is reported in relevance units where higher is better. When
//! the labels came from word error rates, [`EvalReport::wer_view`] adds the
//! `1 - relevance` view.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selectors::ChannelScores;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub id: String,
    /// Channel indices, best first.
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
    pub method: String,
}

impl RankingResult {
    pub fn top(&self) -> usize {
        self.order[0]
    }
}

/// Sorts channels by descending score; equal scores keep index order.
pub fn rank_channels(id: impl Into<String>, scores: &ChannelScores) -> RankingResult {
    let s = scores.values();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    RankingResult {
        id: id.into(),
        order,
        scores: s.to_vec(),
        method: scores.method().to_string(),
    }
}

/// Per-utterance relevance in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelevanceTable {
    entries: Vec<(String, Vec<f64>)>,
    index: HashMap<String, usize>,
}

impl RelevanceTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, relevance: Vec<f64>) -> Result<()> {
        let id = id.into();
        if relevance.is_empty() {
            return Err(Error::invalid(format!(
                "utterance {id}: no relevance values"
            )));
        }
        if relevance.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid(format!(
                "utterance {id}: non-finite relevance"
            )));
        }
        if self.index.contains_key(&id) {
            return Err(Error::invalid(format!("duplicate utterance id {id}")));
        }
        self.index.insert(id.clone(), self.entries.len());
        self.entries.push((id, relevance));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.entries[i].1.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries
            .iter()
            .map(|(id, w)| (id.as_str(), w.as_slice()))
    }

    /// Rankings that order channels by their relevance.
    pub fn oracle_rankings(&self) -> Vec<RankingResult> {
        self.iter()
            .map(|(id, w)| {
                let scores = ChannelScores::new(w.to_vec(), ORACLE).expect("relevance is finite");
                rank_channels(id, &scores)
            })
            .collect()
    }
}

pub const ORACLE: &str = "oracle";

/// Pairs each ranking with its relevance row, checking that both sides
/// cover the same utterances with matching channel counts.
fn align<'a>(
    rankings: &'a [RankingResult],
    rel: &'a RelevanceTable,
) -> Result<Vec<(&'a RankingResult, &'a [f64])>> {
    let mut seen = BTreeSet::new();
    let mut missing_rel = Vec::new();
    for r in rankings {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::invalid(format!(
                "duplicate ranking for utterance {}",
                r.id
            )));
        }
        if rel.get(&r.id).is_none() {
            missing_rel.push(r.id.clone());
        }
    }
    let missing_rank: Vec<&str> = rel
        .iter()
        .map(|(id, _)| id)
        .filter(|id| !seen.contains(id))
        .collect();
    if !missing_rel.is_empty() || !missing_rank.is_empty() {
        return Err(Error::invalid(format!(
            "utterance coverage mismatch: without ranking [{}]; without relevance [{}]",
            missing_rank.join(", "),
            missing_rel.join(", ")
        )));
    }
    rankings
        .iter()
        .map(|r| {
            let w = rel.get(&r.id).expect("coverage checked");
            if r.order.len() != w.len() {
                return Err(Error::Shape {
                    expected: format!("{} channels for {}", w.len(), r.id),
                    got: format!("{} ranked channels", r.order.len()),
                });
            }
            Ok((r, w))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    /// Mean relevance of the top-ranked channel.
    pub best: f64,
    /// Mean over utterances of the mean relevance of the top-k channels.
    pub top_k: f64,
    pub k: usize,
}

pub fn selection_metrics(
    rankings: &[RankingResult],
    rel: &RelevanceTable,
    k: usize,
) -> Result<SelectionMetrics> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let pairs = align(rankings, rel)?;
    if pairs.is_empty() {
        return Err(Error::invalid("no utterances to evaluate"));
    }
    let (mut best, mut top_k) = (0.0, 0.0);
    for (r, w) in &pairs {
        if k > w.len() {
            return Err(Error::invalid(format!(
                "k = {k} exceeds the {} channels of utterance {}",
                w.len(),
                r.id
            )));
        }
        best += w[r.top()];
        top_k += r.order[..k].iter().map(|&i| w[i]).sum::<f64>() / k as f64;
    }
    let n = pairs.len() as f64;
    Ok(SelectionMetrics {
        best: best / n,
        top_k: top_k / n,
        k,
    })
}

/// Fraction of utterances whose top-ranked channel has maximal relevance.
pub fn selection_accuracy(rankings: &[RankingResult], rel: &RelevanceTable) -> Result<f64> {
    let pairs = align(rankings, rel)?;
    if pairs.is_empty() {
        return Err(Error::invalid("no utterances to evaluate"));
    }
    let hits = pairs
        .iter()
        .filter(|(r, w)| {
            let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            w[r.top()] == max
        })
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson: f64,
    pub spearman: f64,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            expected: format!("{} values", x.len()),
            got: format!("{} values", y.len()),
        });
    }
    if x.len() < 2 {
        return Err(Error::invalid("correlation needs at least 2 points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid(
            "correlation is undefined for a constant vector",
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn correlation(x: &[f64], y: &[f64]) -> Result<Correlation> {
    let pearson_r = pearson(x, y)?;
    let spearman = pearson(&average_ranks(x), &average_ranks(y))?;
    Ok(Correlation {
        pearson: pearson_r,
        spearman,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub best: f64,
    pub top_k: f64,
    pub accuracy: f64,
    /// Pooled over all (utterance, channel) pairs; absent when undefined.
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceDetail {
    pub method: String,
    pub id: String,
    pub selected: usize,
    pub selected_relevance: f64,
    pub top_k_relevance: f64,
    pub scores: Vec<f64>,
    pub relevance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub n_utterances: usize,
    /// Oracle first, then methods in the order given.
    pub methods: Vec<MethodReport>,
    /// Labels were derived from word error rates.
    pub wer_view: bool,
    pub utterances: Vec<UtteranceDetail>,
}

fn method_report(
    method: &str,
    rankings: &[RankingResult],
    rel: &RelevanceTable,
    k: usize,
    details: &mut Vec<UtteranceDetail>,
) -> Result<MethodReport> {
    let m = selection_metrics(rankings, rel, k)?;
    let accuracy = selection_accuracy(rankings, rel)?;
    let pairs = align(rankings, rel)?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (r, w) in &pairs {
        xs.extend_from_slice(&r.scores);
        ys.extend_from_slice(w);
        details.push(UtteranceDetail {
            method: method.to_string(),
            id: r.id.clone(),
            selected: r.top(),
            selected_relevance: w[r.top()],
            top_k_relevance: r.order[..k].iter().map(|&i| w[i]).sum::<f64>() / k as f64,
            scores: r.scores.clone(),
            relevance: w.to_vec(),
        });
    }
    let corr = match correlation(&xs, &ys) {
        Ok(c) => Some(c),
        Err(e) => {
            warn!("{method}: {e}");
            None
        }
    };
    Ok(MethodReport {
        method: method.to_string(),
        best: m.best,
        top_k: m.top_k,
        accuracy,
        pearson: corr.map(|c| c.pearson),
        spearman: corr.map(|c| c.spearman),
    })
}

/// Evaluates every method's rankings against `rel`, with an oracle row in
/// front.
pub fn evaluate(
    methods: &[(String, Vec<RankingResult>)],
    rel: &RelevanceTable,
    k: usize,
    wer_view: bool,
) -> Result<EvalReport> {
    let mut utterances = Vec::new();
    let mut rows = vec![method_report(
        ORACLE,
        &rel.oracle_rankings(),
        rel,
        k,
        &mut utterances,
    )?];
    for (name, rankings) in methods {
        let row = method_report(name, rankings, rel, k, &mut utterances)
            .map_err(|e| Error::invalid(format!("method {name}: {e}")))?;
        if row.best > rows[0].best + 1e-12 {
            return Err(Error::invalid(format!(
                "method {name} exceeds the oracle ({} > {})",
                row.best, rows[0].best
            )));
        }
        rows.push(row);
    }
    Ok(EvalReport {
        k,
        n_utterances: rel.len(),
        methods: rows,
        wer_view,
        utterances,
    })
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        let top = format!("top{}", self.k);
        let mut header = vec![
            "method".to_string(),
            "best".into(),
            top.clone(),
            "acc".into(),
            "pearson".into(),
            "spearman".into(),
        ];
        if self.wer_view {
            header.push("wer_best".into());
            header.push(format!("wer_{top}"));
        }
        let mut rows = vec![header];
        for m in &self.methods {
            let mut row = vec![
                m.method.clone(),
                format!("{:.4}", m.best),
                format!("{:.4}", m.top_k),
                format!("{:.3}", m.accuracy),
                fmt_opt(m.pearson),
                fmt_opt(m.spearman),
            ];
            if self.wer_view {
                row.push(format!("{:.4}", 1.0 - m.best));
                row.push(format!("{:.4}", 1.0 - m.top_k));
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &rows {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, &w))| {
                    if c == 0 {
                        format!("{v:<w$}")
                    } else {
                        format!("{v:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    /// One row per (method, utterance, channel).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::invalid(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["method", "id", "channel", "score", "relevance", "selected"])
            .map_err(csv_err)?;
        for u in &self.utterances {
            for (c, (s, r)) in u.scores.iter().zip(&u.relevance).enumerate() {
                w.write_record([
                    u.method.as_str(),
                    u.id.as_str(),
                    &c.to_string(),
                    &s.to_string(),
                    &r.to_string(),
                    if c == u.selected { "1" } else { "0" },
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ranking(id: &str, scores: &[f64]) -> RankingResult {
        rank_channels(id, &ChannelScores::new(scores.to_vec(), "m").unwrap())
    }

    fn table(rows: &[(&str, &[f64])]) -> RelevanceTable {
        let mut t = RelevanceTable::new();
        for (id, w) in rows {
            t.insert(*id, w.to_vec()).unwrap();
        }
        t
    }

    #[test]
    fn ranking_order() {
        assert_eq!(ranking("a", &[0.1, 0.9, 0.4]).order, vec![1, 2, 0]);
        assert_eq!(ranking("a", &[0.5; 5]).order, vec![0, 1, 2, 3, 4]);
        assert_eq!(ranking("a", &[0.2, 0.7, 0.2, 0.7]).order, vec![1, 3, 0, 2]);
    }

    #[test]
    fn selection_example() {
        let rel = table(&[("u", &[0.2, 0.9, 0.5])]);
        let r = vec![ranking("u", &[0.1, 0.9, 0.4])];
        let m = selection_metrics(&r, &rel, 3).unwrap();
        assert_eq!(m.best, 0.9);
        assert!((m.top_k - 1.6 / 3.0).abs() < 1e-12);
        assert!(selection_metrics(&r, &rel, 4).is_err());
        assert!(selection_metrics(&r, &rel, 0).is_err());
    }

    #[test]
    fn perfect_and_inverted_rankers() {
        let rel = table(&[("a", &[0.2, 0.9, 0.5]), ("b", &[0.7, 0.1, 0.3])]);
        let perfect: Vec<_> = rel.iter().map(|(id, w)| ranking(id, w)).collect();
        let oracle = selection_metrics(&rel.oracle_rankings(), &rel, 1).unwrap();
        assert_eq!(
            selection_metrics(&perfect, &rel, 1).unwrap().best,
            oracle.best
        );
        assert_eq!(selection_accuracy(&perfect, &rel).unwrap(), 1.0);
        let inverted: Vec<_> = rel
            .iter()
            .map(|(id, w)| ranking(id, &w.iter().map(|v| -v).collect::<Vec<_>>()))
            .collect();
        assert_eq!(selection_accuracy(&inverted, &rel).unwrap(), 0.0);
    }

    #[test]
    fn tied_relevance_always_accurate() {
        let rel = table(&[("a", &[0.4; 4])]);
        assert_eq!(
            selection_accuracy(&[ranking("a", &[0.0, 3.0, 1.0, 2.0])], &rel).unwrap(),
            1.0
        );
    }

    #[test]
    fn coverage_mismatch_lists_ids() {
        let rel = table(&[("a", &[0.1, 0.2]), ("b", &[0.3, 0.4])]);
        let err = selection_metrics(
            &[ranking("a", &[1.0, 0.0]), ranking("c", &[1.0, 0.0])],
            &rel,
            1,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains('b') && err.contains('c'), "{err}");
    }

    #[test]
    fn random_ranking_matches_mean_relevance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rel = RelevanceTable::new();
        let mut rankings = Vec::new();
        let n = 4000;
        for u in 0..n {
            let w: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
            rankings.push(ranking(&u.to_string(), &s));
            rel.insert(u.to_string(), w).unwrap();
        }
        let mean: f64 = rel.iter().flat_map(|(_, w)| w.iter()).sum::<f64>() / (8 * n) as f64;
        let best = selection_metrics(&rankings, &rel, 1).unwrap().best;
        // Uniform(0,1) relevance: standard deviation 1/sqrt(12) per pick.
        let se = (1.0 / 12.0f64).sqrt() / (n as f64).sqrt();
        assert!((best - mean).abs() < 4.0 * se, "{best} vs {mean}");
    }

    #[test]
    fn correlation_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let c = correlation(&x, &x).unwrap();
        assert!((c.pearson - 1.0).abs() < 1e-15 && (c.spearman - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        let y = [1.0, 4.0, 9.0, 16.0];
        let c = correlation(&x, &y).unwrap();
        assert!((c.spearman - 1.0).abs() < 1e-15);
        // Hand-computed: sxy = 25, sxx = 5, syy = 129.
        let expect = 25.0 / (5.0f64 * 129.0).sqrt();
        assert!((c.pearson - expect).abs() < 1e-12);
        assert!((c.pearson - 0.9843).abs() < 1e-4);
        assert!(correlation(&x, &[2.0; 4]).is_err());
        assert!(correlation(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn average_rank_ties() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 10.0, 30.0]),
            vec![1.5, 3.0, 1.5, 4.0]
        );
    }

    #[test]
    fn report_has_oracle_row_and_table() {
        let rel = table(&[("a", &[0.2, 0.9, 0.5]), ("b", &[0.7, 0.1, 0.3])]);
        let r = vec![
            ranking("a", &[0.3, 0.1, 0.2]),
            ranking("b", &[0.0, 1.0, 0.5]),
        ];
        let rep = evaluate(&[("ev".into(), r)], &rel, 2, true).unwrap();
        assert_eq!(rep.methods[0].method, ORACLE);
        assert_eq!(rep.methods[0].accuracy, 1.0);
        assert!(rep.methods[0].best >= rep.methods[1].best);
        let t = rep.table();
        assert!(t.contains("oracle") && t.contains("wer_best"));
        assert_eq!(rep.utterances.len(), 4);
        let dir = tempfile::tempdir().unwrap();
        rep.write_csv(dir.path().join("d.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * (3 + 3));
    }

    proptest! {
        #[test]
        fn oracle_dominates(
            rows in prop::collection::vec(prop::collection::vec((0.0f64..1.0, -5.0f64..5.0), 2..9), 1..20)
        ) {
            let mut rel = RelevanceTable::new();
            let mut rankings = Vec::new();
            for (u, row) in rows.iter().enumerate() {
                let (w, s): (Vec<f64>, Vec<f64>) = row.iter().copied().unzip();
                rel.insert(u.to_string(), w).unwrap();
                rankings.push(ranking(&u.to_string(), &s));
            }
            let oracle = rel.oracle_rankings();
            let o1 = selection_metrics(&oracle, &rel, 1).unwrap();
            let o2 = selection_metrics(&oracle, &rel, 2).unwrap();
            prop_assert!(o1.best >= selection_metrics(&rankings, &rel, 1).unwrap().best);
            prop_assert!(o1.top_k >= o2.top_k);
            let acc = selection_accuracy(&rankings, &rel).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
        }

        #[test]
        fn pearson_affine_invariant(
            pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40),
            a in 0.1f64..10.0, b in -5.0f64..5.0, c in 0.1f64..10.0, d in -5.0f64..5.0,
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            if let Ok(r) = pearson(&x, &y) {
                let xt: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                let yt: Vec<f64> = y.iter().map(|v| c * v + d).collect();
                prop_assert!((pearson(&xt, &yt).unwrap() - r).abs() < 1e-9);
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn ranking_is_permutation_equivariant(s in prop::collection::vec(-3.0f64..3.0, 1..10), seed in 0u64..100) {
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..s.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<f64> = perm.iter().map(|&i| s[i]).collect();
            let a = ranking("x", &s);
            let b = ranking("x", &permuted);
            // Same multiset of scores read off in rank order.
            let sa: Vec<f64> = a.order.iter().map(|&i| s[i]).collect();
            let sb: Vec<f64> = b.order.iter().map(|&i| permuted[i]).collect();
            prop_assert_eq!(sa, sb);
        }
    }
}
