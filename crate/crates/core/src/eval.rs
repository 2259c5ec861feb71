//! Rank-based scoring of candidates against the labelled corpus and the
//! comparison report across candidate sets.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::alphabet::Peptide;
use crate::data::{evaluate_raw, sample_unique, RawRecord};
use crate::error::{Error, Result};
use crate::oracle::BindingOracle;
use crate::rng::SeedStream;
use crate::stats::{iqr, median};

pub const NUM_CLASSES: usize = 5;
/// Class-0 threshold as a fraction of the worst possible total `2 (N + 1)`.
pub const CLASS0_FRACTION: f64 = 0.1;

/// `1 +` the number of references strictly below `v`.
pub fn rank_against(sorted_reference: &[f64], v: f64) -> usize {
    1 + sorted_reference.partition_point(|&r| r < v)
}

/// Both corpus properties, sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct RankReference {
    binding: Vec<f64>,
    hydro: Vec<f64>,
}

impl RankReference {
    pub fn new(corpus: &[RawRecord]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("reference corpus"));
        }
        let mut binding: Vec<f64> = corpus.iter().map(|r| r.binding_raw).collect();
        let mut hydro: Vec<f64> = corpus.iter().map(|r| r.hydro_raw).collect();
        binding.sort_by(f64::total_cmp);
        hydro.sort_by(f64::total_cmp);
        Ok(RankReference { binding, hydro })
    }

    pub fn len(&self) -> usize {
        self.binding.len()
    }

    pub fn is_empty(&self) -> bool {
        self.binding.is_empty()
    }

    pub fn score(&self, binding_raw: f64, hydro_raw: f64) -> OverallScore {
        OverallScore::new(
            rank_against(&self.binding, binding_raw),
            rank_against(&self.hydro, hydro_raw),
        )
    }

    pub fn score_record(&self, r: &RawRecord) -> OverallScore {
        self.score(r.binding_raw, r.hydro_raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverallScore {
    pub binding_rank: usize,
    pub hydro_rank: usize,
    pub total: usize,
}

impl OverallScore {
    pub fn new(binding_rank: usize, hydro_rank: usize) -> Self {
        OverallScore {
            binding_rank,
            hydro_rank,
            total: binding_rank + hydro_rank,
        }
    }
}

/// Class of a total for a corpus of `n`: 0 below `0.1 * 2 (n + 1)`, then four
/// equal bands up to the worst total.
pub fn label_class(total: usize, n: usize) -> usize {
    let worst = 2.0 * (n as f64 + 1.0);
    let threshold = CLASS0_FRACTION * worst;
    let t = total as f64;
    if t < threshold {
        return 0;
    }
    let width = (worst - threshold) / (NUM_CLASSES - 1) as f64;
    (1 + ((t - threshold) / width).floor() as usize).min(NUM_CLASSES - 1)
}

/// Scores every corpus member against the corpus and assigns classes.
pub fn assign_labels(corpus: &[RawRecord]) -> Result<Vec<usize>> {
    let reference = RankReference::new(corpus)?;
    Ok(corpus
        .iter()
        .map(|r| label_class(reference.score_record(r).total, corpus.len()))
        .collect())
}

/// Oracle truth for each peptide, ranked against the reference.
pub fn score_peptides(
    peptides: &[Peptide],
    oracle: &BindingOracle,
    reference: &RankReference,
    workers: usize,
) -> Vec<(RawRecord, OverallScore)> {
    evaluate_raw(peptides, oracle, workers)
        .into_iter()
        .map(|r| (r, reference.score_record(&r)))
        .collect()
}

/// `n` distinct peptides drawn uniformly from the whole sequence space.
pub fn random_baseline(n: usize, seed: u64) -> Result<Vec<Peptide>> {
    sample_unique(n, SeedStream::new(seed).derive("random-baseline"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub n: usize,
    pub median: f64,
    pub iqr: f64,
    pub binding_median: f64,
    pub binding_iqr: f64,
    pub hydro_median: f64,
    pub hydro_iqr: f64,
    /// Ratios against the `random` set, when present.
    pub median_vs_random: Option<f64>,
    pub iqr_vs_random: Option<f64>,
}

pub const RANDOM_SET: &str = "random";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComparisonReport {
    pub sets: BTreeMap<String, SetSummary>,
}

fn ratio(a: f64, b: f64) -> Option<f64> {
    (b != 0.0).then(|| a / b)
}

pub fn compare_models(sets: &[(String, Vec<OverallScore>)]) -> Result<ComparisonReport> {
    let mut out = BTreeMap::new();
    for (name, scores) in sets {
        if scores.is_empty() {
            return Err(Error::Empty("candidate set"));
        }
        let col = |f: fn(&OverallScore) -> usize| -> Vec<f64> { scores.iter().map(|s| f(s) as f64).collect() };
        let (total, binding, hydro) = (col(|s| s.total), col(|s| s.binding_rank), col(|s| s.hydro_rank));
        out.insert(
            name.clone(),
            SetSummary {
                n: scores.len(),
                median: median(&total),
                iqr: iqr(&total),
                binding_median: median(&binding),
                binding_iqr: iqr(&binding),
                hydro_median: median(&hydro),
                hydro_iqr: iqr(&hydro),
                median_vs_random: None,
                iqr_vs_random: None,
            },
        );
    }
    if let Some(random) = out.get(RANDOM_SET).cloned() {
        for s in out.values_mut() {
            s.median_vs_random = ratio(s.median, random.median);
            s.iqr_vs_random = ratio(s.iqr, random.iqr);
        }
    }
    Ok(ComparisonReport { sets: out })
}

impl ComparisonReport {
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>5} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8}",
            "set", "n", "median", "iqr", "bind_med", "hydro_med", "med/rnd", "iqr/rnd"
        );
        let fmt_ratio = |r: Option<f64>| r.map_or("-".to_string(), |v| format!("{v:.3}"));
        for (name, s) in &self.sets {
            let _ = writeln!(
                out,
                "{:<10} {:>5} {:>10.1} {:>10.1} {:>10.1} {:>10.1} {:>8} {:>8}",
                name,
                s.n,
                s.median,
                s.iqr,
                s.binding_median,
                s.hydro_median,
                fmt_ratio(s.median_vs_random),
                fmt_ratio(s.iqr_vs_random)
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rec(binding: f64, hydro: f64) -> RawRecord {
        RawRecord {
            sequence: Peptide::parse("AAAAA").unwrap(),
            hydro_raw: hydro,
            binding_raw: binding,
        }
    }

    #[test]
    fn rank_examples() {
        let reference: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(rank_against(&reference, -1.0), 1);
        assert_eq!(rank_against(&reference, 1000.0), 101);
        assert_eq!(rank_against(&reference, 5.0), 6);
        let mut rng = SeedStream::new(1).rng();
        let mut values: Vec<f64> = (0..300).map(|_| rng.random_range(0..40) as f64).collect();
        values.sort_by(f64::total_cmp);
        for _ in 0..200 {
            let v = rng.random_range(-2..42) as f64;
            assert_eq!(rank_against(&values, v), 1 + values.iter().filter(|&&r| r < v).count());
        }
    }

    #[test]
    fn overall_score_extremes_and_invariance() {
        let corpus: Vec<RawRecord> = (0..50).map(|i| rec(i as f64, (i * 7 % 50) as f64)).collect();
        let r = RankReference::new(&corpus).unwrap();
        assert_eq!(r.score(-1.0, -1.0).total, 2);
        assert_eq!(r.score(100.0, 100.0).total, 2 * 51);
        let transformed: Vec<RawRecord> = corpus
            .iter()
            .map(|c| rec(c.binding_raw.exp(), 3.0 * c.hydro_raw + 1.0))
            .collect();
        let rt = RankReference::new(&transformed).unwrap();
        for (b, h) in [(3.5, 10.0), (20.0, 0.5), (49.0, 49.0)] {
            assert_eq!(r.score(b, h), rt.score(f64::exp(b), 3.0 * h + 1.0));
        }
    }

    #[test]
    fn random_candidate_total_centres_on_n_plus_2() {
        let n = 200;
        let mut rng = SeedStream::new(2).rng();
        let corpus: Vec<RawRecord> = (0..n).map(|_| rec(rng.random(), rng.random())).collect();
        let r = RankReference::new(&corpus).unwrap();
        let trials = 10_000;
        let mean = (0..trials)
            .map(|_| r.score(rng.random(), rng.random()).total as f64)
            .sum::<f64>()
            / trials as f64;
        let expected = n as f64 + 2.0;
        assert!((mean / expected - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn class_rule() {
        assert_eq!(label_class(9_999, 50_000), 0);
        assert_eq!(label_class(10_001, 50_000), 1);
        assert_eq!(label_class(100_002, 50_000), 4);
        assert_eq!(label_class(1_000, 5_000), 0);
        assert_eq!(label_class(1_001, 5_000), 1);
        let mut rng = SeedStream::new(3).rng();
        let corpus: Vec<RawRecord> = (0..500).map(|_| rec(rng.random(), rng.random())).collect();
        let labels = assign_labels(&corpus).unwrap();
        assert!(labels.iter().all(|&c| c < NUM_CLASSES));
    }

    #[test]
    fn comparison_report() {
        let constant = vec![OverallScore::new(3, 4); 10];
        let mut rng = SeedStream::new(4).rng();
        let n = 1000;
        let corpus: Vec<RawRecord> = (0..n).map(|_| rec(rng.random(), rng.random())).collect();
        let r = RankReference::new(&corpus).unwrap();
        let sub: Vec<OverallScore> = corpus.iter().take(400).map(|c| r.score_record(c)).collect();
        let report = compare_models(&[("const".into(), constant), (RANDOM_SET.into(), sub)]).unwrap();
        assert_eq!(report.sets["const"].iqr, 0.0);
        assert_eq!(report.sets["const"].median, 7.0);
        let m = report.sets[RANDOM_SET].median;
        assert!((m / (n as f64 + 2.0) - 1.0).abs() < 0.1, "{m}");
        assert_eq!(report.sets[RANDOM_SET].median_vs_random, Some(1.0));
        let json = serde_json::to_string(&report).unwrap();
        let back: ComparisonReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert!(report.text_table().contains("const"));
        assert!(compare_models(&[("empty".into(), vec![])]).is_err());
    }
}
