//! Dataset generation and the label preprocessing pipeline.
//!
//! Binding scores are clipped to the band between their 0.1 and 0.9 empirical
//! quantiles (records outside are dropped), then mapped through
//! `ln(x + 100)`. Hydrophobicity is standardized with the population
//! standard deviation of the surviving records.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::alphabet::{Peptide, SPACE_SIZE};
use crate::error::{Error, Result};
use crate::oracle::{kd_hydrophobicity, BindingOracle, OracleConfig};
use crate::rng::SeedStream;
use crate::stats;
use crate::util::{self, fmt_sig9};

pub const CLIP_LO: f64 = 0.1;
pub const CLIP_HI: f64 = 0.9;
pub const BINDING_OFFSET: f64 = 100.0;

/// Keeps the values lying inside `[Q(lo), Q(hi)]`, in their original order.
pub fn clip_quantiles(values: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    let (qlo, qhi) = quantile_band(values, lo, hi)?;
    Ok(values.iter().copied().filter(|v| (qlo..=qhi).contains(v)).collect())
}

pub fn quantile_band(values: &[f64], lo: f64, hi: f64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("clip_quantiles"));
    }
    let sorted = stats::sorted_copy(values);
    Ok((stats::quantile_sorted(&sorted, lo), stats::quantile_sorted(&sorted, hi)))
}

pub fn log_normalize_binding(value: f64) -> Result<f64> {
    if !(value > -BINDING_OFFSET) {
        return Err(Error::Domain {
            operation: "log_normalize_binding",
            value,
        });
    }
    Ok((value + BINDING_OFFSET).ln())
}

/// Affine standardization parameters (population convention).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

pub fn standardize(values: &[f64]) -> Result<(Vec<f64>, Standardizer)> {
    if values.len() < 2 {
        return Err(Error::Insufficient {
            what: "standardize",
            needed: 2,
            available: values.len(),
        });
    }
    let mean = stats::mean(values);
    let std = stats::population_std(values);
    if !(std > 0.0) {
        return Err(Error::ZeroVariance("standardize"));
    }
    let s = Standardizer { mean, std };
    Ok((values.iter().map(|&v| s.apply(v)).collect(), s))
}

/// `n` distinct peptides drawn uniformly without replacement, returned sorted.
pub fn generate_unlabelled(n: usize, seed: u64) -> Result<Vec<Peptide>> {
    sample_unique(n, SeedStream::new(seed).derive("unlabelled"))
}

pub fn sample_unique(n: usize, stream: SeedStream) -> Result<Vec<Peptide>> {
    if n > SPACE_SIZE as usize {
        return Err(Error::Insufficient {
            what: "distinct peptides in the 5-residue space",
            needed: n,
            available: SPACE_SIZE as usize,
        });
    }
    let mut rng = stream.rng();
    let mut picked: Vec<u32> = index::sample(&mut rng, SPACE_SIZE as usize, n)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    picked.sort_unstable();
    Ok(picked
        .into_iter()
        .map(|i| Peptide::from_space_index(i).expect("index within space"))
        .collect())
}

/// Raw oracle values for one sequence, before any preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub sequence: Peptide,
    pub hydro_raw: f64,
    pub binding_raw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelledRecord {
    pub sequence: Peptide,
    pub hydro_raw: f64,
    pub binding_raw: f64,
    pub hydro_norm: f64,
    pub binding_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub hydro_mean: f64,
    pub hydro_std: f64,
    pub clip_lo_value: f64,
    pub clip_hi_value: f64,
}

impl PreprocessStats {
    pub fn hydro(&self) -> Standardizer {
        Standardizer {
            mean: self.hydro_mean,
            std: self.hydro_std,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabelledDataset {
    /// Records surviving the binding clip, sorted by sequence.
    pub records: Vec<LabelledRecord>,
    /// Every generated sequence with raw values, the reference population for ranking.
    pub corpus: Vec<RawRecord>,
    pub stats: PreprocessStats,
}

pub fn evaluate_raw(peptides: &[Peptide], oracle: &BindingOracle, workers: usize) -> Vec<RawRecord> {
    util::parallel_map(peptides, workers, |chunk| {
        chunk
            .iter()
            .map(|p| RawRecord {
                sequence: *p,
                hydro_raw: kd_hydrophobicity(p),
                binding_raw: oracle.score(p),
            })
            .collect()
    })
}

pub fn generate_labelled(n: usize, seed: u64, oracle_config: &OracleConfig, workers: usize) -> Result<LabelledDataset> {
    let oracle = BindingOracle::new(oracle_config)?;
    let peptides = sample_unique(n, SeedStream::new(seed).derive("labelled"))?;
    let corpus = evaluate_raw(&peptides, &oracle, workers);
    preprocess(corpus)
}

/// Applies clipping, log normalization and standardization to raw records.
pub fn preprocess(corpus: Vec<RawRecord>) -> Result<LabelledDataset> {
    let binding: Vec<f64> = corpus.iter().map(|r| r.binding_raw).collect();
    let (clip_lo_value, clip_hi_value) = quantile_band(&binding, CLIP_LO, CLIP_HI)?;
    let kept: Vec<&RawRecord> = corpus
        .iter()
        .filter(|r| (clip_lo_value..=clip_hi_value).contains(&r.binding_raw))
        .collect();
    let hydro: Vec<f64> = kept.iter().map(|r| r.hydro_raw).collect();
    let (hydro_norm, hydro_std) = standardize(&hydro)?;
    let records = kept
        .iter()
        .zip(hydro_norm)
        .map(|(r, h)| {
            Ok(LabelledRecord {
                sequence: r.sequence,
                hydro_raw: r.hydro_raw,
                binding_raw: r.binding_raw,
                hydro_norm: h,
                binding_norm: log_normalize_binding(r.binding_raw)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelledDataset {
        records,
        corpus,
        stats: PreprocessStats {
            hydro_mean: hydro_std.mean,
            hydro_std: hydro_std.std,
            clip_lo_value,
            clip_hi_value,
        },
    })
}

pub const LABELLED_HEADER: &str = "sequence,hydro_raw,binding_raw,hydro_norm,binding_norm";
pub const CORPUS_HEADER: &str = "sequence,hydro_raw,binding_raw";

pub fn labelled_csv(records: &[LabelledRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 64);
    out.push_str(LABELLED_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.sequence,
            fmt_sig9(r.hydro_raw),
            fmt_sig9(r.binding_raw),
            fmt_sig9(r.hydro_norm),
            fmt_sig9(r.binding_norm)
        );
    }
    out
}

pub fn corpus_csv(records: &[RawRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 40);
    out.push_str(CORPUS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{}",
            r.sequence,
            fmt_sig9(r.hydro_raw),
            fmt_sig9(r.binding_raw)
        );
    }
    out
}

fn parse_rows<const N: usize>(path: &Path, header: &str) -> Result<Vec<(Peptide, [f64; N])>> {
    let text = util::read_to_string(path)?;
    let mut lines = text.lines();
    let bad = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        reason,
    };
    if lines.next() != Some(header) {
        return Err(bad(format!("expected header `{header}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let mut fields = line.split(',');
            let seq = fields
                .next()
                .and_then(|s| Peptide::parse(s).ok())
                .ok_or_else(|| bad(format!("line {}: bad sequence", i + 2)))?;
            let mut vals = [0.0; N];
            for v in vals.iter_mut() {
                *v = fields
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad(format!("line {}: bad number", i + 2)))?;
            }
            if fields.next().is_some() {
                return Err(bad(format!("line {}: too many fields", i + 2)));
            }
            Ok((seq, vals))
        })
        .collect()
}

pub fn read_labelled_csv(path: &Path) -> Result<Vec<LabelledRecord>> {
    Ok(parse_rows::<4>(path, LABELLED_HEADER)?
        .into_iter()
        .map(
            |(sequence, [hydro_raw, binding_raw, hydro_norm, binding_norm])| LabelledRecord {
                sequence,
                hydro_raw,
                binding_raw,
                hydro_norm,
                binding_norm,
            },
        )
        .collect())
}

pub fn read_corpus_csv(path: &Path) -> Result<Vec<RawRecord>> {
    Ok(parse_rows::<2>(path, CORPUS_HEADER)?
        .into_iter()
        .map(|(sequence, [hydro_raw, binding_raw])| RawRecord {
            sequence,
            hydro_raw,
            binding_raw,
        })
        .collect())
}

/// One sequence per line.
pub fn peptide_lines(peptides: &[Peptide]) -> String {
    let mut out = String::with_capacity(peptides.len() * 6);
    for p in peptides {
        out.push_str(&p.to_string());
        out.push('\n');
    }
    out
}

pub fn read_peptide_lines(path: &Path) -> Result<Vec<Peptide>> {
    let text = util::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            Peptide::parse(l.trim()).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Checks the dataset invariants; used by tests and when loading artifacts.
pub fn check_records(records: &[LabelledRecord], stats: &PreprocessStats) -> Result<()> {
    let unique: HashSet<_> = records.iter().map(|r| r.sequence).collect();
    if unique.len() != records.len() {
        return Err(Error::Config("duplicate sequences in labelled data".into()));
    }
    for r in records {
        if !(stats.clip_lo_value..=stats.clip_hi_value).contains(&r.binding_raw) {
            return Err(Error::Config(format!("{} outside clip band", r.sequence)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_examples() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(
            clip_quantiles(&v, 0.1, 0.9).unwrap(),
            (2..=9).map(f64::from).collect::<Vec<_>>()
        );
        assert_eq!(clip_quantiles(&[4.0; 6], 0.1, 0.9).unwrap(), vec![4.0; 6]);
        assert_eq!(clip_quantiles(&[5.0], 0.1, 0.9).unwrap(), vec![5.0]);
        assert!(clip_quantiles(&[], 0.1, 0.9).is_err());
    }

    #[test]
    fn clip_retains_central_band() {
        use rand::Rng;
        let mut rng = SeedStream::new(5).rng();
        let v: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
        let kept = clip_quantiles(&v, CLIP_LO, CLIP_HI).unwrap().len() as f64 / v.len() as f64;
        assert!((0.78..=0.82).contains(&kept), "{kept}");
    }

    #[test]
    fn log_normalize_examples() {
        assert!((log_normalize_binding(0.0).unwrap() - 4.605170185988091).abs() < 1e-12);
        assert!((log_normalize_binding(-59.0).unwrap() - 41f64.ln()).abs() < 1e-12);
        assert!((log_normalize_binding(-59.0).unwrap() - 3.71357).abs() < 1e-5);
        assert!(matches!(log_normalize_binding(-100.0), Err(Error::Domain { .. })));
    }

    #[test]
    fn standardize_examples() {
        let (v, s) = standardize(&[0.0, 2.0]).unwrap();
        assert_eq!(v, vec![-1.0, 1.0]);
        assert_eq!((s.mean, s.std), (1.0, 1.0));
        let (again, s2) = standardize(&v).unwrap();
        assert!(s2.mean.abs() < 1e-12 && (s2.std - 1.0).abs() < 1e-12);
        assert_eq!(again, v);
        assert!(matches!(standardize(&[3.0; 4]), Err(Error::ZeroVariance(_))));
        assert!(standardize(&[1.0]).is_err());
    }

    #[test]
    fn unlabelled_generation() {
        let a = generate_unlabelled(10, 9).unwrap();
        assert_eq!(a, generate_unlabelled(10, 9).unwrap());
        assert_ne!(a, generate_unlabelled(10, 10).unwrap());
        let big = generate_unlabelled(100_000, 1).unwrap();
        let set: HashSet<_> = big.iter().collect();
        assert_eq!(set.len(), 100_000);
        assert!(generate_unlabelled(SPACE_SIZE as usize + 1, 1).is_err());
    }

    #[test]
    fn labelled_generation_invariants() {
        let ds = generate_labelled(5_000, 3, &OracleConfig::default(), 1).unwrap();
        assert!(ds.records.len() as f64 >= 0.8 * 5_000.0);
        assert_eq!(ds.corpus.len(), 5_000);
        check_records(&ds.records, &ds.stats).unwrap();
        let h: Vec<f64> = ds.records.iter().map(|r| r.hydro_norm).collect();
        assert!(stats::mean(&h).abs() < 1e-9);
        assert!((stats::population_std(&h) - 1.0).abs() < 1e-9);
        for r in &ds.records {
            assert_eq!(r.binding_norm, (r.binding_raw + 100.0).ln());
        }
        let again = generate_labelled(5_000, 3, &OracleConfig::default(), 3).unwrap();
        assert_eq!(labelled_csv(&ds.records), labelled_csv(&again.records));
    }

    #[test]
    fn csv_round_trip() {
        let ds = generate_labelled(300, 4, &OracleConfig::default(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labelled.csv");
        util::write_atomic(&path, labelled_csv(&ds.records).as_bytes()).unwrap();
        let back = read_labelled_csv(&path).unwrap();
        assert_eq!(back.len(), ds.records.len());
        for (a, b) in back.iter().zip(&ds.records) {
            assert_eq!(a.sequence, b.sequence);
            assert!((a.binding_raw - b.binding_raw).abs() <= 1e-8 * b.binding_raw.abs().max(1.0));
        }
        let cpath = dir.path().join("corpus.csv");
        util::write_atomic(&cpath, corpus_csv(&ds.corpus).as_bytes()).unwrap();
        assert_eq!(read_corpus_csv(&cpath).unwrap().len(), 300);
    }
}
